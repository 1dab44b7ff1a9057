use obfnet_engine::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, DatasetSplits, Split};
use crate::zoo::{FSD_SHAPE, MNIST_SHAPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    /// `[28, 28]` samples in [0, 1].
    MnistLike,
    /// `[20, 45]` unbounded samples.
    FsdLike,
}

impl FixtureKind {
    pub fn shape(self) -> [usize; 2] {
        match self {
            FixtureKind::MnistLike => MNIST_SHAPE,
            FixtureKind::FsdLike => FSD_SHAPE,
        }
    }

    fn sigma(self) -> f32 {
        match self {
            FixtureKind::MnistLike => 0.05,
            FixtureKind::FsdLike => 0.1,
        }
    }
}

fn class_means(kind: FixtureKind, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let len = kind.shape().iter().product::<usize>();
    let min_dist = 4.0 * kind.sigma();
    let mut means: Vec<Vec<f32>> = Vec::with_capacity(classes);
    while means.len() < classes {
        let m: Vec<f32> = (0..len)
            .map(|_| match kind {
                FixtureKind::MnistLike => rng.gen_range(0.2..0.8),
                FixtureKind::FsdLike => rng.gen_range(-1.0..1.0),
            })
            .collect();
        let far = means.iter().all(|o| {
            let d2: f32 = o.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= min_dist
        });
        if far {
            means.push(m);
        }
    }
    means
}

fn draw(kind: FixtureKind, means: &[Vec<f32>], per_class: usize, split: Split, rng: &mut ChaCha8Rng) -> Dataset {
    let noise = Normal::new(0.0f32, kind.sigma()).unwrap();
    let len = means[0].len();
    let mut data = Vec::with_capacity(means.len() * per_class * len);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    // interleave classes so any prefix is balanced
    for _ in 0..per_class {
        for (c, m) in means.iter().enumerate() {
            data.extend(m.iter().map(|&mu| {
                let v = mu + noise.sample(rng);
                match kind {
                    FixtureKind::MnistLike => v.clamp(0.0, 1.0),
                    FixtureKind::FsdLike => v,
                }
            }));
            labels.push(c);
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(&kind.shape());
    Dataset::new(Tensor::new(shape, data).unwrap(), labels, means.len(), split).unwrap()
}

/// Gaussian blobs around well-separated class means (pairwise distance at
/// least 4σ). Deterministic in `seed`.
///
/// # Panics
/// If `classes < 2` or `per_class == 0`.
pub fn synth_fixture(kind: FixtureKind, classes: usize, per_class: usize, seed: u64) -> Dataset {
    assert!(classes >= 2 && per_class > 0, "need at least two classes and one sample each");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(kind, classes, &mut rng);
    draw(kind, &means, per_class, Split::Train, &mut rng)
}

/// Train/validation/test splits sharing the class means; validation and test
/// get a quarter of `per_class` each (at least one).
pub fn synth_splits(kind: FixtureKind, classes: usize, per_class: usize, seed: u64) -> DatasetSplits {
    assert!(classes >= 2 && per_class > 0, "need at least two classes and one sample each");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(kind, classes, &mut rng);
    let small = (per_class / 4).max(1);
    DatasetSplits {
        train: draw(kind, &means, per_class, Split::Train, &mut rng),
        validation: draw(kind, &means, small, Split::Validation, &mut rng),
        test: draw(kind, &means, small, Split::Test, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let d = synth_fixture(FixtureKind::MnistLike, 3, 100, 1);
        assert_eq!(d.samples.shape(), &[300, 28, 28]);
        assert_eq!(d.class_counts(), vec![100, 100, 100]);
        assert!(d.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let f = synth_fixture(FixtureKind::FsdLike, 4, 5, 1);
        assert_eq!(f.samples.shape(), &[20, 20, 45]);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_fixture(FixtureKind::FsdLike, 3, 10, 9);
        assert_eq!(a, synth_fixture(FixtureKind::FsdLike, 3, 10, 9));
        assert_ne!(a, synth_fixture(FixtureKind::FsdLike, 3, 10, 10));
    }

    #[test]
    fn means_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let means = class_means(FixtureKind::MnistLike, 10, &mut rng);
        for i in 0..10 {
            for j in 0..i {
                let d: f32 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= 4.0 * 0.05);
            }
        }
    }

    #[test]
    fn splits_share_classes() {
        let s = synth_splits(FixtureKind::MnistLike, 3, 8, 2);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (24, 6, 6));
        assert_eq!(s.test.split, Split::Test);
    }
}
