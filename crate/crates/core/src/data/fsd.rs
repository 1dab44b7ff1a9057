use std::fs;
use std::path::{Path, PathBuf};

use obfnet_engine::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mfcc::{Mfcc, MfccConfig};
use super::{DataError, Dataset, DatasetSplits, Result, Split};

/// Reads a 16-bit mono PCM WAV file as samples in [-1, 1).
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let wav_err = |reason: String| DataError::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(wav_err(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(DataError::SampleRate {
            path: path.to_path_buf(),
            found: spec.sample_rate,
            expected: expected_rate,
        });
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0).map_err(|e| wav_err(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FsdOptions {
    pub mfcc: MfccConfig,
    /// Seed of the stratified split.
    pub seed: u64,
    /// Standardize each coefficient row with mean and deviation fitted on
    /// the training split.
    pub standardize: bool,
}

impl Default for FsdOptions {
    fn default() -> Self {
        FsdOptions {
            mfcc: MfccConfig::default(),
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FsdReport {
    pub wav_files: usize,
    /// File names whose label prefix did not parse.
    pub skipped: Vec<String>,
    /// Per-coefficient mean and standard deviation applied, if any.
    pub standardization: Option<(Vec<f32>, Vec<f32>)>,
}

/// Label from a `<digit>_<speaker>_<index>.wav` style name.
fn parse_label(name: &str) -> Option<usize> {
    let prefix = name.split(['_', '-', '.']).next()?;
    if prefix.is_empty() || !prefix.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    prefix.parse().ok().filter(|&l| l < 10)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Seeded 80/10/10 split, stratified by label. Returns index lists in
/// ascending order.
fn stratified_split(labels: &[usize], classes: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<usize>; 3] = Default::default();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_test = (n as f64 * 0.1).round() as usize;
        let n_val = (n as f64 * 0.1).round() as usize;
        out[2].extend_from_slice(&idx[..n_test]);
        out[1].extend_from_slice(&idx[n_test..n_test + n_val]);
        out[0].extend_from_slice(&idx[n_test + n_val..]);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

fn standardize(splits: &mut DatasetSplits, coeffs: usize) -> (Vec<f32>, Vec<f32>) {
    let train = &splits.train.samples;
    let frames = train.sample_len() / coeffs;
    let mut mean = vec![0.0f64; coeffs];
    let mut sq = vec![0.0f64; coeffs];
    for s in train.data().chunks(frames * coeffs) {
        for (c, row) in s.chunks(frames).enumerate() {
            for &v in row {
                mean[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    let count = (train.batch_size() * frames) as f64;
    let mean: Vec<f32> = mean.iter().map(|m| (m / count) as f32).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, &m)| ((s / count - (m as f64).powi(2)).max(0.0).sqrt() as f32).max(1e-6))
        .collect();
    for ds in [&mut splits.train, &mut splits.validation, &mut splits.test] {
        for s in ds.samples.data_mut().chunks_mut(frames * coeffs) {
            for (c, row) in s.chunks_mut(frames).enumerate() {
                for v in row {
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
    }
    (mean, std)
}

/// Loads every WAV file of `dir` as an MFCC image and splits 80/10/10.
///
/// The class count is one more than the largest label found. Files whose
/// name does not start with a digit label are skipped and listed in the
/// report; unreadable or non-PCM files are errors.
pub fn load_fsd(dir: impl AsRef<Path>, opts: &FsdOptions) -> Result<(DatasetSplits, FsdReport)> {
    let dir = dir.as_ref();
    let mfcc = Mfcc::new(opts.mfcc.clone())?;
    let files = wav_files(dir)?;
    let mut report = FsdReport {
        wav_files: files.len(),
        ..FsdReport::default()
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in &files {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let Some(label) = parse_label(&name) else {
            log::warn!("skipping {name}: no leading digit label");
            report.skipped.push(name);
            continue;
        };
        let signal = read_wav(path, opts.mfcc.sample_rate)?;
        if signal.is_empty() {
            return Err(DataError::Wav {
                path: path.clone(),
                reason: "no samples".into(),
            });
        }
        images.push(mfcc.extract(&signal)?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(DataError::NoSamples(format!("no labelled WAV files in {}", dir.display())));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let shape = images[0].shape().to_vec();
    let refs: Vec<&[f32]> = images.iter().map(|t| t.data()).collect();
    let all = Dataset::new(Tensor::stack(&shape, &refs)?, labels, classes, Split::Train)?;
    let [tr, va, te] = stratified_split(&all.labels, classes, opts.seed);
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(DataError::NoSamples(format!(
            "{} recordings are too few for an 80/10/10 split",
            all.len()
        )));
    }
    let tag = |idx: &[usize], split| {
        let mut d = all.select(idx);
        d.split = split;
        d
    };
    let mut splits = DatasetSplits {
        train: tag(&tr, Split::Train),
        validation: tag(&va, Split::Validation),
        test: tag(&te, Split::Test),
    };
    if opts.standardize {
        report.standardization = Some(standardize(&mut splits, opts.mfcc.num_coefficients));
    }
    Ok((splits, report))
}

/// Writes `classes × per_class` synthetic recordings named
/// `<label>_synth_<i>.wav`: a class-specific pair of tones with random
/// duration, phase, amplitude and background noise.
pub fn write_synth_wavs(
    dir: impl AsRef<Path>,
    classes: usize,
    per_class: usize,
    seed: u64,
    sample_rate: u32,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let sr = sample_rate as f64;
    let mut paths = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let f1 = 250.0 + 300.0 * c as f64;
        let f2 = f1 * 2.5;
        for i in 0..per_class {
            let path = dir.join(format!("{c}_synth_{i}.wav"));
            let len = rng.gen_range(sr * 0.3..sr * 1.0) as usize;
            let amp = rng.gen_range(0.2..0.6);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut w = hound::WavWriter::create(&path, spec).map_err(|e| DataError::Wav {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            for n in 0..len {
                let t = n as f64 / sr;
                let tone = (std::f64::consts::TAU * f1 * t + phase).sin() + 0.5 * (std::f64::consts::TAU * f2 * t).sin();
                let v = amp * tone / 1.5 + rng.gen_range(-0.02..0.02);
                w.write_sample((v.clamp(-1.0, 1.0) * 32767.0) as i16)
                    .map_err(|e| DataError::Wav {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
            }
            w.finalize().map_err(|e| DataError::Wav {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_prefixes() {
        assert_eq!(parse_label("7_jackson_32.wav"), Some(7));
        assert_eq!(parse_label("0_george_0.wav"), Some(0));
        assert_eq!(parse_label("x_george_0.wav"), None);
        assert_eq!(parse_label("12_a.wav"), None);
        assert_eq!(parse_label("_a.wav"), None);
    }

    #[test]
    fn stratified_split_sizes() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let [tr, va, te] = stratified_split(&labels, 10, 3);
        assert_eq!((tr.len(), va.len(), te.len()), (1600, 200, 200));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        for c in 0..10 {
            assert_eq!(te.iter().filter(|&&i| labels[i] == c).count(), 20);
        }
        assert_eq!(stratified_split(&labels, 10, 3), [tr, va, te]);
        assert_ne!(stratified_split(&labels, 10, 4)[2], stratified_split(&labels, 10, 3)[2]);
    }

    #[test]
    fn wav_format_checks() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synth_wavs(dir.path(), 1, 1, 0, 8000).unwrap();
        assert!(matches!(
            read_wav(&paths[0], 16000),
            Err(DataError::SampleRate { found: 8000, .. })
        ));
        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo, 8000), Err(DataError::Wav { .. })));
        let float = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&float, 8000), Err(DataError::Wav { .. })));
        fs::write(dir.path().join("junk.wav"), b"not a wav").unwrap();
        assert!(read_wav(dir.path().join("junk.wav"), 8000).is_err());
    }

    #[test]
    fn load_skips_unlabelled_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_wavs(dir.path(), 3, 10, 1, 8000).unwrap();
        fs::copy(dir.path().join("0_synth_0.wav"), dir.path().join("speaker_x.wav")).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let opts = FsdOptions::default();
        let (a, report) = load_fsd(dir.path(), &opts).unwrap();
        assert_eq!(report.wav_files, 31);
        assert_eq!(report.skipped, vec!["speaker_x.wav".to_string()]);
        assert_eq!(a.train.len() + a.validation.len() + a.test.len(), 30);
        assert_eq!((a.validation.len(), a.test.len()), (3, 3));
        assert_eq!(a.sample_shape(), &[20, 45]);
        assert_eq!(a.num_classes(), 3);
        assert!(a.train.samples.is_finite());
        let (b, _) = load_fsd(dir.path(), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_recordings() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_wavs(dir.path(), 2, 2, 0, 8000).unwrap();
        assert!(matches!(load_fsd(dir.path(), &FsdOptions::default()), Err(DataError::NoSamples(_))));
    }

    #[test]
    fn standardized_train_rows_have_zero_mean() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_wavs(dir.path(), 2, 10, 2, 8000).unwrap();
        let (s, report) = load_fsd(dir.path(), &FsdOptions::default()).unwrap();
        assert!(report.standardization.is_some());
        let frames = 45;
        for c in 0..20 {
            let mut sum = 0.0f64;
            for sample in s.train.samples.data().chunks(20 * frames) {
                sum += sample[c * frames..(c + 1) * frames].iter().map(|&v| v as f64).sum::<f64>();
            }
            assert!((sum / (s.train.len() * frames) as f64).abs() < 1e-4);
        }
    }
}
