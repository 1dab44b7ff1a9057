use std::f64::consts::PI;
use std::sync::Arc;

use obfnet_engine::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{DataError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub num_coefficients: usize,
    pub target_frames: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 8000,
            frame_length: 2048,
            hop: 512,
            fft_size: 2048,
            mel_filters: 128,
            f_min: 0.0,
            f_max: 4000.0,
            num_coefficients: 20,
            target_frames: 45,
        }
    }
}

impl MfccConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.sample_rate == 0 || self.frame_length == 0 || self.hop == 0 || self.target_frames == 0 {
            return bad("sample rate, frame length, hop and frame count must be positive");
        }
        if self.fft_size < self.frame_length {
            return bad("fft_size must be at least frame_length");
        }
        if self.num_coefficients == 0 || self.num_coefficients > self.mel_filters {
            return bad("need 1 <= num_coefficients <= mel_filters");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// A reusable MFCC extractor: Hann-windowed frames without centering,
/// power spectrum, triangular mel filterbank (HTK mel scale), natural log,
/// orthonormal DCT-II.
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// Per filter: first bin and weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    dct: Vec<f64>,
}

const LOG_FLOOR: f64 = 1e-10;

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_length;
        // periodic Hann
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);

        let bins = cfg.fft_size / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.mel_filters + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.mel_filters + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.mel_filters);
        for m in 0..cfg.mel_filters {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let weights: Vec<(usize, f64)> = (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
                    (k, w)
                })
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let first = weights.first().map_or(0, |&(k, _)| k);
            filters.push((first, weights.into_iter().map(|(_, w)| w).collect()));
        }
        let centers_hz = edges[1..=cfg.mel_filters].to_vec();

        let (k, m) = (cfg.num_coefficients, cfg.mel_filters);
        let mut dct = vec![0.0; k * m];
        for i in 0..k {
            let scale = if i == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for j in 0..m {
                dct[i * m + j] = scale * (PI * i as f64 * (2 * j + 1) as f64 / (2 * m) as f64).cos();
            }
        }
        Ok(Mfcc {
            cfg,
            window,
            fft,
            filters,
            centers_hz,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Center frequency of each mel filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Frames produced from a signal of `len` samples before padding or
    /// truncation. Signals shorter than one frame still give one frame.
    pub fn frame_count(&self, len: usize) -> usize {
        if len <= self.cfg.frame_length {
            1
        } else {
            1 + (len - self.cfg.frame_length) / self.cfg.hop
        }
    }

    /// Mel filterbank energies of a single frame starting at `signal[0]`
    /// (zero-filled past the end).
    pub fn mel_energies(&self, signal: &[f32]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
            let s = signal.get(i).copied().unwrap_or(0.0) as f64;
            b.re = s * w;
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|(first, w)| w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn cepstrum(&self, energies: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = energies.iter().map(|&e| e.max(LOG_FLOOR).ln()).collect();
        let m = self.cfg.mel_filters;
        (0..self.cfg.num_coefficients)
            .map(|i| self.dct[i * m..(i + 1) * m].iter().zip(&logs).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `[num_coefficients, target_frames]` coefficients; frames past the
    /// target are dropped, missing frames are zero columns on the right.
    pub fn extract(&self, signal: &[f32]) -> Result<Tensor> {
        if signal.is_empty() {
            return Err(DataError::EmptySignal);
        }
        let (k, t) = (self.cfg.num_coefficients, self.cfg.target_frames);
        let frames = self.frame_count(signal.len()).min(t);
        let mut out = vec![0.0f32; k * t];
        for f in 0..frames {
            let start = f * self.cfg.hop;
            let coeffs = self.cepstrum(&self.mel_energies(&signal[start..]));
            for (i, c) in coeffs.into_iter().enumerate() {
                out[i * t + f] = c as f32;
            }
        }
        Ok(Tensor::new(vec![k, t], out)?)
    }
}

pub fn extract_mfcc(signal: &[f32], cfg: &MfccConfig) -> Result<Tensor> {
    Mfcc::new(cfg.clone())?.extract(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, sr: f64) -> Vec<f32> {
        (0..len).map(|i| (2.0 * PI * freq * i as f64 / sr).sin() as f32 * 0.5).collect()
    }

    #[test]
    fn mel_scale_roundtrip() {
        for f in [0.0, 100.0, 1000.0, 4000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.5);
    }

    #[test]
    fn output_shape_is_fixed() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        for len in [1, 100, 2048, 4000, 8000 * 10] {
            let x = m.extract(&sine(440.0, len, 8000.0)).unwrap();
            assert_eq!(x.shape(), &[20, 45]);
            assert!(x.is_finite());
        }
    }

    #[test]
    fn short_signals_are_zero_padded_on_the_right() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        let sig = sine(300.0, 4000, 8000.0);
        assert_eq!(m.frame_count(sig.len()), 4);
        let x = m.extract(&sig).unwrap();
        for row in x.data().chunks(45) {
            assert!(row[..4].iter().any(|&v| v != 0.0));
            assert!(row[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ten_seconds_are_truncated() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        assert!(m.frame_count(80_000) > 45);
        let long = sine(700.0, 80_000, 8000.0);
        let x = m.extract(&long).unwrap();
        assert_eq!(x, m.extract(&long[..44 * 512 + 2048]).unwrap());
    }

    #[test]
    fn constant_signal_gives_identical_frames() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        let x = m.extract(&vec![0.25f32; 2048 + 9 * 512]).unwrap();
        assert_eq!(m.frame_count(2048 + 9 * 512), 10);
        for row in x.data().chunks(45) {
            assert!(row[..10].iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn sine_peaks_in_its_band() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        for band in [10, 40, 64, 100] {
            let f = m.centers_hz()[band];
            let e = m.mel_energies(&sine(f, 2048, 8000.0));
            let peak = e
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, band, "sine at {f} Hz");
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        let n = 128;
        for a in 0..20 {
            for b in 0..20 {
                let dot: f64 = (0..n).map(|j| m.dct[a * n + j] * m.dct[b * n + j]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(extract_mfcc(&[], &MfccConfig::default()), Err(DataError::EmptySignal)));
        let cfg = MfccConfig {
            fft_size: 1024,
            ..MfccConfig::default()
        };
        assert!(matches!(Mfcc::new(cfg), Err(DataError::Config(_))));
    }
}
