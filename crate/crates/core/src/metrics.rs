//! Numeric proxies for how much of the input survives obfuscation, plus
//! image dumps for looking at it.
//!
//! The correlation gate is an engineering choice and is reported next to the
//! raw value.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use obfnet_engine::{EngineError, Network, Tensor};
use serde::Serialize;
use thiserror::Error;

pub const HISTOGRAM_BINS: usize = 32;
pub const CORRELATION_GATE: f64 = 0.5;
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no obfuscation networks given")]
    NoNetworks,
    #[error("network {name} expects input {expected:?}, probe samples are {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("sample shape {0:?} is not an image (expected [h, w] or [1, h, w])")]
    NotImage(Vec<usize>),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObfuscationReport {
    pub networks: usize,
    pub samples: usize,
    /// Mean over networks and samples of |Pearson(x, O(x))|.
    pub mean_abs_correlation: f64,
    /// Per network, in input order.
    pub per_network_correlation: Vec<f64>,
    /// Mean absolute bin difference of the value histograms of x and O(x),
    /// averaged over networks.
    pub histogram_distance: f64,
    /// Mean pairwise relative L2 between network outputs; `None` with a
    /// single network.
    pub distinctness: Option<f64>,
    pub correlation_gate: f64,
    pub correlation_gate_passed: bool,
}

impl ObfuscationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "networks = {}", self.networks);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "mean_abs_correlation = {:.6}", self.mean_abs_correlation);
        for (i, c) in self.per_network_correlation.iter().enumerate() {
            let _ = writeln!(s, "network.{i}.mean_abs_correlation = {c:.6}");
        }
        let _ = writeln!(s, "histogram_distance = {:.6}", self.histogram_distance);
        match self.distinctness {
            Some(d) => {
                let _ = writeln!(s, "distinctness = {d:.6}");
            }
            None => {
                let _ = writeln!(s, "distinctness = n/a");
            }
        }
        let _ = writeln!(s, "correlation_gate = {} (engineering choice)", self.correlation_gate);
        let _ = writeln!(s, "correlation_gate_passed = {}", self.correlation_gate_passed);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let mean = |v: &[f32]| v[..n].iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Normalized histogram of `values` over `[lo, hi]`.
pub fn histogram(values: &[f32], lo: f32, hi: f32, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    let width = (hi - lo) as f64;
    for &v in values {
        let k = if width > 0.0 {
            (((v - lo) as f64 / width) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize
        } else {
            0
        };
        h[k] += 1.0;
    }
    let total = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= total);
    h
}

fn histogram_distance(a: &[f32], b: &[f32]) -> f64 {
    let (lo, hi) = a.iter().chain(b).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let ha = histogram(a, lo, hi, HISTOGRAM_BINS);
    let hb = histogram(b, lo, hi, HISTOGRAM_BINS);
    ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() / HISTOGRAM_BINS as f64
}

/// Runs every network over `probe` (shape `[N, ...]`) in inference mode.
pub fn obfuscation_report(obfnets: &[&Network], probe: &Tensor) -> Result<ObfuscationReport> {
    if obfnets.is_empty() {
        return Err(MetricsError::NoNetworks);
    }
    for net in obfnets {
        if net.input_shape() != probe.sample_shape() {
            return Err(MetricsError::Shape {
                name: net.name().to_string(),
                expected: net.input_shape().to_vec(),
                got: probe.sample_shape().to_vec(),
            });
        }
    }
    let n = probe.batch_size();
    let k = obfnets.len();
    let mut corr = vec![0.0; k];
    let mut outputs: Vec<Vec<f32>> = vec![Vec::with_capacity(probe.len()); k];
    for start in (0..n).step_by(CHUNK) {
        let chunk = probe.slice_batch(start, (start + CHUNK).min(n));
        for (j, net) in obfnets.iter().enumerate() {
            let out = net.predict(&chunk)?;
            for i in 0..chunk.batch_size() {
                corr[j] += pearson(chunk.sample(i), out.sample(i)).abs();
            }
            outputs[j].extend_from_slice(out.data());
        }
    }
    corr.iter_mut().for_each(|c| *c /= n as f64);
    let hist = outputs.iter().map(|o| histogram_distance(probe.data(), o)).sum::<f64>() / k as f64;
    let distinctness = (k > 1).then(|| {
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..k {
            for b in a + 1..k {
                total += crate::obfset::relative_l2(&outputs[a], &outputs[b]);
                pairs += 1;
            }
        }
        total / pairs as f64
    });
    let mean = corr.iter().sum::<f64>() / k as f64;
    Ok(ObfuscationReport {
        networks: k,
        samples: n,
        mean_abs_correlation: mean,
        per_network_correlation: corr,
        histogram_distance: hist,
        distinctness,
        correlation_gate: CORRELATION_GATE,
        correlation_gate_passed: mean <= CORRELATION_GATE,
    })
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(MetricsError::NotImage(shape.to_vec())),
    }
}

fn tile_pixels(v: &[f32]) -> impl Iterator<Item = u8> + '_ {
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    v.iter().map(move |&x| {
        if span > 0.0 && span.is_finite() {
            (((x - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    })
}

/// Writes a binary PGM with the original samples on the first row and one
/// row per network below, each tile min-max normalized on its own. Returns
/// `(width, height)` in pixels.
pub fn dump_obfuscated_grid(obfnets: &[&Network], samples: &Tensor, path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let (h, w) = image_dims(samples.sample_shape())?;
    for net in obfnets {
        if net.input_shape() != samples.sample_shape() {
            return Err(MetricsError::Shape {
                name: net.name().to_string(),
                expected: net.input_shape().to_vec(),
                got: samples.sample_shape().to_vec(),
            });
        }
    }
    let mut rows = vec![samples.clone()];
    for net in obfnets {
        rows.push(net.predict(samples)?);
    }
    let cols = samples.batch_size();
    let (width, height) = (cols * w, rows.len() * h);
    let mut img = vec![0u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols {
            for (p, px) in tile_pixels(row.sample(c)).enumerate() {
                let (y, x) = (r * h + p / w, c * w + p % w);
                img[y * width + x] = px;
            }
        }
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(&img);
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok((width, height))
}

/// Parses a binary PGM written by [`dump_obfuscated_grid`].
pub fn read_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let pixels = bytes.get(pos..)?;
    (pixels.len() == w * h).then(|| (w, h, pixels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use obfnet_engine::NetworkBuilder;

    #[test]
    fn pearson_oracles() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        // Sum of dx*dy is 4, sums of squares are 5 each.
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn histogram_is_normalized() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 0.0, 1.0, 4);
        assert_eq!(h, vec![0.25, 0.0, 0.25, 0.5]);
        assert_eq!(histogram_distance(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    fn identity(shape: &[usize]) -> Network {
        let n: usize = shape.iter().product();
        let mut net = NetworkBuilder::new("id", shape).flatten().dense(n).reshape(shape).build::<f32>(0).unwrap();
        let p = net.layer_mut(1).params_mut();
        p[0].data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = if i / n == i % n { 1.0 } else { 0.0 });
        p[1].data_mut().iter_mut().for_each(|b| *b = 0.0);
        net
    }

    fn constant(shape: &[usize]) -> Network {
        let n: usize = shape.iter().product();
        let mut net = NetworkBuilder::new("c", shape).flatten().dense(n).reshape(shape).build::<f32>(0).unwrap();
        let p = net.layer_mut(1).params_mut();
        p[0].data_mut().iter_mut().for_each(|w| *w = 0.0);
        p[1].data_mut().iter_mut().for_each(|b| *b = 0.5);
        net
    }

    fn probe() -> Tensor {
        Tensor::from_f64(vec![3, 2, 3], &(0..18).map(|i| ((i * 7) % 11) as f64 / 10.0).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_and_constant_conventions() {
        let (id, c) = (identity(&[2, 3]), constant(&[2, 3]));
        let r = obfuscation_report(&[&id], &probe()).unwrap();
        assert!((r.mean_abs_correlation - 1.0).abs() < 1e-6);
        assert!(r.histogram_distance < 1e-12);
        assert_eq!(r.distinctness, None);
        assert!(!r.correlation_gate_passed);
        let r = obfuscation_report(&[&c, &id], &probe()).unwrap();
        assert_eq!(r.per_network_correlation[0], 0.0);
        assert!(r.distinctness.unwrap() > 0.0);
        let r = obfuscation_report(&[&id, &id], &probe()).unwrap();
        assert_eq!(r.distinctness, Some(0.0));
        assert!(r.to_text().contains("distinctness = 0.000000"));
        assert!(r.to_json().contains("\"mean_abs_correlation\""));
        assert!(matches!(obfuscation_report(&[], &probe()), Err(MetricsError::NoNetworks)));
    }

    #[test]
    fn grid_dump_parses_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (id, c) = (identity(&[2, 3]), constant(&[2, 3]));
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        assert_eq!(dump_obfuscated_grid(&[&id, &c], &probe(), &a).unwrap(), (9, 6));
        dump_obfuscated_grid(&[&id, &c], &probe(), &b).unwrap();
        let bytes = fs::read(&a).unwrap();
        assert_eq!(bytes, fs::read(&b).unwrap());
        let (w, h, px) = read_pgm(&bytes).unwrap();
        assert_eq!((w, h), (9, 6));
        // Identity row repeats the originals; the constant row is all zero.
        assert_eq!(px[..9 * 2], px[9 * 2..9 * 4]);
        assert!(px[9 * 4..].iter().all(|&p| p == 0));
        assert!(px.contains(&255));
        let flat = Tensor::<f32>::zeros(&[2, 6]);
        assert!(matches!(
            dump_obfuscated_grid(&[], &flat, dir.path().join("x.pgm")),
            Err(MetricsError::NotImage(_))
        ));
    }
}
