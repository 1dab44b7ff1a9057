//! Per-sample inference timing across batch sizes.

use std::fmt::Write as _;
use std::time::Instant;

use obfnet_engine::{EngineError, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_RUNS: usize = 100;
pub const WARMUP_RUNS: usize = 5;
pub const DEFAULT_BATCH_SIZES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("batch sizes must be at least 1")]
    ZeroBatch,
    #[error("at least one timed run is needed")]
    ZeroRuns,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Timing for one batch size. Times are seconds per sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub batch_size: usize,
    pub runs: usize,
    pub min_s: f64,
    pub avg_s: f64,
    pub max_s: f64,
    pub host: String,
}

pub const CSV_HEADER: &str = "model,batch_size,runs,min_s,avg_s,max_s,host";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.9},{:.9},{:.9},{}",
            csv_field(&r.model),
            r.batch_size,
            r.runs,
            r.min_s,
            r.avg_s,
            r.max_s,
            csv_field(&r.host)
        );
    }
    s
}

/// CPU model, logical core count, OS and architecture.
pub fn host_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cpus; {} {}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Times `runs` inference passes per batch size after [`WARMUP_RUNS`]
/// untimed ones. Inputs are uniform in [0, 1) from a fixed seed.
pub fn bench_model(net: &Network, batch_sizes: &[usize], runs: usize) -> Result<Vec<BenchRow>, BenchError> {
    if batch_sizes.contains(&0) {
        return Err(BenchError::ZeroBatch);
    }
    if runs == 0 {
        return Err(BenchError::ZeroRuns);
    }
    let host = host_description();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let mut shape = vec![b];
        shape.extend_from_slice(net.input_shape());
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.gen::<f32>()).collect())?;
        for _ in 0..WARMUP_RUNS {
            std::hint::black_box(net.predict(&x)?);
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            std::hint::black_box(net.predict(&x)?);
            times.push(t.elapsed().as_secs_f64() / b as f64);
        }
        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
        let max = times.iter().copied().fold(0.0, f64::max);
        let avg = (times.iter().sum::<f64>() / runs as f64).clamp(min, max);
        log::info!("{} batch {b}: {:.3} ms/sample", net.name(), avg * 1e3);
        rows.push(BenchRow {
            model: net.name().to_string(),
            batch_size: b,
            runs,
            min_s: min,
            avg_s: avg,
            max_s: max,
            host: host.clone(),
        });
    }
    Ok(rows)
}

/// Whether per-sample averages never rise by more than `tolerance` (a
/// fraction) over the best seen at any smaller batch size.
pub fn non_increasing_within(rows: &[BenchRow], tolerance: f64) -> bool {
    let mut best = f64::INFINITY;
    for r in rows {
        if r.avg_s > best * (1.0 + tolerance) {
            return false;
        }
        best = best.min(r.avg_s);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use obfnet_engine::NetworkBuilder;

    #[test]
    fn rows_are_ordered_and_complete() {
        let net = NetworkBuilder::new("small", &[8]).dense(4).softmax().build(1).unwrap();
        let rows = bench_model(&net, &[1, 4], 7).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.runs, 7);
            assert!(r.min_s <= r.avg_s && r.avg_s <= r.max_s);
        }
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(matches!(bench_model(&net, &[0], 1), Err(BenchError::ZeroBatch)));
        assert!(matches!(bench_model(&net, &[1], 0), Err(BenchError::ZeroRuns)));
    }

    #[test]
    fn trend_check() {
        let row = |avg| BenchRow {
            model: "m".into(),
            batch_size: 1,
            runs: 1,
            min_s: avg,
            avg_s: avg,
            max_s: avg,
            host: "h".into(),
        };
        assert!(non_increasing_within(&[row(1.0), row(0.5), row(0.54)], 0.1));
        assert!(!non_increasing_within(&[row(1.0), row(0.5), row(0.6)], 0.1));
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
