//! Sets of distinct obfuscation networks trained against one inference
//! network, with a key-value manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use obfnet_engine::{Network, Tensor};

use crate::data::DatasetSplits;
use crate::model_io;
use crate::train::{train_obfnet, Result, TrainConfig, TrainError};
use crate::zoo::ArchSpec;

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT: &str = "obfnet-set/1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetGates {
    /// Largest accepted `raw - concatenated` test accuracy, as a fraction.
    pub max_accuracy_drop: f64,
    /// Smallest accepted pairwise relative output distance between members.
    pub min_distinctness: f64,
    /// Test samples used to measure distinctness.
    pub probe_size: usize,
}

impl Default for SetGates {
    fn default() -> Self {
        SetGates {
            max_accuracy_drop: 0.05,
            min_distinctness: 0.1,
            probe_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemberStatus {
    Passed,
    /// Failed the accuracy gate once and passed with the fallback seed.
    Retrained,
    /// Failed with both seeds; kept in the manifest but not used.
    Failed,
}

impl MemberStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MemberStatus::Passed => "passed",
            MemberStatus::Retrained => "retrained",
            MemberStatus::Failed => "failed",
        }
    }

    pub fn usable(self) -> bool {
        self != MemberStatus::Failed
    }
}

impl FromStr for MemberStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [MemberStatus::Passed, MemberStatus::Retrained, MemberStatus::Failed]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown member status {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetEntry {
    pub seed: u64,
    pub file: String,
    pub checksum: String,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub accuracy_drop: f64,
    pub status: MemberStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObfSetManifest {
    pub arch: String,
    pub infnet_checksum: String,
    pub raw_test_accuracy: f64,
    pub gates: SetGates,
    /// Smallest pairwise relative output distance among usable members;
    /// infinite with fewer than two.
    pub min_pairwise_distinctness: f64,
    pub entries: Vec<SetEntry>,
}

/// A manifest with the member networks, in manifest order.
#[derive(Clone, Debug)]
pub struct ObfSet {
    pub manifest: ObfSetManifest,
    pub members: Vec<Network>,
}

impl ObfSet {
    /// Members that passed the accuracy gate.
    pub fn usable(&self) -> Vec<&Network> {
        self.members
            .iter()
            .zip(&self.manifest.entries)
            .filter(|(_, e)| e.status.usable())
            .map(|(n, _)| n)
            .collect()
    }
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both are zero.
pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let diff = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Pairwise relative distances of member outputs on `probe`, as
/// `(i, j, distance)` with `i < j`.
pub fn pairwise_distinctness(members: &[&Network], probe: &Tensor) -> Result<Vec<(usize, usize, f64)>> {
    let outputs = members.iter().map(|m| m.predict(probe)).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            out.push((i, j, relative_l2(outputs[i].data(), outputs[j].data())));
        }
    }
    Ok(out)
}

impl ObfSetManifest {
    /// Problems that make the set unfit for shipping; empty when fine.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.status == MemberStatus::Failed {
                p.push(format!(
                    "member {i} failed the accuracy gate (drop {:.4} > {:.4})",
                    e.accuracy_drop, self.gates.max_accuracy_drop
                ));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|b| b.checksum == a.checksum) {
                p.push(format!("member {i} duplicates an earlier checksum"));
            }
        }
        if self.min_pairwise_distinctness <= self.gates.min_distinctness {
            p.push(format!(
                "members too similar: relative distance {:.4} <= {:.4}",
                self.min_pairwise_distinctness, self.gates.min_distinctness
            ));
        }
        p
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = {FORMAT}");
        let _ = writeln!(s, "arch = {}", self.arch);
        let _ = writeln!(s, "infnet_checksum = {}", self.infnet_checksum);
        let _ = writeln!(s, "raw_test_accuracy = {}", self.raw_test_accuracy);
        let _ = writeln!(s, "max_accuracy_drop = {}", self.gates.max_accuracy_drop);
        let _ = writeln!(s, "min_distinctness = {}", self.gates.min_distinctness);
        let _ = writeln!(s, "probe_size = {}", self.gates.probe_size);
        let _ = writeln!(s, "min_pairwise_distinctness = {}", self.min_pairwise_distinctness);
        let _ = writeln!(s, "count = {}", self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(s, "member.{i}.seed = {}", e.seed);
            let _ = writeln!(s, "member.{i}.file = {}", e.file);
            let _ = writeln!(s, "member.{i}.checksum = {}", e.checksum);
            let _ = writeln!(s, "member.{i}.val_accuracy = {}", e.val_accuracy);
            let _ = writeln!(s, "member.{i}.test_accuracy = {}", e.test_accuracy);
            let _ = writeln!(s, "member.{i}.accuracy_drop = {}", e.accuracy_drop);
            let _ = writeln!(s, "member.{i}.status = {}", e.status.as_str());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut map = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| format!("missing key {k}"));
        fn parse<T: FromStr>(k: &str, v: String) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))
        }
        let num = |k: &str| -> Result<f64, String> { parse(k, get(k)?) };
        if get("format")? != FORMAT {
            return Err(format!("unsupported manifest format {:?}", get("format")?));
        }
        let count: usize = parse("count", get("count")?)?;
        let entries = (0..count)
            .map(|i| {
                let k = |f: &str| format!("member.{i}.{f}");
                Ok(SetEntry {
                    seed: parse(&k("seed"), get(&k("seed"))?)?,
                    file: get(&k("file"))?,
                    checksum: get(&k("checksum"))?,
                    val_accuracy: num(&k("val_accuracy"))?,
                    test_accuracy: num(&k("test_accuracy"))?,
                    accuracy_drop: num(&k("accuracy_drop"))?,
                    status: get(&k("status"))?.parse()?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(ObfSetManifest {
            arch: get("arch")?,
            infnet_checksum: get("infnet_checksum")?,
            raw_test_accuracy: num("raw_test_accuracy")?,
            gates: SetGates {
                max_accuracy_drop: num("max_accuracy_drop")?,
                min_distinctness: num("min_distinctness")?,
                probe_size: parse("probe_size", get("probe_size")?)?,
            },
            min_pairwise_distinctness: num("min_pairwise_distinctness")?,
            entries,
        })
    }
}

/// Trains `count` obfuscation networks with seeds `cfg.seed + i`. A member
/// over the accuracy-drop gate is retrained once with seed
/// `cfg.seed + count + i` and marked failed if it is still over.
pub fn generate_obfnet_set(
    obf_arch: &ArchSpec,
    infnet: &Network,
    data: &DatasetSplits,
    cfg: &TrainConfig,
    count: usize,
    gates: &SetGates,
) -> Result<ObfSet> {
    if count == 0 {
        return Err(TrainError::Config("set size must be at least 1".into()));
    }
    let mut members = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    let mut infnet_checksum = String::new();
    let mut raw_test_accuracy = 0.0;
    for i in 0..count {
        let attempt = |seed: u64| {
            let c = TrainConfig { seed, ..cfg.clone() };
            train_obfnet(obf_arch, infnet, data, &c).map(|(n, r)| (seed, n, r))
        };
        let (mut seed, mut net, mut report) = attempt(cfg.seed + i as u64)?;
        let mut status = MemberStatus::Passed;
        if report.accuracy_drop > gates.max_accuracy_drop {
            log::warn!("member {i}: drop {:.4} over the gate, retraining", report.accuracy_drop);
            (seed, net, report) = attempt(cfg.seed + (count + i) as u64)?;
            status = if report.accuracy_drop > gates.max_accuracy_drop {
                MemberStatus::Failed
            } else {
                MemberStatus::Retrained
            };
        }
        infnet_checksum = report.infnet_checksum.clone();
        raw_test_accuracy = report.raw_test_accuracy;
        entries.push(SetEntry {
            seed,
            file: format!("obfnet_{i:03}.onet"),
            checksum: model_io::checksum(&net)?,
            val_accuracy: report.training.best_val_accuracy,
            test_accuracy: report.concat_test_accuracy,
            accuracy_drop: report.accuracy_drop,
            status,
        });
        members.push(net);
    }
    let usable: Vec<&Network> = members
        .iter()
        .zip(&entries)
        .filter(|(_, e)| e.status.usable())
        .map(|(n, _)| n)
        .collect();
    let probe = data.test.take(gates.probe_size.max(1)).samples;
    let min_pairwise_distinctness = pairwise_distinctness(&usable, &probe)?
        .into_iter()
        .map(|(_, _, d)| d)
        .fold(f64::INFINITY, f64::min);
    Ok(ObfSet {
        manifest: ObfSetManifest {
            arch: obf_arch.label(),
            infnet_checksum,
            raw_test_accuracy,
            gates: *gates,
            min_pairwise_distinctness,
            entries,
        },
        members,
    })
}

/// Writes every member and `manifest.txt` into `dir`.
pub fn save_set(set: &ObfSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(model_io::ModelIoError::from)?;
    for (net, e) in set.members.iter().zip(&set.manifest.entries) {
        model_io::save(net, dir.join(&e.file))?;
    }
    fs::write(dir.join(MANIFEST_FILE), set.manifest.to_text()).map_err(model_io::ModelIoError::from)?;
    Ok(())
}

/// Reads a set written by [`save_set`], verifying every member checksum.
pub fn load_set(dir: impl AsRef<Path>) -> Result<ObfSet> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(model_io::ModelIoError::from)?;
    let manifest = ObfSetManifest::from_text(&text).map_err(TrainError::Config)?;
    let mut members = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let bytes = fs::read(dir.join(&e.file)).map_err(model_io::ModelIoError::from)?;
        if model_io::sha256_hex(&bytes) != e.checksum {
            return Err(TrainError::Config(format!("{} does not match its manifest checksum", e.file)));
        }
        members.push(model_io::decode(&bytes)?);
    }
    Ok(ObfSet { manifest, members })
}
