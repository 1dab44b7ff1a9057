//! Raw tensor cache: `<split>.f32` holds the samples as little-endian f32,
//! `<split>.json` holds shape, labels and class count.

use std::fs;
use std::path::Path;

use obfnet_engine::Tensor;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetSplits, Result, Split};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    num_classes: usize,
    split: String,
    labels: Vec<usize>,
}

/// Writes `<dir>/<split>.f32` and `<dir>/<split>.json`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let raw: Vec<u8> = ds.samples.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let data_path = dir.join(format!("{}.f32", ds.split));
    fs::write(&data_path, raw).map_err(|e| DataError::io(&data_path, e))?;
    let sidecar = Sidecar {
        shape: ds.samples.shape().to_vec(),
        num_classes: ds.num_classes,
        split: ds.split.to_string(),
        labels: ds.labels.clone(),
    };
    let json_path = dir.join(format!("{}.json", ds.split));
    fs::write(&json_path, serde_json::to_vec(&sidecar).unwrap()).map_err(|e| DataError::io(&json_path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let json_path = dir.join(format!("{split}.json"));
    let text = fs::read(&json_path).map_err(|e| DataError::io(&json_path, e))?;
    let bad = |reason: String| DataError::Sidecar {
        path: json_path.clone(),
        reason,
    };
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| bad(e.to_string()))?;
    if sidecar.split != split.as_str() {
        return Err(bad(format!("split is {:?}", sidecar.split)));
    }
    let data_path = dir.join(format!("{split}.f32"));
    let raw = fs::read(&data_path).map_err(|e| DataError::io(&data_path, e))?;
    let expected = sidecar.shape.iter().product::<usize>() * 4;
    if raw.len() != expected {
        return Err(DataError::Truncated {
            path: data_path,
            needed: expected,
            available: raw.len(),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let samples = Tensor::new(sidecar.shape, data)?;
    Dataset::new(samples, sidecar.labels, sidecar.num_classes, split)
}

pub fn save_splits(splits: &DatasetSplits, dir: impl AsRef<Path>) -> Result<()> {
    for split in Split::ALL {
        save_dataset(splits.get(split), dir.as_ref())?;
    }
    Ok(())
}

pub fn load_splits(dir: impl AsRef<Path>) -> Result<DatasetSplits> {
    let dir = dir.as_ref();
    Ok(DatasetSplits {
        train: load_dataset(dir, Split::Train)?,
        validation: load_dataset(dir, Split::Validation)?,
        test: load_dataset(dir, Split::Test)?,
    })
}
