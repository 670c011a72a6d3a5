//! Parameter checkpoints: `<stem>.json` shape manifest plus `<stem>.bin`
//! holding little-endian f32 values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelParams, NnError};

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_checkpoint(params: &ModelParams, stem: &Path) -> Result<(), NnError> {
    let (json, bin) = paths(stem);
    let mut bytes = Vec::with_capacity(params.num_params() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
            offset,
        });
        for v in t.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        architecture: params.architecture(),
        tensors,
    };
    fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(bin, bytes)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<ModelParams, NnError> {
    let (json, bin) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    let bytes = fs::read(bin)?;
    if bytes.len() % 4 != 0 {
        return Err(NnError::Checkpoint("data length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut tensors = Vec::new();
    for e in manifest.tensors {
        let len = e.shape[0] * e.shape[1];
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| NnError::Checkpoint(format!("tensor {} runs past the data", e.name)))?;
        let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), slice.iter().map(|&v| v as f64).collect())
            .map_err(|err| NnError::Checkpoint(err.to_string()))?;
        tensors.push((e.name, t));
    }
    ModelParams::from_tensors(manifest.architecture, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_equals_f32_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init_mlp4(6, [4, 4, 4], &mut rng);
        let stem = dir.path().join("phi");
        save_checkpoint(&p, &stem).unwrap();
        let back = load_checkpoint(&stem).unwrap();
        assert!(back.bitwise_eq(&p.quantized_f32()));
        // a quantized bundle survives a second trip unchanged
        save_checkpoint(&back, &stem).unwrap();
        assert!(load_checkpoint(&stem).unwrap().bitwise_eq(&back));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init_gcn2(3, 2, 2, &mut rng);
        let stem = dir.path().join("theta");
        save_checkpoint(&p, &stem).unwrap();
        let bin = stem.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }
}
