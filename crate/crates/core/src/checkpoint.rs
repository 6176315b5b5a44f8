//! Checkpoint file format.
//!
//! Layout: the magic string `TGZR1`, a little-endian u32 header length, a
//! JSON header carrying the model config and a tensor manifest (name, shape,
//! element offset), then all tensor payloads as little-endian f32 in
//! manifest order. Parameters are kept f32-representable in memory, so a
//! save/load round-trip reproduces the model bit-exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"TGZR1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let named = model.params.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = Header { config: model.cfg.clone(), tensors };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Schema { line: 0, msg: e.to_string() })?;

    let mut file = File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut payload = Vec::with_capacity(offset * 4);
    for (_, t) in &named {
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Schema {
            line: 0,
            msg: "not a TGZR1 checkpoint (bad magic)".into(),
        });
    }
    let header_len =
        u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Schema { line: 0, msg: "truncated checkpoint header".into() });
    }
    let header: Header = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| Error::Schema { line: 0, msg: format!("bad header: {e}") })?;
    header.config.validate()?;

    let payload = &bytes[header_end..];
    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + n * 4;
        if payload.len() < end {
            return Err(Error::Schema {
                line: 0,
                msg: format!("tensor '{}' exceeds payload", entry.name),
            });
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Tensor::new(entry.shape.clone(), data))
    };

    // Rebuild via the canonical parameter layout, then overwrite each tensor
    // by manifest name so field order in the file stays authoritative.
    let mut params = ModelParams::init(&header.config, 0)?;
    let expected: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    for name in &expected {
        let entry = header
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Schema {
                line: 0,
                msg: format!("checkpoint missing tensor '{name}'"),
            })?;
        let tensor = read_tensor(entry)?;
        for (n, slot) in params.named_tensors_mut() {
            if &n == name {
                if slot.shape() != tensor.shape() {
                    return Err(Error::Schema {
                        line: 0,
                        msg: format!(
                            "tensor '{name}' shape {:?} != expected {:?}",
                            tensor.shape(),
                            slot.shape()
                        ),
                    });
                }
                *slot = tensor;
                break;
            }
        }
    }
    Ok(Model { cfg: header.config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TensorBatch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            c_in: 3,
            d_model: 8,
            n_heads: 2,
            hist_len: 16,
            horizon: 8,
            inception_kernels: vec![1, 3],
            ..Default::default()
        };
        Model::init(cfg, 21).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgzr");
        let model = small_model();
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, model);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Tensor::new(vec![1, 16, 3], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let times = Tensor::new(vec![1, 16], (0..16).map(|i| i as f64 / 60.0).collect());
        let x = TensorBatch::new(data, times).unwrap();
        let a = model.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert_eq!(a, b, "forward after round-trip must be bit-identical");
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tgzr");
        let p2 = dir.path().join("b.tgzr");
        let model = small_model();
        save(&model, &p1).unwrap();
        save(&model, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tgzr");
        std::fs::write(&path, b"NOTCKPT...").unwrap();
        assert!(matches!(load(&path), Err(Error::Schema { .. })));
    }
}
