//! Single-file weight container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header (configuration, array names and shapes, training log), then every
//! array's values as little-endian `f32` in header order.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, SegModel};
use super::{EpochRecord, Result, UNetConfig, UnetError};

const MAGIC: &[u8; 8] = b"LVSEGW\0\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    arrays: Vec<ArrayEntry>,
    training_log: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> UnetError {
    UnetError::Io(io::Error::new(ErrorKind::InvalidData, msg.into()))
}

pub fn save_weights(model: &SegModel, path: impl AsRef<Path>) -> Result<()> {
    let arrays = model.named_arrays();
    let header = Header {
        config: model.config.clone(),
        arrays: arrays
            .iter()
            .map(|(name, shape, _)| ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        training_log: model.training_log.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let n_values: usize = arrays.iter().map(|(_, _, v)| v.len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * n_values);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, values) in &arrays {
        for v in values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a weight file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!(
            "unsupported weight file version {version}"
        )));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| corrupt(format!("bad header: {e}")))?;
    Ok((header, bytes[16 + len..].to_vec()))
}

fn fill(model: &mut SegModel, header: &Header, data: &[u8]) -> Result<()> {
    let shapes: Vec<(String, Vec<usize>)> = model
        .named_arrays()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let matches = shapes.len() == header.arrays.len()
        && shapes
            .iter()
            .zip(&header.arrays)
            .all(|((n, s), e)| *n == e.name && *s == e.shape);
    if !matches {
        return Err(corrupt(
            "array table does not match the stored configuration",
        ));
    }
    let total: usize = shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if data.len() != 4 * total {
        return Err(corrupt(format!(
            "expected {} data bytes, found {}",
            4 * total,
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for (_, dst) in model.named_arrays_mut() {
        dst.iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    model.training_log = header.training_log.clone();
    Ok(())
}

/// Reads a model, rebuilding the architecture from the stored configuration.
pub fn load_weights(path: impl AsRef<Path>) -> Result<SegModel> {
    let (header, data) = read_file(path.as_ref())?;
    let mut model = build_model(&header.config).map_err(|e| corrupt(e.to_string()))?;
    fill(&mut model, &header, &data)?;
    Ok(model)
}

/// Loads weights into an existing model whose architecture must match.
pub fn load_weights_into(model: &mut SegModel, path: impl AsRef<Path>) -> Result<()> {
    let (header, data) = read_file(path.as_ref())?;
    let arch = |c: &UNetConfig| UNetConfig {
        seed: 0,
        ..c.clone()
    };
    if arch(&header.config) != arch(&model.config) {
        return Err(UnetError::ConfigMismatch(format!(
            "file has {:?}, model has {:?}",
            header.config, model.config
        )));
    }
    fill(model, &header, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::unet::ConvLayers;

    fn cfg(bn: bool) -> UNetConfig {
        UNetConfig {
            input_size: 16,
            base_filters: 2,
            conv_layers: ConvLayers::L18,
            dropout_rate: 0.5,
            batch_norm: bn,
            seed: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        for bn in [false, true] {
            let mut m = build_model(&cfg(bn)).unwrap();
            m.training_log.push(EpochRecord {
                epoch: 1,
                loss: 0.25,
                val_loss: None,
                val: None,
            });
            let x = vec![Image::from_fn(16, 16, |r, c| ((r * 16 + c) as f32).sin())];
            let before = m.predict(&x).unwrap();
            save_weights(&m, &path).unwrap();
            let loaded = load_weights(&path).unwrap();
            assert_eq!(loaded.predict(&x).unwrap(), before);
            assert_eq!(loaded.training_log, m.training_log);
            let mut other = build_model(&UNetConfig {
                seed: 99,
                ..cfg(bn)
            })
            .unwrap();
            load_weights_into(&mut other, &path).unwrap();
            assert_eq!(other.predict(&x).unwrap(), before);
        }
    }

    #[test]
    fn mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&build_model(&cfg(false)).unwrap(), &path).unwrap();
        let mut wider = build_model(&UNetConfig {
            base_filters: 4,
            ..cfg(false)
        })
        .unwrap();
        assert!(matches!(
            load_weights_into(&mut wider, &path),
            Err(UnetError::ConfigMismatch(_))
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(
            matches!(load_weights(&path), Err(UnetError::Io(e)) if e.kind() == ErrorKind::InvalidData)
        );
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_weights(&path), Err(UnetError::Io(_))));
        assert!(matches!(
            load_weights(dir.path().join("missing")),
            Err(UnetError::Io(_))
        ));
    }
}
