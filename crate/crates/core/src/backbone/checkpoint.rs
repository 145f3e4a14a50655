//! Binary checkpoint: `"LODP"`, u16 version, u16 tensor count, then per
//! tensor a u16 name length, UTF-8 name, u8 rank, u32 dims and an f32
//! payload; a CRC32 of everything between the header and the trailer
//! closes the file. Little-endian throughout.
//!
//! The first record, `meta.config`, carries the architecture as small
//! integers so a model can be rebuilt without side information.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LODP";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER_LEN: usize = 8;
const META: &str = "meta.config";

fn encode_config(cfg: &ModelConfig) -> Vec<f64> {
    let mut v: Vec<f64> = cfg.input_shape.iter().map(|&d| d as f64).collect();
    v.push(cfg.feature_dim as f64);
    v.push(cfg.ratio as f64);
    v.push(cfg.stage_channels.len() as f64);
    v.extend(cfg.stage_channels.iter().map(|&c| c as f64));
    v.extend(cfg.blocks_per_stage.iter().map(|&b| b as f64));
    v
}

fn decode_config(v: &[f32]) -> Option<ModelConfig> {
    let ints: Vec<usize> = v
        .iter()
        .map(|&x| (x >= 0.0 && x.fract() == 0.0).then_some(x as usize))
        .collect::<Option<_>>()?;
    let stages = *ints.get(5)?;
    if ints.len() != 6 + 2 * stages {
        return None;
    }
    Some(ModelConfig {
        input_shape: [ints[0], ints[1], ints[2]],
        feature_dim: ints[3],
        ratio: ints[4],
        stage_channels: ints[6..6 + stages].to_vec(),
        blocks_per_stage: ints[6 + stages..].to_vec(),
    })
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialises a model; parameters are narrowed to f32.
pub fn encode(model: &Model) -> Vec<u8> {
    let named = model.named_params();
    let meta = encode_config(model.config());
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((named.len() + 1) as u16).to_le_bytes());
    write_record(&mut out, META, &[meta.len()], &meta);
    for (name, t) in &named {
        write_record(&mut out, name, t.shape(), t.data());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> std::result::Result<&'b [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

type Record = (String, Vec<usize>, Vec<f32>);

fn parse(bytes: &[u8]) -> std::result::Result<Vec<Record>, String> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(format!("file too short ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {:?}", &bytes[..4]));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body_end = bytes.len() - 4;
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: HEADER_LEN,
    };
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("dims of {name} overflow"))?;
        let payload = r.take(numel.checked_mul(4).ok_or("payload size overflow")?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, shape, data));
    }
    if r.pos != body_end {
        return Err(format!(
            "{} trailing bytes after the last tensor",
            body_end - r.pos
        ));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[HEADER_LEN..body_end]);
    if stored != actual {
        return Err(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        ));
    }
    Ok(records)
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> std::result::Result<Model, String> {
    let records = parse(bytes)?;
    let (first, rest) = records.split_first().ok_or("checkpoint has no tensors")?;
    if first.0 != META {
        return Err(format!("first tensor must be {META}, found {}", first.0));
    }
    let config = decode_config(&first.2).ok_or("malformed architecture record")?;
    let classes = rest
        .iter()
        .find(|r| r.0 == "classifier.bias")
        .map(|r| r.1.iter().product::<usize>())
        .ok_or("missing classifier.bias")?;
    let mut model = Model::build(&config, classes, 0).map_err(|e| e.to_string())?;
    if rest.iter().any(|r| r.0.contains("adapter")) {
        model.spawn_adapters().map_err(|e| e.to_string())?;
    }

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != rest.len() {
        return Err(format!(
            "expected {} tensors for this architecture, found {}",
            names.len(),
            rest.len()
        ));
    }
    for ((expected, slot), (name, shape, data)) in names.iter().zip(model.params_mut()).zip(rest) {
        if expected != name {
            return Err(format!("expected tensor {expected}, found {name}"));
        }
        if slot.shape() != shape.as_slice() {
            return Err(format!("{name}: shape {shape:?}, expected {:?}", slot.shape()));
        }
        let widened: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
        let grad = slot.requires_grad;
        *slot = Tensor::new(shape, widened)
            .map_err(|e| format!("{name}: {e}"))?
            .trainable(grad);
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|detail| Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        detail,
    })
}
