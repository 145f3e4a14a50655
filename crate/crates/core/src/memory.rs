//! Per-class prototype memory.
//!
//! One mean feature vector per learned class, stored as `f32`. The store
//! replaces exemplar images for old classes: a 512-d prototype costs
//! 2048 bytes where 20 CIFAR-sized RGB images cost 61 440.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const PROTOTYPE_MAGIC: &[u8; 4] = b"LPRO";
pub const PROTOTYPE_VERSION: u16 = 1;
/// magic + version + feature_dim + class count
pub const PROTOTYPE_HEADER_BYTES: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEntry {
    pub prototype: Vec<f32>,
    pub sample_count: u32,
}

impl PrototypeEntry {
    pub fn as_tensor(&self) -> Tensor {
        let data = self.prototype.iter().map(|&v| f64::from(v)).collect();
        Tensor::vector(data).expect("stored prototypes are finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    feature_dim: usize,
    entries: BTreeMap<u32, PrototypeEntry>,
}

/// Element-wise mean of equally sized feature vectors.
pub fn compute_prototype(features: &[Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::Prototype("cannot average an empty feature list".into()))?;
    let dim = first.numel();
    let mut sum = vec![0.0; dim];
    for f in features {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                "compute_prototype",
                format!("{:?} vs {:?}", first.shape(), f.shape()),
            ));
        }
        sum.iter_mut().zip(f.data()).for_each(|(s, v)| *s += v);
    }
    let n = features.len() as f64;
    Tensor::vector(sum.into_iter().map(|s| s / n).collect())
}

/// Bytes needed to keep `images_per_class` uint8 images of shape `c×h×w`.
pub fn exemplar_bytes_per_class(images_per_class: usize, shape: [usize; 3]) -> usize {
    images_per_class * shape.iter().product::<usize>()
}

impl PrototypeStore {
    pub fn new(feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Prototype("feature_dim must be > 0".into()));
        }
        Ok(Self {
            feature_dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn add_class(&mut self, class_id: u32, prototype: &Tensor, sample_count: u32) -> Result<()> {
        if prototype.shape() != [self.feature_dim] {
            return Err(Error::shape(
                "add_class",
                format!(
                    "prototype {:?} for feature_dim {}",
                    prototype.shape(),
                    self.feature_dim
                ),
            ));
        }
        if self.entries.contains_key(&class_id) {
            return Err(Error::Prototype(format!(
                "class {class_id} already has a prototype"
            )));
        }
        let stored = prototype.data().iter().map(|&v| v as f32).collect();
        self.entries.insert(
            class_id,
            PrototypeEntry {
                prototype: stored,
                sample_count,
            },
        );
        Ok(())
    }

    pub fn get(&self, class_id: u32) -> Result<&PrototypeEntry> {
        self.entries
            .get(&class_id)
            .ok_or_else(|| Error::Prototype(format!("no prototype for class {class_id}")))
    }

    /// Entries in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &PrototypeEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    /// Prototype payload only: `classes × feature_dim × 4`.
    pub fn footprint_bytes(&self) -> usize {
        self.entries.len() * self.feature_dim * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(PROTOTYPE_HEADER_BYTES + self.entries.len() * (8 + self.feature_dim * 4));
        out.extend_from_slice(PROTOTYPE_MAGIC);
        out.extend_from_slice(&PROTOTYPE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (&id, e) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&e.sample_count.to_le_bytes());
            for v in &e.prototype {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < PROTOTYPE_HEADER_BYTES {
            return Err(format!("file too short ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != PROTOTYPE_MAGIC {
            return Err(format!("bad magic {:?}", &bytes[..4]));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PROTOTYPE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let dim = word(6) as usize;
        let count = word(10) as usize;
        if dim == 0 {
            return Err("feature_dim is zero".into());
        }
        let entry_len = 8 + dim * 4;
        let expected = count
            .checked_mul(entry_len)
            .and_then(|n| n.checked_add(PROTOTYPE_HEADER_BYTES))
            .ok_or("entry table size overflows")?;
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes, found {}", bytes.len()));
        }
        let mut entries = BTreeMap::new();
        for chunk in bytes[PROTOTYPE_HEADER_BYTES..].chunks_exact(entry_len) {
            let id = u32::from_le_bytes(chunk[0..4].try_into().unwrap());
            let sample_count = u32::from_le_bytes(chunk[4..8].try_into().unwrap());
            let prototype: Vec<f32> = chunk[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if prototype.iter().any(|v| !v.is_finite()) {
                return Err(format!("class {id} has a non-finite prototype"));
            }
            if entries
                .insert(
                    id,
                    PrototypeEntry {
                        prototype,
                        sample_count,
                    },
                )
                .is_some()
            {
                return Err(format!("class {id} appears twice"));
            }
        }
        Ok(Self {
            feature_dim: dim,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Format {
            kind: "prototype",
            path: path.to_path_buf(),
            detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two_vectors() {
        let p = compute_prototype(&[
            Tensor::vector(vec![1.0, 3.0]).unwrap(),
            Tensor::vector(vec![3.0, 5.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(p.data(), [2.0, 4.0]);
        let single = Tensor::vector(vec![0.25, -7.0]).unwrap();
        assert_eq!(compute_prototype(std::slice::from_ref(&single)).unwrap(), single);
    }

    #[test]
    fn empty_or_ragged_input_rejected() {
        assert!(matches!(compute_prototype(&[]), Err(Error::Prototype(_))));
        assert!(compute_prototype(&[Tensor::zeros(&[2]), Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn add_get_and_duplicates() {
        let mut store = PrototypeStore::new(3).unwrap();
        let p = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
        store.add_class(4, &p, 10).unwrap();
        let e = store.get(4).unwrap();
        assert_eq!(e.prototype, vec![0.1f32, 0.2, 0.3]);
        assert_eq!(e.sample_count, 10);
        assert!(matches!(store.add_class(4, &p, 1), Err(Error::Prototype(_))));
        assert!(matches!(store.get(5), Err(Error::Prototype(_))));
        assert!(store.add_class(5, &Tensor::zeros(&[2]), 1).is_err());
    }

    #[test]
    fn footprint_accounting() {
        let mut store = PrototypeStore::new(512).unwrap();
        assert_eq!(store.footprint_bytes(), 0);
        store.add_class(0, &Tensor::zeros(&[512]), 1).unwrap();
        assert_eq!(store.footprint_bytes(), 2048);
        for c in 1..50 {
            store.add_class(c, &Tensor::zeros(&[512]), 1).unwrap();
        }
        assert_eq!(store.footprint_bytes(), 102_400);
        assert_eq!(exemplar_bytes_per_class(20, [3, 32, 32]), 61_440);
        assert_eq!(exemplar_bytes_per_class(20, [3, 32, 32]) / 2048, 30);
    }

    #[test]
    fn serialization_round_trip() {
        let mut store = PrototypeStore::new(4).unwrap();
        store
            .add_class(7, &Tensor::vector(vec![1.5, -2.0, 0.0, 3.25]).unwrap(), 12)
            .unwrap();
        store
            .add_class(2, &Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap(), 3)
            .unwrap();
        let bytes = store.to_bytes();
        assert_eq!(bytes.len(), PROTOTYPE_HEADER_BYTES + 2 * (8 + 16));
        let back = PrototypeStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(PrototypeStore::from_bytes(&bad).unwrap_err().contains("magic"));
        assert!(PrototypeStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
