//! Datasets, IDX files, the synthetic tile generator and class splits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, IdxError, Result};
use crate::numeric::Tensor;
use crate::seeded_rng;
use crate::train::TrainData;

pub const IDX_IMAGES_GRAY: u32 = 0x0000_0803;
pub const IDX_IMAGES_COLOR: u32 = 0x0000_0804;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// uint8 images `[N,c,h,w]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    shape: [usize; 3],
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, shape: [usize; 3], labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::Data(format!("image shape {shape:?} has a zero dimension")));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if pixels.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel bytes for {} images of {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Data(format!("label {y} >= class_count {class_count}")));
        }
        Ok(Self {
            pixels,
            shape,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let per = self.shape.iter().product::<usize>();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Pixel values mapped to `[-1, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self
            .pixels(i)
            .iter()
            .map(|&p| f64::from(p) / 127.5 - 1.0)
            .collect();
        Tensor::new(&self.shape, data).expect("pixel values are finite")
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &y in &self.labels {
            *out.entry(y).or_insert(0) += 1;
        }
        out
    }

    /// Samples of `classes`, relabelled through `head_of` (class id to
    /// head index), in dataset order.
    pub fn select(&self, classes: &[usize], head_of: &BTreeMap<usize, usize>) -> Result<TrainData> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, y) in self.labels.iter().enumerate() {
            if classes.contains(y) {
                let head = *head_of
                    .get(y)
                    .ok_or_else(|| Error::Data(format!("class {y} has no head index")))?;
                images.push(self.image(i));
                labels.push(head);
            }
        }
        TrainData::new(images, labels)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn idx_err(path: &Path, source: IdxError) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses an IDX image file into `(count, [c,h,w], pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, [usize; 3], Vec<u8>), IdxError> {
    if bytes.is_empty() {
        return Err(IdxError::Empty);
    }
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    let rank = match magic {
        IDX_IMAGES_GRAY => 3,
        IDX_IMAGES_COLOR => 4,
        found => {
            return Err(IdxError::BadMagic {
                found,
                expected: "0x00000803 or 0x00000804",
            })
        }
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(IdxError::ZeroDimension(i));
    }
    let (n, shape) = match dims[..] {
        [n, h, w] => (n, [1, h, w]),
        [n, c, h, w] => (n, [c, h, w]),
        _ => unreachable!(),
    };
    let expected = header + n * shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, shape, bytes[header..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, IdxError> {
    if bytes.is_empty() {
        return Err(IdxError::Empty);
    }
    if bytes.len() < 8 {
        return Err(IdxError::Truncated {
            expected: 8,
            found: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS {
        return Err(IdxError::BadMagic {
            found: magic,
            expected: "0x00000801",
        });
    }
    let n = be_u32(bytes, 4) as usize;
    if n == 0 {
        return Err(IdxError::ZeroDimension(0));
    }
    if bytes.len() != 8 + n {
        return Err(IdxError::Truncated {
            expected: 8 + n,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair. The class count is `max label + 1`.
pub fn load_idx_dataset(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let (n, shape, pixels) = parse_idx_images(&fs::read(ip)?).map_err(|e| idx_err(ip, e))?;
    let labels = parse_idx_labels(&fs::read(lp)?).map_err(|e| idx_err(lp, e))?;
    if labels.len() != n {
        return Err(idx_err(
            lp,
            IdxError::CountMismatch {
                images: n,
                labels: labels.len(),
            },
        ));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(pixels, shape, labels, class_count)
}

/// IDX image bytes; single-channel sets use the 3-d grayscale layout.
pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let [c, h, w] = ds.shape;
    let mut out = Vec::new();
    if c == 1 {
        out.extend_from_slice(&IDX_IMAGES_GRAY.to_be_bytes());
        for d in [ds.len(), h, w] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        out.extend_from_slice(&IDX_IMAGES_COLOR.to_be_bytes());
        for d in [ds.len(), c, h, w] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    out.extend_from_slice(&ds.pixels);
    out
}

/// IDX label bytes. Labels must fit in a byte.
pub fn encode_idx_labels(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in &ds.labels {
        out.push(u8::try_from(y).map_err(|_| Error::Data(format!("label {y} does not fit in IDX")))?);
    }
    Ok(out)
}

/// Parameters of the generated tile dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    /// Std of per-pixel Gaussian noise, in units of the `[0,1]` range.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 40,
            test_per_class: 20,
            size: 16,
            noise: 0.15,
            seed: 7,
        }
    }
}

/// One oriented colour grating.
struct Grating {
    angle: f64,
    cycles: f64,
    colour: [f64; 3],
}

/// Generates `(train, test)` RGB tiles. Every class is a sum of two
/// coloured sinusoidal gratings with its own orientations, frequencies
/// and colours; samples draw random phases (so position carries no
/// label information), random amplitudes and pixel noise.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.train_per_class == 0 || spec.test_per_class == 0 || spec.size < 4 {
        return Err(Error::Config(format!(
            "unusable synthetic dataset parameters {spec:?}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "synthetic noise {} must be >= 0",
            spec.noise
        )));
    }
    let mut rng = seeded_rng(spec.seed);
    let classes: Vec<[Grating; 2]> = (0..spec.classes)
        .map(|_| {
            [0, 1].map(|_| Grating {
                angle: rng.random_range(0.0..PI),
                cycles: rng.random_range(1.0..4.0),
                colour: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
            })
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).expect("noise std checked above");
    let n = spec.size;
    let mut render = |class: &[Grating; 2]| -> Vec<u8> {
        let phases = [0; 2].map(|_| rng.random_range(0.0..2.0 * PI));
        let amps = [0; 2].map(|_| 0.25 * rng.random_range(0.7..1.3));
        let mut px = vec![0u8; 3 * n * n];
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as f64 / n as f64, j as f64 / n as f64);
                let waves: Vec<f64> = class
                    .iter()
                    .zip(&phases)
                    .map(|(g, ph)| (2.0 * PI * g.cycles * (x * g.angle.cos() + y * g.angle.sin()) + ph).sin())
                    .collect();
                for c in 0..3 {
                    let mut v = 0.5;
                    for k in 0..2 {
                        v += amps[k] * class[k].colour[c] * waves[k];
                    }
                    v += noise.sample(&mut rng);
                    px[c * n * n + i * n + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        px
    };
    let mut build = |per_class: usize| -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(spec.classes * per_class * 3 * n * n);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for (y, class) in classes.iter().enumerate() {
            for _ in 0..per_class {
                pixels.extend(render(class));
                labels.push(y);
            }
        }
        Dataset::new(pixels, [3, n, n], labels, spec.classes)
    };
    let train = build(spec.train_per_class)?;
    let test = build(spec.test_per_class)?;
    Ok((train, test))
}

/// Which classes are learned when.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePlan {
    pub initial_classes: Vec<usize>,
    pub phases: Vec<Vec<usize>>,
    pub seed: u64,
}

impl PhasePlan {
    /// Classes in learning order; position = head index.
    pub fn order(&self) -> Vec<usize> {
        self.initial_classes
            .iter()
            .chain(self.phases.iter().flatten())
            .copied()
            .collect()
    }

    pub fn head_of(&self) -> BTreeMap<usize, usize> {
        self.order()
            .into_iter()
            .enumerate()
            .map(|(h, c)| (c, h))
            .collect()
    }

    /// Classes seen after `phase` (0 = initial stage).
    pub fn seen_after(&self, phase: usize) -> Vec<usize> {
        let mut out = self.initial_classes.clone();
        for p in self.phases.iter().take(phase) {
            out.extend(p);
        }
        out
    }
}

/// Seeded class shuffle; the first half is the initial stage and the rest
/// is cut into `phases` contiguous chunks, the last absorbing any
/// remainder.
pub fn split_class_incremental(class_count: usize, phases: usize, seed: u64) -> Result<PhasePlan> {
    if phases == 0 {
        return Err(Error::Config("at least one incremental phase is required".into()));
    }
    let initial = class_count / 2;
    let rest = class_count - initial;
    if initial == 0 || rest < phases {
        return Err(Error::Config(format!(
            "{class_count} classes cannot fill an initial stage and {phases} phases"
        )));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    order.shuffle(&mut seeded_rng(seed));
    let chunk = rest / phases;
    let mut plan = PhasePlan {
        initial_classes: order[..initial].to_vec(),
        phases: Vec::with_capacity(phases),
        seed,
    };
    let mut at = initial;
    for p in 0..phases {
        let end = if p + 1 == phases { class_count } else { at + chunk };
        plan.phases.push(order[at..end].to_vec());
        at = end;
    }
    Ok(plan)
}
