//! Losses, rotation augmentation and the two training loops.
//!
//! Incremental objective per batch:
//!
//! ```text
//! L = L_ce + γ·L_kd + λ·L_proto
//! L_ce    = mean over items of CE(logits, label)
//! L_kd    = mean over items of ‖F(x; adapters on) − F_old(x)‖₂
//! L_proto = Σ over stored prototypes p_c of CE(G(p_c), c)
//! ```
//!
//! With augmentation on, each rotated copy is its own class: the training
//! head is the class head followed by a rotation head, and a copy rotated
//! `r` quarter turns gets label `K·r + y`. Evaluation only reads the class
//! head.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngExt;

use crate::backbone::{Model, ModelVars};
use crate::error::{Error, Result};
use crate::memory::{compute_prototype, PrototypeStore};
use crate::numeric::{self, argmax, clip_grad_norm, sgd_step, zero_grad, Tape, Tensor, Var};
use crate::pruning::{average_scores, score_dataset, select_retained, El2nRecord};
use crate::{seeded_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Augmentation {
    /// Originals only.
    None,
    /// Each original plus one copy at a random quarter turn.
    RandomSingle,
    /// Each original plus all three quarter turns.
    AllRotations,
}

impl Augmentation {
    pub const NAMES: [&'static str; 3] = ["none", "random_single", "all_rotations"];

    pub fn items_per_sample(self) -> usize {
        match self {
            Augmentation::None => 1,
            Augmentation::RandomSingle => 2,
            Augmentation::AllRotations => 4,
        }
    }

    /// Whether training reads the rotation head.
    pub fn uses_rotation_head(self) -> bool {
        self != Augmentation::None
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = match self {
            Augmentation::None => 0,
            Augmentation::RandomSingle => 1,
            Augmentation::AllRotations => 2,
        };
        f.write_str(Self::NAMES[i])
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augmentation::None),
            "random_single" => Ok(Augmentation::RandomSingle),
            "all_rotations" => Ok(Augmentation::AllRotations),
            other => Err(Error::Config(format!(
                "unknown augmentation {other:?} (expected one of {:?})",
                Self::NAMES
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_epochs: usize,
    pub incremental_epochs: usize,
    /// Incremental epoch after which samples are scored and pruned.
    pub prune_at_epoch: usize,
    pub keep_ratio: f64,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub lr_decay_factor: f64,
    /// Decay period in epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Number of end-of-epoch scoring passes averaged before pruning.
    pub score_window: usize,
    /// Cap on the joint gradient norm of each step; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_epochs: 100,
            incremental_epochs: 60,
            prune_at_epoch: 20,
            keep_ratio: 0.3,
            lr_initial: 0.001,
            lr_incremental: 0.0002,
            lr_decay_factor: 0.1,
            lr_decay_every: 45,
            batch_size: 64,
            gamma: 10.0,
            lambda: 10.0,
            seed: 0,
            augmentation: Augmentation::RandomSingle,
            score_window: 1,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.incremental_epochs > 0 && self.prune_at_epoch >= self.incremental_epochs {
            return bad(format!(
                "prune_at_epoch ({}) must be < incremental_epochs ({})",
                self.prune_at_epoch, self.incremental_epochs
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(format!("keep_ratio {} not in (0, 1]", self.keep_ratio));
        }
        for (name, lr) in [
            ("lr_initial", self.lr_initial),
            ("lr_incremental", self.lr_incremental),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a positive number, got {lr}"));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor {} not in (0, 1]", self.lr_decay_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, w) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {w}"));
            }
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if self.score_window == 0 || self.score_window > self.prune_at_epoch + 1 {
            return bad(format!(
                "score_window {} must be in 1..={}",
                self.score_window,
                self.prune_at_epoch + 1
            ));
        }
        Ok(())
    }

    /// Step-decayed learning rate for zero-based `epoch`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return base;
        }
        base * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Images `[c,h,w]` with class-head labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl TrainData {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|x| x.shape() != first.shape()) {
                return Err(Error::Data(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    images[i].shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Sample indices per label, ascending.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            out.entry(y).or_default().push(i);
        }
        out
    }
}

/// Rotates `[c,n,n]` by `quarter_turns` × 90° counter-clockwise.
pub fn rotate90(image: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "rotate90",
            format!("expected [c,h,w], got {:?}", image.shape()),
        ));
    };
    if h != w {
        return Err(Error::shape("rotate90", format!("image is {h}x{w}, not square")));
    }
    let n = h;
    let mut cur = image.data().to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for ch in 0..c {
            let plane = &cur[ch * n * n..(ch + 1) * n * n];
            let out = &mut next[ch * n * n..(ch + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = plane[j * n + (n - 1 - i)];
                }
            }
        }
        cur = next;
    }
    Tensor::new(image.shape(), cur)
}

/// One rotated copy at a uniformly drawn quarter turn in {1,2,3}, labelled
/// `label_count · turns + label`.
pub fn augment_random_rotation(
    image: &Tensor,
    label: usize,
    label_count: usize,
    rng: &mut Rng,
) -> Result<(Tensor, usize)> {
    if label >= label_count {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {label_count} classes"
        )));
    }
    let turns = rng.random_range(1..=3usize);
    Ok((rotate90(image, turns)?, label_count * turns + label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    /// Index of the source sample.
    pub sample: usize,
    /// Quarter turns applied (0 = original).
    pub turns: usize,
    pub image: Tensor,
    pub label: usize,
}

/// The original plus the rotated copies required by `mode`.
pub fn training_items(
    sample: usize,
    image: &Tensor,
    label: usize,
    label_count: usize,
    mode: Augmentation,
    rng: &mut Rng,
) -> Result<Vec<TrainingItem>> {
    let mut items = vec![TrainingItem {
        sample,
        turns: 0,
        image: image.clone(),
        label,
    }];
    match mode {
        Augmentation::None => {}
        Augmentation::RandomSingle => {
            let (rotated, aug_label) = augment_random_rotation(image, label, label_count, rng)?;
            items.push(TrainingItem {
                sample,
                turns: aug_label / label_count,
                image: rotated,
                label: aug_label,
            });
        }
        Augmentation::AllRotations => {
            for turns in 1..=3 {
                items.push(TrainingItem {
                    sample,
                    turns,
                    image: rotate90(image, turns)?,
                    label: label_count * turns + label,
                });
            }
        }
    }
    Ok(items)
}

/// Cross-entropy of one logit vector.
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    numeric::cross_entropy(logits, label)
}

fn check_teacher(model: &Model, snapshot: &Model) -> Result<()> {
    if !model.same_backbone(snapshot) {
        return Err(Error::InvalidArgument(
            "distillation teacher has a different architecture".into(),
        ));
    }
    Ok(())
}

/// `‖F(x; adapters on) − F_old(x; adapters off)‖₂`.
pub fn loss_kd(model: &Model, snapshot: &Model, x: &Tensor) -> Result<f64> {
    check_teacher(model, snapshot)?;
    let new = model.extract_features(x)?;
    let old = snapshot.features_with(x, false)?;
    numeric::l2_distance(&new, &old)
}

/// `Σ CE(G(p_c), c)` over the store; 0 for an empty store.
pub fn loss_proto(model: &Model, store: &PrototypeStore) -> Result<f64> {
    store.iter().try_fold(0.0, |acc, (id, entry)| {
        let logits = model.classify_features(&entry.as_tensor())?;
        Ok(acc + loss_ce(logits.data(), id as usize)?)
    })
}

/// Objective terms recorded on a tape.
#[derive(Debug, Clone)]
pub struct ObjectiveVars {
    pub ce: Var,
    pub kd: Option<Var>,
    pub proto: Option<Var>,
    pub total: Var,
    /// Training logits per item.
    pub logits: Vec<Var>,
}

/// Term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub kd: f64,
    pub proto: f64,
    pub total: f64,
}

/// Records the batch objective. `teacher` holds the old model's feature
/// vector for each item; `None` drops the distillation term.
#[allow(clippy::too_many_arguments)]
pub fn record_objective(
    tape: &mut Tape<'_>,
    model: &Model,
    vars: &ModelVars,
    items: &[TrainingItem],
    teacher: Option<&[Tensor]>,
    store: Option<&PrototypeStore>,
    gamma: f64,
    lambda: f64,
    rotation_head: bool,
) -> Result<ObjectiveVars> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if let Some(t) = teacher {
        if t.len() != items.len() {
            return Err(Error::shape(
                "record_objective",
                format!("{} teacher features for {} items", t.len(), items.len()),
            ));
        }
    }
    let adapters = model.has_adapters();
    let inv_n = 1.0 / items.len() as f64;
    let mut ces = Vec::with_capacity(items.len());
    let mut kds = Vec::new();
    let mut logits = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let x = tape.input(item.image.clone())?;
        let f = model.features_on(tape, vars, x, adapters)?;
        let z = if rotation_head {
            model.rotation_logits_on(tape, vars, f)?
        } else {
            model.logits_on(tape, vars, f)?
        };
        ces.push(tape.cross_entropy(z, item.label)?);
        logits.push(z);
        if let Some(t) = teacher {
            let old = tape.constant(t[i].clone())?;
            kds.push(tape.l2_distance(f, old)?);
        }
    }
    let ce_sum = tape.add_all(&ces)?;
    let ce = tape.scale(ce_sum, inv_n)?;
    let mut terms = vec![ce];

    let kd = if kds.is_empty() {
        None
    } else {
        let s = tape.add_all(&kds)?;
        let kd = tape.scale(s, inv_n)?;
        terms.push(tape.scale(kd, gamma)?);
        Some(kd)
    };

    let proto = match store.filter(|s| !s.is_empty()) {
        None => None,
        Some(store) => {
            let mut parts = Vec::with_capacity(store.len());
            for (id, entry) in store.iter() {
                let p = tape.constant(entry.as_tensor())?;
                let z = model.logits_on(tape, vars, p)?;
                parts.push(tape.cross_entropy(z, id as usize)?);
            }
            let proto = tape.add_all(&parts)?;
            terms.push(tape.scale(proto, lambda)?);
            Some(proto)
        }
    };
    let total = tape.add_all(&terms)?;
    Ok(ObjectiveVars {
        ce,
        kd,
        proto,
        total,
        logits,
    })
}

fn read_parts(tape: &Tape<'_>, obj: &ObjectiveVars) -> LossParts {
    LossParts {
        ce: tape.value(obj.ce).item(),
        kd: obj.kd.map_or(0.0, |v| tape.value(v).item()),
        proto: obj.proto.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(obj.total).item(),
    }
}

/// Evaluates `L_ce + γ·L_kd + λ·L_proto` for a batch without training.
pub fn total_loss(
    model: &Model,
    snapshot: &Model,
    store: &PrototypeStore,
    items: &[TrainingItem],
    config: &TrainConfig,
) -> Result<LossParts> {
    check_teacher(model, snapshot)?;
    let teacher = items
        .iter()
        .map(|it| snapshot.features_with(&it.image, false))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let obj = record_objective(
        &mut tape,
        model,
        &vars,
        items,
        Some(&teacher),
        Some(store),
        config.gamma,
        config.lambda,
        config.augmentation.uses_rotation_head(),
    )?;
    Ok(read_parts(&tape, &obj))
}

/// Top-1 accuracy of the class head.
pub fn accuracy(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Data(format!(
            "accuracy needs matching non-empty inputs ({} images, {} labels)",
            images.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (x, &y) in images.iter().zip(labels) {
        if model.classify(x)?.argmax() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub phase: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: LossParts,
    pub acc: f64,
}

pub const LOG_HEADER: &str = "phase,epoch,split,loss_ce,loss_kd,loss_proto,loss_total,acc";

pub fn format_log(rows: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
            r.phase, r.epoch, r.split, r.loss.ce, r.loss.kd, r.loss.proto, r.loss.total, r.acc
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn write_log_csv(rows: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_log(rows))?;
    Ok(())
}

/// Old-model features keyed by (sample, quarter turns).
#[derive(Default)]
struct TeacherCache {
    features: HashMap<(usize, usize), Tensor>,
}

impl TeacherCache {
    fn lookup(&mut self, snapshot: &Model, items: &[TrainingItem]) -> Result<Vec<Tensor>> {
        items
            .iter()
            .map(|it| {
                if let Some(f) = self.features.get(&(it.sample, it.turns)) {
                    return Ok(f.clone());
                }
                let f = snapshot.features_with(&it.image, false)?;
                self.features.insert((it.sample, it.turns), f.clone());
                Ok(f)
            })
            .collect()
    }
}

struct EpochContext<'c> {
    phase: usize,
    lr: f64,
    teacher: Option<(&'c Model, &'c mut TeacherCache)>,
    store: Option<&'c PrototypeStore>,
}

/// Runs one epoch over `order`; returns the log line and the step count.
fn run_epoch(
    model: &mut Model,
    data: &TrainData,
    order: &[usize],
    config: &TrainConfig,
    ctx: &mut EpochContext<'_>,
    epoch: usize,
    rng: &mut Rng,
) -> Result<(EpochLog, usize)> {
    let label_count = model.num_classes();
    let wide = config.augmentation.uses_rotation_head();
    let mut sums = LossParts::default();
    let (mut correct, mut seen, mut steps) = (0usize, 0usize, 0usize);
    for batch in order.chunks(config.batch_size) {
        let mut items = Vec::with_capacity(batch.len() * config.augmentation.items_per_sample());
        for &i in batch {
            items.extend(training_items(
                i,
                &data.images[i],
                data.labels[i],
                label_count,
                config.augmentation,
                rng,
            )?);
        }
        let teacher = match &mut ctx.teacher {
            Some((snapshot, cache)) => Some(cache.lookup(snapshot, &items)?),
            None => None,
        };
        let (grads, vars, parts) = {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape)?;
            let obj = record_objective(
                &mut tape,
                model,
                &vars,
                &items,
                teacher.as_deref(),
                ctx.store,
                config.gamma,
                config.lambda,
                wide,
            )?;
            for (z, it) in obj.logits.iter().zip(&items) {
                correct += usize::from(argmax(tape.value(*z).data()) == it.label);
            }
            (tape.backward(obj.total)?, vars, read_parts(&tape, &obj))
        };
        model.attach_gradients(&vars, &grads)?;
        if config.grad_clip > 0.0 {
            clip_grad_norm(model.params_mut(), config.grad_clip)?;
        }
        sgd_step(model.params_mut(), ctx.lr)?;
        zero_grad(model.params_mut());

        seen += items.len();
        steps += 1;
        let w = batch.len() as f64;
        sums.ce += parts.ce * w;
        sums.kd += parts.kd * w;
        sums.proto += parts.proto * w;
        sums.total += parts.total * w;
    }
    let n = order.len().max(1) as f64;
    let loss = LossParts {
        ce: sums.ce / n,
        kd: sums.kd / n,
        proto: sums.proto / n,
        total: sums.total / n,
    };
    let log = EpochLog {
        phase: ctx.phase,
        epoch,
        split: "train".into(),
        loss,
        acc: correct as f64 / seen.max(1) as f64,
    };
    Ok((log, steps))
}

fn check_labels(data: &TrainData, range: std::ops::Range<usize>) -> Result<()> {
    if let Some(&y) = data.labels.iter().find(|y| !range.contains(y)) {
        return Err(Error::Data(format!(
            "label {y} outside the trainable class range {range:?}"
        )));
    }
    Ok(())
}

fn phase_rng(seed: u64, phase: usize) -> Rng {
    seeded_rng(seed ^ (phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains every parameter with cross-entropy alone. Returns the number
/// of optimizer steps taken.
pub fn train_initial(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    log: &mut Vec<EpochLog>,
) -> Result<usize> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("initial training set is empty".into()));
    }
    if model.has_adapters() {
        return Err(Error::Adapter(
            "initial training expects a model without adapters".into(),
        ));
    }
    check_labels(data, 0..model.num_classes())?;
    model.unfreeze_all();
    let mut rng = phase_rng(config.seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    for epoch in 0..config.initial_epochs {
        order.shuffle(&mut rng);
        let mut ctx = EpochContext {
            phase: 0,
            lr: config.lr_at(config.lr_initial, epoch),
            teacher: None,
            store: None,
        };
        let (line, n) = run_epoch(model, data, &order, config, &mut ctx, epoch + 1, &mut rng)?;
        log.push(line);
        steps += n;
    }
    Ok(steps)
}

/// Adds one prototype per class in `indices`, computed from `model`
/// features of those samples.
pub fn build_prototypes(
    model: &Model,
    data: &TrainData,
    indices: &[usize],
    store: &mut PrototypeStore,
) -> Result<()> {
    let mut groups: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for &i in indices {
        groups
            .entry(data.labels[i])
            .or_default()
            .push(model.extract_features(&data.images[i])?);
    }
    for (class, feats) in groups {
        let p = compute_prototype(&feats)?;
        store.add_class(class as u32, &p, feats.len() as u32)?;
    }
    Ok(())
}

/// Result of checking the zero-adapter identity on a probe batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityProbe {
    pub max_kd: f64,
    pub old_logits_bit_equal: bool,
}

/// Models and memory carried through one incremental phase.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub phase_index: usize,
    /// Frozen copy of the model at phase start.
    pub snapshot: Model,
    /// Live model: adapters spawned, heads expanded.
    pub model: Model,
    pub store: PrototypeStore,
    /// Samples kept after pruning, once decided.
    pub retained: Option<Vec<usize>>,
    old_classes: usize,
}

impl PhaseState {
    /// Captures the teacher, spawns zero adapters and adds `new_classes`
    /// zero rows to the heads.
    pub fn begin(
        phase_index: usize,
        mut model: Model,
        store: PrototypeStore,
        new_classes: usize,
    ) -> Result<Self> {
        if store.feature_dim() != model.feature_dim() {
            return Err(Error::Prototype(format!(
                "store holds {}-d prototypes, model produces {}-d features",
                store.feature_dim(),
                model.feature_dim()
            )));
        }
        let mut snapshot = model.clone();
        snapshot.params_mut().into_iter().for_each(|p| {
            p.requires_grad = false;
            p.grad = None;
        });
        let old_classes = model.num_classes();
        model.spawn_adapters()?;
        model.expand_classifier(new_classes)?;
        Ok(Self {
            phase_index,
            snapshot,
            model,
            store,
            retained: None,
            old_classes,
        })
    }

    pub fn old_classes(&self) -> usize {
        self.old_classes
    }

    /// Distillation loss and old-class logits against the snapshot.
    pub fn identity_probe(&self, probe: &[Tensor]) -> Result<IdentityProbe> {
        let mut max_kd: f64 = 0.0;
        let mut equal = true;
        for x in probe {
            max_kd = max_kd.max(loss_kd(&self.model, &self.snapshot, x)?);
            let new = self.model.classify(x)?;
            let old = self.snapshot.classify(x)?;
            equal &= new.data()[..self.old_classes]
                .iter()
                .zip(old.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
        Ok(IdentityProbe {
            max_kd,
            old_logits_bit_equal: equal,
        })
    }

    pub fn into_parts(self) -> (Model, PrototypeStore) {
        (self.model, self.store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub steps: usize,
    pub retained: Vec<usize>,
    /// Scores used for pruning (empty when no pruning happened).
    pub records: Vec<El2nRecord>,
}

/// Trains adapters and heads on the new classes, prunes at
/// `prune_at_epoch`, fuses the adapters and stores prototypes of the new
/// classes computed from the retained samples.
pub fn train_incremental_phase(
    state: &mut PhaseState,
    data: &TrainData,
    config: &TrainConfig,
    log: &mut Vec<EpochLog>,
) -> Result<PhaseReport> {
    config.validate()?;
    if !state.model.has_adapters() {
        return Err(Error::Adapter("incremental phase needs live adapters".into()));
    }
    if data.is_empty() {
        return Err(Error::Data(format!(
            "phase {} has no training data",
            state.phase_index
        )));
    }
    let new_range = state.old_classes..state.model.num_classes();
    check_labels(data, new_range.clone())?;
    let classes = data.by_class();
    if let Some(c) = new_range.clone().find(|c| !classes.contains_key(c)) {
        return Err(Error::Data(format!("new class {c} has no training samples")));
    }

    let mut rng = phase_rng(config.seed, state.phase_index);
    let mut cache = TeacherCache::default();
    let all: Vec<usize> = (0..data.len()).collect();
    let epochs = config.incremental_epochs;
    let prune = epochs > 0;
    let window_start = (config.prune_at_epoch + 1).saturating_sub(config.score_window);
    let mut passes = Vec::new();
    let mut records = Vec::new();
    let mut steps = 0;

    let score = |model: &Model, epoch: usize, passes: &mut Vec<Vec<El2nRecord>>| -> Result<()> {
        if prune && (window_start..=config.prune_at_epoch).contains(&epoch) {
            passes.push(score_dataset(model, data.images(), data.labels(), epoch)?);
        }
        Ok(())
    };
    score(&state.model, 0, &mut passes)?;
    if prune && config.prune_at_epoch == 0 {
        records = average_scores(&passes)?;
        state.retained = Some(select_retained(&records, config.keep_ratio, true)?);
    }
    for epoch in 1..=epochs {
        let mut order = state.retained.clone().unwrap_or_else(|| all.clone());
        order.shuffle(&mut rng);
        let mut ctx = EpochContext {
            phase: state.phase_index,
            lr: config.lr_at(config.lr_incremental, epoch - 1),
            teacher: Some((&state.snapshot, &mut cache)),
            store: Some(&state.store),
        };
        let (line, n) = run_epoch(&mut state.model, data, &order, config, &mut ctx, epoch, &mut rng)?;
        log.push(line);
        steps += n;
        score(&state.model, epoch, &mut passes)?;
        if prune && epoch == config.prune_at_epoch {
            records = average_scores(&passes)?;
            state.retained = Some(select_retained(&records, config.keep_ratio, true)?);
        }
    }

    state.model.fuse_adapters()?;
    let retained = state.retained.clone().unwrap_or(all);
    build_prototypes(&state.model, data, &retained, &mut state.store)?;
    Ok(PhaseReport {
        steps,
        retained,
        records,
    })
}
