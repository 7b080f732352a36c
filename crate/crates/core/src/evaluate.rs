//! Downstream evaluation of frozen audio encoders: sub-clip protocols,
//! shallow classifiers and ranking metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{self, MixupConfig, ShiftConfig};
use crate::diffmath::{BatchNormStats, Tape, Tensor};
use crate::dsp::{LogMelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::math;
use crate::modality::Modality;
use crate::model::{self, ModelConfig, ModelParams};
use crate::rng::{rng_for, stream, Rng};
use crate::trainer::{adam_step, lr_at_step, AdamConfig, BatchMap, OptimState, Schedule};

// ---------------------------------------------------------------- metrics

/// Average precision with the step definition: the mean, over positives, of
/// precision at that positive's rank. Scores are ranked in descending order;
/// equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann–Whitney U via midranks).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives keeps midranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let p64 = p as u64;
    let twice_u = twice_rank_sum - p64 * (p64 + 1);
    Ok(twice_u as f64 / 2.0 / (p * n) as f64)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::LabelMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateInput("NaN score".into()));
    }
    Ok(())
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

// AS241 coefficients, lowest order first
const A: [f64; 8] = [
    3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
    45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727,
];
const B: [f64; 8] = [
    1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077, 21213.794301586595867,
    39307.89580009271061, 28729.085735721942674, 5226.495278852545925,
];
const C: [f64; 8] = [
    1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
    1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4,
];
const D: [f64; 8] = [
    1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455, 0.14810397642748007459,
    0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9,
];
const E: [f64; 8] = [
    6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
    0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7,
];
const F: [f64; 8] = [
    1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525, 7.868691311456132591e-4,
    1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15,
];

/// Standard normal quantile (Wichura's AS241, PPND16).
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * horner(&A, r) / horner(&B, r);
    }
    let r = math::sqrt(-math::ln(if q < 0.0 { p } else { 1.0 - p }));
    let x = if r <= 5.0 {
        horner(&C, r - 1.6) / horner(&D, r - 1.6)
    } else {
        horner(&E, r - 5.0) / horner(&F, r - 5.0)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// `√2 · Φ⁻¹(auc)`.
pub fn d_prime(auc: f64) -> Result<f64> {
    if !(auc > 0.0 && auc < 1.0) {
        return Err(Error::InfiniteDPrime(auc));
    }
    Ok(core::f64::consts::SQRT_2 * norm_ppf(auc))
}

// ---------------------------------------------------------------- sub-clips

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubclipProtocol {
    /// Ten equal, abutting windows of `clip_len / 10`.
    TensecBy3s,
    /// `floor(clip_len)` abutting one-second windows; the tail is dropped.
    Nonoverlap1s,
}

impl SubclipProtocol {
    pub fn window_len(self, clip_len: f64) -> f64 {
        match self {
            SubclipProtocol::TensecBy3s => clip_len / 10.0,
            SubclipProtocol::Nonoverlap1s => 1.0,
        }
    }
}

/// `(start, length)` windows in seconds.
pub fn subclip_split(clip_len: f64, protocol: SubclipProtocol) -> Result<Vec<(f64, f64)>> {
    if !(clip_len > 0.0 && clip_len.is_finite()) {
        return Err(Error::InvalidLength(format!("clip of {clip_len} s")));
    }
    match protocol {
        SubclipProtocol::TensecBy3s => {
            let w = clip_len / 10.0;
            Ok((0..10).map(|i| (i as f64 * w, w)).collect())
        }
        SubclipProtocol::Nonoverlap1s => {
            let n = math::floor(clip_len + 1e-9) as usize;
            if n == 0 {
                return Err(Error::InvalidLength(format!("clip of {clip_len} s shorter than one 1 s window")));
            }
            Ok((0..n).map(|i| (i as f64, 1.0)).collect())
        }
    }
}

/// Arithmetic mean of per-sub-clip logits.
pub fn average_logits(per_subclip: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_subclip.first().ok_or_else(|| Error::InvalidLength("no sub-clips".into()))?;
    let mut out = vec![0.0; first.len()];
    for l in per_subclip {
        if l.len() != out.len() {
            return Err(Error::InvalidShape(format!("logit widths {} and {}", out.len(), l.len())));
        }
        for (o, v) in out.iter_mut().zip(l) {
            *o += v;
        }
    }
    let n = per_subclip.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

// ---------------------------------------------------------------- features

/// Frozen encoder plus the front end needed to turn audio into its input.
pub struct FrozenEncoder<'a> {
    pub params: &'a ModelParams,
    pub model: &'a ModelConfig,
    pub frontend: &'a LogMelFrontend,
    pub modality: Modality,
}

impl<'a> FrozenEncoder<'a> {
    pub fn new(params: &'a ModelParams, model: &'a ModelConfig, frontend: &'a LogMelFrontend, modality: Modality) -> Result<Self> {
        if modality == Modality::V {
            return Err(Error::UnsupportedModality(
                "the video network is only used during pretraining; pick S or W".into(),
            ));
        }
        Ok(Self { params, model, frontend, modality })
    }

    /// Raw encoder input for a waveform window.
    pub fn input(&self, w: &Waveform) -> Result<Tensor> {
        match self.modality {
            Modality::S => Ok(self.frontend.compute(w)?.to_tensor()),
            _ => Ok(w.to_tensor()),
        }
    }

    /// `h` for a raw input (pre-projector representation).
    pub fn features_of_input(&self, raw: &Tensor) -> Result<Tensor> {
        model::encode(self.modality, raw, self.params, self.model)
    }

    pub fn features(&self, w: &Waveform) -> Result<Tensor> {
        self.features_of_input(&self.input(w)?)
    }
}

/// One `h` per sub-clip window of a clip.
pub fn extract_frozen_features(enc: &FrozenEncoder<'_>, clip: &Waveform, protocol: SubclipProtocol) -> Result<Vec<Tensor>> {
    subclip_split(clip.duration(), protocol)?
        .into_iter()
        .map(|(start, len)| enc.features(&clip.slice_seconds(start, len)?))
        .collect()
}

// ---------------------------------------------------------------- classifiers

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub hidden: usize,
    pub num_classes: usize,
    pub multi_label: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Mixup and frequency shift on the inputs at training time. Only
    /// effective when features are computed on the fly.
    pub augment: bool,
    /// Class-balanced sampling (multi-label data).
    #[serde(default)]
    pub class_balanced: bool,
    /// Standardize features with training-set statistics before a linear
    /// head.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Cosine learning-rate decay to zero over training.
    #[serde(default = "yes")]
    pub cosine: bool,
}

fn yes() -> bool {
    true
}

impl ClassifierConfig {
    /// BN → 512 → BN → ReLU → linear head, trained with augmentation.
    pub fn mlp(num_classes: usize, multi_label: bool) -> Self {
        Self {
            kind: ClassifierKind::Mlp,
            hidden: 512,
            num_classes,
            multi_label,
            lr: 2e-4,
            epochs: 30,
            batch_size: 64,
            augment: true,
            class_balanced: multi_label,
            standardize: false,
            cosine: true,
        }
    }

    /// Linear head on frozen features, no augmentation.
    pub fn linear(num_classes: usize) -> Self {
        Self {
            kind: ClassifierKind::Linear,
            hidden: 0,
            num_classes,
            multi_label: false,
            lr: 2e-4,
            epochs: 30,
            batch_size: 64,
            augment: false,
            class_balanced: false,
            standardize: true,
            cosine: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ClassifierKind::Mlp && self.hidden == 0 {
            return Err(Error::InvalidConfig("mlp classifier needs hidden > 0".into()));
        }
        if self.num_classes < 2 && !self.multi_label {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.num_classes == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("degenerate classifier config {self:?}")));
        }
        if self.kind == ClassifierKind::Mlp && self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch normalization needs batches of at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("classifier lr {}", self.lr)));
        }
        Ok(())
    }
}

/// A trained shallow head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ModelParams,
    /// Feature standardization (linear head): mean and 1/std per dim.
    pub standardization: Option<(Vec<f64>, Vec<f64>)>,
    /// Running statistics of the two normalizations (MLP head).
    pub norms: Option<(BatchNormStats, BatchNormStats)>,
}

impl Classifier {
    fn standardized(&self, x: &Tensor) -> Result<Tensor> {
        match &self.standardization {
            None => Ok(x.clone()),
            Some((mean, inv)) => {
                let d = mean.len();
                if x.shape().last() != Some(&d) {
                    return Err(Error::InvalidShape(format!("features {:?} vs width {d}", x.shape())));
                }
                let mut v = x.to_vec();
                for row in v.chunks_exact_mut(d) {
                    for j in 0..d {
                        row[j] = (row[j] - mean[j]) * inv[j];
                    }
                }
                Tensor::new(x.shape().to_vec(), v)
            }
        }
    }

    /// Inference-mode logits for features `[N, D]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.standardized(x)?;
        let p = &self.params;
        match self.config.kind {
            ClassifierKind::Linear => {
                let mut t = Tape::new();
                let xv = t.constant(x);
                let (w, b) = (t.constant(p.get("fc.w")?.clone()), t.constant(p.get("fc.b")?.clone()));
                let y = t.linear_rows(xv, w, b)?;
                Ok(t.value(y).clone())
            }
            ClassifierKind::Mlp => {
                let (n0, n1) = self.norms.as_ref().ok_or_else(|| Error::InvalidConfig("mlp without norms".into()))?;
                let a = n0.apply(&x, p.get("bn0.gamma")?, p.get("bn0.beta")?)?;
                let mut t = Tape::new();
                let av = t.constant(a);
                let (w1, b1) = (t.constant(p.get("fc1.w")?.clone()), t.constant(p.get("fc1.b")?.clone()));
                let h = t.linear_rows(av, w1, b1)?;
                let hn = n1.apply(t.value(h), p.get("bn1.gamma")?, p.get("bn1.beta")?)?;
                let mut t2 = Tape::new();
                let hv = t2.constant(hn);
                let r = t2.relu(hv);
                let (w2, b2) = (t2.constant(p.get("fc2.w")?.clone()), t2.constant(p.get("fc2.b")?.clone()));
                let y = t2.linear_rows(r, w2, b2)?;
                Ok(t2.value(y).clone())
            }
        }
    }

    pub fn logits_one(&self, x: &Tensor) -> Result<Vec<f64>> {
        let d = x.numel();
        Ok(self.logits(&x.reshape(vec![1, d])?)?.to_vec())
    }
}

/// Where classifier training examples come from.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Features of example `i`; with a partner, the inputs are mixed
    /// `α·x_i + (1-α)·x_j` before encoding. `rng` drives crop and shift.
    fn features(&self, i: usize, partner: Option<(usize, f64)>, rng: &mut Rng) -> Result<Tensor>;
    /// Whether the source can apply input augmentation.
    fn augments(&self) -> bool;
}

/// Precomputed features; no augmentation possible.
pub struct CachedFeatures<'a> {
    pub features: &'a [Tensor],
}

impl FeatureSource for CachedFeatures<'_> {
    fn len(&self) -> usize {
        self.features.len()
    }
    fn features(&self, i: usize, _partner: Option<(usize, f64)>, _rng: &mut Rng) -> Result<Tensor> {
        Ok(self.features[i].clone())
    }
    fn augments(&self) -> bool {
        false
    }
}

/// Random training windows encoded on the fly, with frequency shift on
/// spectrograms and input mixing.
pub struct OnTheFly<'a> {
    pub encoder: &'a FrozenEncoder<'a>,
    pub clips: &'a [Waveform],
    pub window: f64,
    pub shift: ShiftConfig,
}

impl OnTheFly<'_> {
    fn raw(&self, i: usize, rng: &mut Rng) -> Result<Tensor> {
        let clip = &self.clips[i];
        let slack = clip.duration() - self.window;
        if slack < -1e-9 {
            return Err(Error::InvalidLength(format!("clip {i} shorter than the {} s window", self.window)));
        }
        let start = if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 };
        let w = clip.slice_seconds(start, self.window)?;
        match self.encoder.modality {
            Modality::S => {
                let s = self.encoder.frontend.compute(&w)?;
                let k = augment::sample_shift(&self.shift, rng);
                Ok(augment::freq_shift(&s, k)?.to_tensor())
            }
            _ => Ok(w.to_tensor()),
        }
    }
}

impl FeatureSource for OnTheFly<'_> {
    fn len(&self) -> usize {
        self.clips.len()
    }
    fn features(&self, i: usize, partner: Option<(usize, f64)>, rng: &mut Rng) -> Result<Tensor> {
        let x = self.raw(i, rng)?;
        let x = match partner {
            Some((j, alpha)) => augment::mixup(&x, &self.raw(j, rng)?, alpha)?,
            None => x,
        };
        self.encoder.features_of_input(&x)
    }
    fn augments(&self) -> bool {
        true
    }
}

/// Picks a class uniformly, then a uniformly random positive of it.
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl ClassBalancedSampler {
    pub fn new(labels: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, ls) in labels.iter().enumerate() {
            for &c in ls {
                by_class.get_mut(c).ok_or_else(|| Error::LabelMismatch(format!("label {c} >= {num_classes}")))?.push(i);
            }
        }
        by_class.retain(|v| !v.is_empty());
        if by_class.is_empty() {
            return Err(Error::LabelMismatch("no positives for any class".into()));
        }
        Ok(Self { by_class })
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let members = &self.by_class[rng.random_range(0..self.by_class.len())];
        members[rng.random_range(0..members.len())]
    }
}

fn targets_row(labels: &[usize], c: usize) -> Vec<f64> {
    let mut t = vec![0.0; c];
    for &l in labels {
        t[l] = 1.0;
    }
    t
}

fn check_labels(labels: &[Vec<usize>], cfg: &ClassifierConfig) -> Result<()> {
    for (i, ls) in labels.iter().enumerate() {
        if ls.iter().any(|&c| c >= cfg.num_classes) {
            return Err(Error::LabelMismatch(format!("example {i} has a label >= {}", cfg.num_classes)));
        }
        if !cfg.multi_label && ls.len() != 1 {
            return Err(Error::LabelMismatch(format!("example {i} has {} labels in a single-label task", ls.len())));
        }
    }
    Ok(())
}

fn init_head(cfg: &ClassifierConfig, dim: usize, rng: &mut Rng) -> Result<ModelParams> {
    let mut m = BTreeMap::new();
    let mut uniform = |shape: Vec<usize>, fan_in: usize, gain: f64| -> Result<Tensor> {
        let n = shape.iter().product();
        let bound = math::sqrt(3.0 * gain / fan_in as f64);
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
    };
    let c = cfg.num_classes;
    match cfg.kind {
        ClassifierKind::Linear => {
            m.insert("fc.w".into(), uniform(vec![c, dim], dim, 1.0)?);
            m.insert("fc.b".into(), Tensor::zeros(vec![c])?);
        }
        ClassifierKind::Mlp => {
            let h = cfg.hidden;
            m.insert("bn0.gamma".into(), Tensor::full(vec![dim], 1.0)?);
            m.insert("bn0.beta".into(), Tensor::zeros(vec![dim])?);
            m.insert("fc1.w".into(), uniform(vec![h, dim], dim, 1.0)?);
            m.insert("fc1.b".into(), Tensor::zeros(vec![h])?);
            m.insert("bn1.gamma".into(), Tensor::full(vec![h], 1.0)?);
            m.insert("bn1.beta".into(), Tensor::zeros(vec![h])?);
            m.insert("fc2.w".into(), uniform(vec![c, h], h, 1.0)?);
            m.insert("fc2.b".into(), Tensor::zeros(vec![c])?);
        }
    }
    ModelParams::from_map(m)
}

/// How classifier inputs were produced during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    None,
    OnTheFly,
    /// Augmentation was requested but features were cached.
    DisabledCached,
}

/// Trains a shallow head with Adam on features from `source`.
pub fn train_downstream<S: FeatureSource, M: BatchMap>(
    source: &S,
    labels: &[Vec<usize>],
    cfg: &ClassifierConfig,
    mixup: &MixupConfig,
    seed: u64,
    mapper: &M,
) -> Result<(Classifier, AugmentationMode)> {
    cfg.validate()?;
    let n = source.len();
    if n != labels.len() || n == 0 {
        return Err(Error::LabelMismatch(format!("{n} examples for {} labels", labels.len())));
    }
    check_labels(labels, cfg)?;
    let mode = match (cfg.augment, source.augments()) {
        (false, _) => AugmentationMode::None,
        (true, true) => AugmentationMode::OnTheFly,
        (true, false) => AugmentationMode::DisabledCached,
    };
    let c = cfg.num_classes;
    let mut rng = rng_for(&[seed, stream::DOWNSTREAM]);

    let probe = source.features(0, None, &mut rng_for(&[seed, stream::DOWNSTREAM, 0]))?;
    let dim = probe.numel();
    let standardization = if cfg.kind == ClassifierKind::Linear && cfg.standardize {
        let feats = mapper.map(n, |i| source.features(i, None, &mut rng_for(&[seed, stream::DOWNSTREAM, 1, i as u64])))?;
        let mut mean = vec![0.0; dim];
        for f in &feats {
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; dim];
        for f in &feats {
            for ((s, v), m) in var.iter_mut().zip(f.data()).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let inv = var.iter().map(|v| 1.0 / math::sqrt(v + 1e-8)).collect();
        Some((mean, inv))
    } else {
        None
    };

    let mut clf = Classifier {
        config: cfg.clone(),
        params: init_head(cfg, dim, &mut rng)?,
        standardization,
        norms: (cfg.kind == ClassifierKind::Mlp).then(|| (BatchNormStats::new(dim), BatchNormStats::new(cfg.hidden))),
    };
    let mut optim = OptimState::new(&clf.params, AdamConfig::default());
    let balanced = if cfg.class_balanced { Some(ClassBalancedSampler::new(labels, c)?) } else { None };
    let batch = cfg.batch_size.min(n).max(if cfg.kind == ClassifierKind::Mlp { 2 } else { 1 });
    let steps_per_epoch = n.div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let schedule = Schedule { warmup_steps: 0, total_steps: total, peak_lr: cfg.lr };

    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk_start in (0..n).step_by(batch) {
            let mut idx: Vec<usize> = match &balanced {
                Some(s) => (0..batch).map(|_| s.sample(&mut rng)).collect(),
                None => order[chunk_start..(chunk_start + batch).min(n)].to_vec(),
            };
            if idx.len() < 2 && cfg.kind == ClassifierKind::Mlp {
                idx.push(order[0]);
            }
            let mixing: Vec<Option<(usize, f64)>> = idx
                .iter()
                .map(|_| {
                    if mode == AugmentationMode::OnTheFly {
                        let j = rng.random_range(0..n);
                        augment::sample_mixing_ratio(mixup, &mut rng).map(|a| Some((j, a)))
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?;
            let feats = mapper.map(idx.len(), |k| {
                let mut r = rng_for(&[seed, stream::DOWNSTREAM, 2, step, k as u64]);
                source.features(idx[k], mixing[k], &mut r)
            })?;
            let b = idx.len();
            let mut xdata = Vec::with_capacity(b * dim);
            let mut tdata = Vec::with_capacity(b * c);
            for (k, f) in feats.iter().enumerate() {
                if f.numel() != dim {
                    return Err(Error::InvalidShape(format!("feature width {} vs {dim}", f.numel())));
                }
                xdata.extend_from_slice(f.data());
                let mut t = targets_row(&labels[idx[k]], c);
                if let Some((j, a)) = mixing[k] {
                    let tj = targets_row(&labels[j], c);
                    t.iter_mut().zip(&tj).for_each(|(x, y)| *x = a * *x + (1.0 - a) * y);
                }
                tdata.extend(t);
            }
            let x = clf.standardized(&Tensor::new(vec![b, dim], xdata)?)?;
            let targets = Tensor::new(vec![b, c], tdata)?;

            let mut tape = Tape::new();
            let pv: BTreeMap<String, _> =
                clf.params.iter().map(|(k, t)| (k.clone(), tape.param(k.clone(), t.clone()))).collect();
            let xv = tape.constant(x);
            let mut pre_norm = Vec::new();
            let logits = match cfg.kind {
                ClassifierKind::Linear => tape.linear_rows(xv, pv["fc.w"], pv["fc.b"])?,
                ClassifierKind::Mlp => {
                    pre_norm.push(tape.value(xv).clone());
                    let a = tape.batch_norm_train(xv, pv["bn0.gamma"], pv["bn0.beta"], 1e-5)?;
                    let h = tape.linear_rows(a, pv["fc1.w"], pv["fc1.b"])?;
                    pre_norm.push(tape.value(h).clone());
                    let hn = tape.batch_norm_train(h, pv["bn1.gamma"], pv["bn1.beta"], 1e-5)?;
                    let r = tape.relu(hn);
                    tape.linear_rows(r, pv["fc2.w"], pv["fc2.b"])?
                }
            };
            let loss = if cfg.multi_label {
                tape.sigmoid_bce(logits, targets)?
            } else {
                tape.soft_cross_entropy(logits, targets)?
            };
            let grads = tape.backward(loss)?.into_named();
            let lr = if cfg.cosine { lr_at_step(&schedule, step)? } else { cfg.lr };
            adam_step(&mut clf.params, &grads, &mut optim, lr)?;
            if let Some((n0, n1)) = clf.norms.as_mut() {
                n0.update(&pre_norm[0])?;
                n1.update(&pre_norm[1])?;
            }
            step += 1;
        }
    }
    Ok((clf, mode))
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    pub d_prime: Option<f64>,
    pub accuracy: f64,
    pub num_eval_clips: usize,
    /// Classes without test positives (or negatives), left out of the means.
    pub skipped_classes: Vec<usize>,
    pub augmentation: AugmentationMode,
}

/// Metrics from clip-level scores `[clips][classes]`. Accuracy counts a
/// clip as correct when its top-scoring class is one of its labels.
pub fn compute_metrics(scores: &[Vec<f64>], labels: &[Vec<usize>], num_classes: usize, augmentation: AugmentationMode) -> Result<MetricsReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::LabelMismatch(format!("{} score rows for {} clips", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.len() != num_classes) {
        return Err(Error::InvalidShape("score row width differs from class count".into()));
    }
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let lab: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        match average_precision(&col, &lab) {
            Ok(ap) => per_class_ap.push(Some(ap)),
            Err(Error::UndefinedAp) => {
                per_class_ap.push(None);
                skipped.push(c);
                continue;
            }
            Err(e) => return Err(e),
        }
        match auc(&col, &lab) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedAuc) => skipped.push(c),
            Err(e) => return Err(e),
        }
    }
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    let auc_mean = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    let dp = auc_mean.and_then(|a| d_prime(a).ok());
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| {
            let top = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).unwrap_or(0);
            l.contains(&top)
        })
        .count();
    skipped.sort_unstable();
    skipped.dedup();
    Ok(MetricsReport {
        map,
        per_class_ap,
        auc: auc_mean,
        d_prime: dp,
        accuracy: correct as f64 / scores.len() as f64,
        num_eval_clips: scores.len(),
        skipped_classes: skipped,
        augmentation,
    })
}

/// Everything needed to run one downstream protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub modality: Modality,
    pub protocol: SubclipProtocol,
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub mixup: MixupConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl ProtocolConfig {
    /// Linear head on frozen 1 s sub-clip features.
    pub fn linear(modality: Modality, num_classes: usize, seed: u64) -> Self {
        Self {
            modality,
            protocol: SubclipProtocol::Nonoverlap1s,
            classifier: ClassifierConfig::linear(num_classes),
            mixup: MixupConfig::default(),
            shift: ShiftConfig::default(),
            seed,
        }
    }

    /// MLP head trained with on-the-fly mixing and shifting; ten-way
    /// sub-clip averaging at test time.
    pub fn audioset(modality: Modality, num_classes: usize, seed: u64) -> Self {
        Self {
            modality,
            protocol: SubclipProtocol::TensecBy3s,
            classifier: ClassifierConfig::mlp(num_classes, true),
            mixup: MixupConfig::default(),
            shift: ShiftConfig::default(),
            seed,
        }
    }
}

/// Labeled audio clips.
pub struct LabeledClips<'a> {
    pub clips: &'a [Waveform],
    pub labels: &'a [Vec<usize>],
}

/// Trains the protocol's head on `train` and reports clip-level metrics on
/// `test` (logits averaged over sub-clips).
pub fn run_protocol<M: BatchMap>(
    enc: &FrozenEncoder<'_>,
    cfg: &ProtocolConfig,
    train: &LabeledClips<'_>,
    test: &LabeledClips<'_>,
    mapper: &M,
) -> Result<(Classifier, MetricsReport)> {
    if train.clips.len() != train.labels.len() || test.clips.len() != test.labels.len() {
        return Err(Error::LabelMismatch("clip and label counts differ".into()));
    }
    let (clf, mode) = if cfg.classifier.augment {
        let window = cfg.protocol.window_len(train.clips.first().map_or(1.0, Waveform::duration));
        let src = OnTheFly { encoder: enc, clips: train.clips, window, shift: cfg.shift.clone() };
        train_downstream(&src, train.labels, &cfg.classifier, &cfg.mixup, cfg.seed, mapper)?
    } else {
        let per_clip = mapper.map(train.clips.len(), |i| extract_frozen_features(enc, &train.clips[i], cfg.protocol))?;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (f, l) in per_clip.into_iter().zip(train.labels) {
            for t in f {
                feats.push(t);
                labels.push(l.clone());
            }
        }
        let src = CachedFeatures { features: &feats };
        train_downstream(&src, &labels, &cfg.classifier, &cfg.mixup, cfg.seed, mapper)?
    };
    let scores = mapper.map(test.clips.len(), |i| {
        let feats = extract_frozen_features(enc, &test.clips[i], cfg.protocol)?;
        let logits = feats.iter().map(|f| clf.logits_one(f)).collect::<Result<Vec<_>>>()?;
        average_logits(&logits)
    })?;
    let report = compute_metrics(&scores, test.labels, cfg.classifier.num_classes, mode)?;
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Sequential;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
        // rank of i: items strictly above it, plus equal items earlier in input
        let rank = |i: usize| {
            1 + (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        };
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
        let mut total = 0.0;
        for &i in &pos {
            let r = rank(i);
            let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
            total += hits as f64 / r as f64;
        }
        total / pos.len() as f64
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for i in 0..scores.len() {
            if labels[i] {
                p += 1;
            } else {
                n += 1;
            }
        }
        for i in (0..scores.len()).filter(|&i| labels[i]) {
            for j in (0..scores.len()).filter(|&j| !labels[j]) {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
        twice as f64 / 2.0 / (p * n) as f64
    }

    /// Φ⁻¹ by bisection on the complementary error function.
    fn bisect_ppf(p: f64) -> f64 {
        let cdf = |x: f64| 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2);
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.9, 0.1, 0.5], &[true, false, true]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedAp)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        let mut r = crate::rng::Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = r.random_range(2..40);
            let levels = r.random_range(1..6);
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / 3.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert!((average_precision(&scores, &labels).unwrap() - brute_ap(&scores, &labels)).abs() < 1e-14);
            assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }
    }

    #[test]
    fn metrics_match_brute_force_exhaustively_for_small_inputs() {
        // every labeling and every score pattern over three levels, n <= 6
        for n in 2..=6usize {
            for mask in 1..(1u32 << n) - 1 {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                for code in 0..3usize.pow(n as u32) {
                    let scores: Vec<f64> = (0..n).map(|i| (code / 3usize.pow(i as u32) % 3) as f64).collect();
                    assert!((average_precision(&scores, &labels).unwrap() - brute_ap(&scores, &labels)).abs() < 1e-14);
                    assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
                }
            }
        }
    }

    #[test]
    fn d_prime_values() {
        assert_eq!(d_prime(0.5).unwrap(), 0.0);
        assert!((d_prime(0.958).unwrap() - 2.44).abs() < 0.01);
        assert!((d_prime(0.973).unwrap() - 2.73).abs() < 0.01);
        assert!(matches!(d_prime(1.0), Err(Error::InfiniteDPrime(_))));
        assert!(matches!(d_prime(0.0), Err(Error::InfiniteDPrime(_))));
        for k in 1..2000 {
            let p = k as f64 / 2000.0;
            assert!((norm_ppf(p) - bisect_ppf(p)).abs() < 1e-9, "p={p}");
        }
        // deep lower tail
        for p in [1e-12, 1e-8, 1e-5] {
            assert!((norm_ppf(p) - bisect_ppf(p)).abs() < 1e-9 * norm_ppf(p).abs());
        }
    }

    #[test]
    fn subclip_windows() {
        let w = subclip_split(30.0, SubclipProtocol::TensecBy3s).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|&(_, l)| (l - 3.0).abs() < 1e-12));
        assert!(w.windows(2).all(|p| (p[0].0 + p[0].1 - p[1].0).abs() < 1e-12));
        assert_eq!(subclip_split(2.5, SubclipProtocol::Nonoverlap1s).unwrap(), vec![(0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(subclip_split(1.0, SubclipProtocol::Nonoverlap1s).unwrap().len(), 1);
        assert_eq!(subclip_split(3.0, SubclipProtocol::Nonoverlap1s).unwrap().len(), 3);
        assert!(matches!(subclip_split(0.9, SubclipProtocol::Nonoverlap1s), Err(Error::InvalidLength(_))));
    }

    #[test]
    fn logit_averaging() {
        assert_eq!(average_logits(&[vec![1.0, -2.0]]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(average_logits(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 1.0]);
        let a = average_logits(&[vec![0.5, 1.0], vec![0.25, 3.0], vec![2.0, 0.0]]).unwrap();
        let b = average_logits(&[vec![2.0, 0.0], vec![0.5, 1.0], vec![0.25, 3.0]]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(average_logits(&[]).is_err());
    }

    fn toy(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Vec<usize>>) {
        let mut r = crate::rng::Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            let x = vec![s * 2.0 + r.random_range(-0.5..0.5), r.random_range(-3.0..3.0), 5.0 + r.random_range(-1.0..1.0)];
            feats.push(Tensor::vector(x).unwrap());
            labels.push(vec![c]);
        }
        (feats, labels)
    }

    fn train_accuracy(kind: ClassifierKind) -> f64 {
        let (feats, labels) = toy(200, 3);
        let mut cfg = if kind == ClassifierKind::Linear {
            ClassifierConfig::linear(2)
        } else {
            ClassifierConfig { multi_label: false, class_balanced: false, augment: false, ..ClassifierConfig::mlp(2, false) }
        };
        cfg.lr = 1e-2;
        let src = CachedFeatures { features: &feats };
        let (clf, mode) = train_downstream(&src, &labels, &cfg, &MixupConfig::default(), 1, &Sequential).unwrap();
        assert_eq!(mode, AugmentationMode::None);
        let hits = feats
            .iter()
            .zip(&labels)
            .filter(|(f, l)| {
                let z = clf.logits_one(f).unwrap();
                usize::from(z[1] > z[0]) == l[0]
            })
            .count();
        hits as f64 / feats.len() as f64
    }

    #[test]
    fn separable_toy_features_are_learned() {
        assert!(train_accuracy(ClassifierKind::Linear) >= 0.99);
        assert!(train_accuracy(ClassifierKind::Mlp) >= 0.99);
    }

    #[test]
    fn cached_features_disable_augmentation() {
        let (feats, labels) = toy(20, 1);
        let mut cfg = ClassifierConfig::linear(2);
        cfg.augment = true;
        cfg.epochs = 1;
        let src = CachedFeatures { features: &feats };
        let (_, mode) = train_downstream(&src, &labels, &cfg, &MixupConfig::default(), 1, &Sequential).unwrap();
        assert_eq!(mode, AugmentationMode::DisabledCached);
        assert!(matches!(
            train_downstream(&src, &labels[..19], &cfg, &MixupConfig::default(), 1, &Sequential),
            Err(Error::LabelMismatch(_))
        ));
    }

    #[test]
    fn balanced_sampler_is_uniform_over_classes() {
        // skewed multi-label data: class 0 on 90% of examples
        let mut r = crate::rng::Rng::seed_from_u64(8);
        let labels: Vec<Vec<usize>> = (0..1000)
            .map(|i| {
                let mut l = Vec::new();
                if i % 10 != 0 {
                    l.push(0);
                }
                if i % 7 == 0 {
                    l.push(1);
                }
                if i % 25 == 0 || l.is_empty() {
                    l.push(2);
                }
                l
            })
            .collect();
        let s = ClassBalancedSampler::new(&labels, 3).unwrap();
        // count the class the sampler picked by re-drawing with the same stream
        let draws = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let members_class = r.random_range(0..3);
            let members = &s.by_class[members_class];
            let i = members[r.random_range(0..members.len())];
            assert!(labels[i].contains(&members_class));
            counts[members_class] += 1;
        }
        let expect = draws as f64 / 3.0;
        assert!(counts.iter().all(|&c| (c as f64 - expect).abs() < 0.1 * expect), "{counts:?}");
        // and the public sampler yields positives at the same per-class rate
        let mut r2 = crate::rng::Rng::seed_from_u64(9);
        let mut hits = [0usize; 3];
        for _ in 0..draws {
            let i = s.sample(&mut r2);
            for &c in &labels[i] {
                hits[c] += 1;
            }
        }
        assert!(hits[2] as f64 > 0.3 * draws as f64 && hits[1] as f64 > 0.3 * draws as f64);
    }

    #[test]
    fn metrics_report_fields() {
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0], vec![0.95, 0.4, 0.0], vec![0.1, 0.7, 0.0]];
        let labels = vec![vec![0], vec![1], vec![1], vec![1]];
        let r = compute_metrics(&scores, &labels, 3, AugmentationMode::None).unwrap();
        assert_eq!(r.skipped_classes, vec![2]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.num_eval_clips, 4);
        let a = r.auc.unwrap();
        assert!((r.d_prime.unwrap() - core::f64::consts::SQRT_2 * norm_ppf(a)).abs() < 1e-12);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["mAP", "AUC", "d_prime", "accuracy", "per_class_ap"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn video_features_are_rejected() {
        let cfg = ModelConfig::default();
        let p = model::init_params(&cfg, 1).unwrap();
        let fe = LogMelFrontend::new(&crate::dsp::DspConfig::desk(), 8000).unwrap();
        assert!(matches!(FrozenEncoder::new(&p, &cfg, &fe, Modality::V), Err(Error::UnsupportedModality(_))));
        let enc = FrozenEncoder::new(&p, &cfg, &fe, Modality::S).unwrap();
        let w = Waveform::new((0..24000).map(|i| ((i as f32) * 0.01).sin() * 0.2).collect(), 8000).unwrap();
        let a = extract_frozen_features(&enc, &w, SubclipProtocol::Nonoverlap1s).unwrap();
        let b = extract_frozen_features(&enc, &w, SubclipProtocol::Nonoverlap1s).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
        let wenc = FrozenEncoder::new(&p, &cfg, &fe, Modality::W).unwrap();
        assert_eq!(extract_frozen_features(&wenc, &w, SubclipProtocol::Nonoverlap1s).unwrap().len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn d_prime_monotone_and_odd(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            let (da, db) = (d_prime(a).unwrap(), d_prime(b).unwrap());
            if a < b {
                prop_assert!(da < db);
            }
            prop_assert!((da + d_prime(1.0 - a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ranking_metrics_invariant_to_increasing_transforms(
            raw in proptest::collection::vec((0u8..8, proptest::bool::ANY), 2..12),
        ) {
            let scores: Vec<f64> = raw.iter().map(|p| f64::from(p.0)).collect();
            let mut labels: Vec<bool> = raw.iter().map(|p| p.1).collect();
            labels[0] = true;
            labels[1] = false;
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&warped, &labels).unwrap());
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
            prop_assert!((average_precision(&scores, &labels).unwrap() - brute_ap(&scores, &labels)).abs() < 1e-14);
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }
    }
}
