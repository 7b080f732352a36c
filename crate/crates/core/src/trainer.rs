//! Pretraining: learning-rate schedule, Adam, and the per-step pipeline
//! crop → features → shift/jitter → mixup → encode → project → loss →
//! backward → update.
//!
//! Every sample of a step is processed on its own tape, seeded from
//! `(seed, step, sample)`. The loss is evaluated on the stacked embeddings,
//! its embedding gradients are pushed back through each sample tape, and the
//! per-sample parameter gradients are summed in sample order. The result is
//! therefore independent of how [`BatchMap`] schedules the samples.
//!
//! The loss is a plain sum over the batch, so its gradient (and the useful
//! learning rate) scales with the batch size; `ContrastiveConfig::mean_reduction`
//! divides by the batch size instead.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, VideoClip};
use crate::diffmath::{Tape, Tensor, Var};
use crate::dsp::{DspConfig, LogMelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::math;
use crate::modality::{Modality, ModalitySet, PerModality};
use crate::model::{self, ModelConfig, ModelParams, Part};
use crate::objective::{self, ContrastiveConfig, LossBreakdown};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { warmup_steps: 5000, total_steps: 400_000, peak_lr: 1e-4 }
    }
}

impl Schedule {
    /// 2000 steps with a 10% warmup.
    pub fn desk() -> Self {
        Self { warmup_steps: 200, total_steps: 2000, peak_lr: 1e-3 }
    }

    /// A zero-step schedule is valid and trains nothing.
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("peak_lr {}", self.peak_lr)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup {} must be shorter than the {} total steps",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then half-cosine decay to 0.
pub fn lr_at_step(s: &Schedule, t: u64) -> Result<f64> {
    s.validate()?;
    if t > s.total_steps {
        return Err(Error::InvalidStep { step: t, total: s.total_steps });
    }
    if t < s.warmup_steps {
        return Ok(s.peak_lr * t as f64 / s.warmup_steps as f64);
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    if span == 0.0 {
        return Ok(0.0);
    }
    let progress = (t - s.warmup_steps) as f64 / span;
    Ok(s.peak_lr * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()).expect("parameter shapes are non-empty")))
            .collect();
        Self { m: zeros.clone(), v: zeros, step: 0, config }
    }

    pub fn check(&self, params: &ModelParams) -> Result<()> {
        for (name, t) in params.iter() {
            for moments in [&self.m, &self.v] {
                let mt = moments.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                if mt.shape() != t.shape() {
                    return Err(Error::InvalidShape(format!("moment of {name} has shape {:?}", mt.shape())));
                }
            }
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::InvalidShape("optimizer moments do not match parameters".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero. The
/// update is computed in full before anything is written, so a non-finite
/// gradient or result leaves `params` and `st` untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    st: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::InvalidShape(format!("gradient of {name}: {:?} vs {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::PoisonedStep(format!("non-finite gradient for {name}")));
        }
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::PoisonedStep(format!("learning rate {lr}")));
    }
    st.check(params)?;
    let AdamConfig { beta1: b1, beta2: b2, eps } = st.config;
    let t = st.step + 1;
    let c1 = 1.0 - math::pow(b1, t as f64);
    let c2 = 1.0 - math::pow(b2, t as f64);
    let mut staged = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let (m, v) = (&st.m[name], &st.v[name]);
        let g = grads.get(name);
        let n = p.numel();
        let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for k in 0..n {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
            let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
            let update = lr * (mk / c1) / (math::sqrt(vk / c2) + eps);
            pn.push(p.data()[k] - update);
            mn.push(mk);
            vn.push(vk);
        }
        if pn.iter().any(|x| !x.is_finite()) {
            return Err(Error::PoisonedStep(format!("update of {name} is not finite")));
        }
        let shape = p.shape().to_vec();
        staged.push((name.clone(), Tensor::new(shape.clone(), pn)?, Tensor::new(shape.clone(), mn)?, Tensor::new(shape, vn)?));
    }
    for (name, p, m, v) in staged {
        params.set(&name, p)?;
        st.m.insert(name.clone(), m);
        st.v.insert(name, v);
    }
    st.step = t;
    Ok(())
}

/// Runs `f(0..n)` and returns the results in index order. Implementations
/// may evaluate in parallel; results must not depend on scheduling.
pub trait BatchMap: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send;
}

/// In-order, single-threaded evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl BatchMap for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// One unlabeled training clip. Video may be absent when no configured
/// modality needs it.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub waveform: Waveform,
    pub video: Option<VideoClip>,
}

impl Clip {
    pub fn duration(&self) -> f64 {
        self.waveform.duration()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub modalities: ModalitySet,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    pub dsp: DspConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Batch 64, 2000 steps, 1 s crops of 2 s clips at 8 kHz.
    pub fn desk() -> Self {
        let dsp = DspConfig::desk();
        Self {
            seed: 0,
            modalities: ModalitySet::ALL,
            batch_size: 64,
            schedule: Schedule::desk(),
            adam: AdamConfig::default(),
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig { crop_len: 1.0, video_frames: 5, ..AugmentConfig::default() },
            model: ModelConfig::desk(dsp.n_mels),
            dsp,
        }
    }

    /// Reference large-scale settings: batch 4096, 400k steps, 3 s crops,
    /// 80-bin log-mels, 2048-wide representations.
    pub fn large() -> Self {
        let dsp = DspConfig::preset_a();
        Self {
            seed: 0,
            modalities: ModalitySet::ALL,
            batch_size: 4096,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::large(dsp.n_mels, 2048),
            dsp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.contrastive.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size {} < 2", self.batch_size)));
        }
        if self.model.n_mels != self.dsp.n_mels {
            return Err(Error::InvalidConfig(format!(
                "model expects {} mel bins, dsp produces {}",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        if self.model.video_size != self.augment.video_size {
            return Err(Error::InvalidConfig(format!(
                "model expects {} px video, augmentation produces {} px",
                self.model.video_size, self.augment.video_size
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Model parameters together with the optimizer state; `optim.step` is the
/// number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optim: OptimState,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let params = model::init_params(&cfg.model, cfg.seed)?;
        let optim = OptimState::new(&params, cfg.adam.clone());
        Ok(Self { params, optim })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

fn modality_tag(m: Modality) -> u64 {
    match m {
        Modality::S => 1,
        Modality::W => 2,
        Modality::V => 3,
    }
}

/// Result of a forward/backward pass over one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    /// Per modality, the `[N, hidden]` batch entering the output
    /// normalization.
    pub norm_batches: PerModality<Tensor>,
}

/// Validated configuration plus the shared log-mel front end.
pub struct Trainer {
    cfg: TrainConfig,
    frontend: LogMelFrontend,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let frontend = LogMelFrontend::new(&cfg.dsp, sample_rate)?;
        Ok(Self { cfg, frontend })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn frontend(&self) -> &LogMelFrontend {
        &self.frontend
    }

    /// Dataset indices of the batch for a step.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Result<Vec<usize>> {
        let b = self.cfg.batch_size;
        if dataset_len < b {
            return Err(Error::InvalidBatch(format!("batch of {b} from {dataset_len} clips")));
        }
        let mut rng = rng_for(&[self.cfg.seed, stream::BATCH, step]);
        Ok(index::sample(&mut rng, dataset_len, b).into_vec())
    }

    /// Raw (unmixed) inputs of one sample: spectrogram from crop 1,
    /// waveform from crop 2, video synchronized to crop 1.
    pub fn views(&self, clip: &Clip, step: u64, sample: usize) -> Result<PerModality<Tensor>> {
        let cfg = &self.cfg;
        let mut rng = rng_for(&[cfg.seed, stream::AUGMENT, step, sample as u64]);
        if clip.waveform.sample_rate != self.frontend.sample_rate() {
            return Err(Error::InvalidConfig(format!(
                "clip at {} Hz, front end at {} Hz",
                clip.waveform.sample_rate,
                self.frontend.sample_rate()
            )));
        }
        let plan = augment::sample_crop_plan(clip.duration(), &cfg.augment, &mut rng)?;
        let shift = augment::sample_shift(&cfg.augment.shift, &mut rng);
        let jitter_seed = derive_seed(&[cfg.seed, stream::AUGMENT, step, sample as u64, modality_tag(Modality::V)]);
        let mut out = PerModality::empty();
        let set = cfg.modalities;
        if set.s {
            let crop = clip.waveform.slice_seconds(plan.crop1_start, plan.crop_len)?;
            let spec = augment::freq_shift(&self.frontend.compute(&crop)?, shift)?;
            out.s = Some(spec.to_tensor());
        }
        if set.w {
            out.w = Some(clip.waveform.slice_seconds(plan.crop2_start, plan.crop_len)?.to_tensor());
        }
        if set.v {
            let video = clip
                .video
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("video modality configured but clip has no video".into()))?;
            let window = augment::extract_video_window(video, &plan)?;
            let mut jr = rand::SeedableRng::seed_from_u64(jitter_seed);
            let jittered = augment::video_jitter(&window, &cfg.augment.jitter, cfg.augment.video_size, &mut jr)?;
            out.v = Some(jittered.to_tensor());
        }
        Ok(out)
    }

    /// Mixes each sample with a partner from one batch permutation; ratios
    /// are drawn per sample and modality (or per sample when shared).
    pub fn mix(&self, views: Vec<PerModality<Tensor>>, step: u64) -> Result<Vec<PerModality<Tensor>>> {
        let mc = &self.cfg.augment.mixup;
        let n = views.len();
        let enabled = |m: Modality| match m {
            Modality::S => mc.spectrogram,
            Modality::W => mc.waveform,
            Modality::V => mc.video,
        };
        if !Modality::ALL.iter().any(|&m| enabled(m) && self.cfg.modalities.contains(m)) {
            return Ok(views);
        }
        let mut prng = rng_for(&[self.cfg.seed, stream::MIX, step]);
        let perm = augment::random_permutation(n, &mut prng);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut mixed = PerModality::empty();
            for m in self.cfg.modalities.iter() {
                let x = views[i].get(m).expect("view built for every configured modality");
                let value = if enabled(m) {
                    let tag = if mc.shared_alpha { 0 } else { modality_tag(m) };
                    let mut arng = rng_for(&[self.cfg.seed, stream::MIX, step, i as u64, tag]);
                    let alpha = augment::sample_mixing_ratio(mc, &mut arng)?;
                    let partner = views[perm[i]].get(m).expect("view built for every configured modality");
                    augment::mixup(x, partner, alpha)?
                } else {
                    x.clone()
                };
                mixed.set(m, value);
            }
            out.push(mixed);
        }
        Ok(out)
    }

    /// Trunk pass (convolutions and pooling) of one sample on a fresh tape.
    fn trunk(&self, params: &ModelParams, inputs: &PerModality<Tensor>) -> Result<(Tape, PerModality<Var>)> {
        let mods: Vec<Modality> = self.cfg.modalities.iter().collect();
        let mut tape = Tape::new();
        let bound = model::bind_part(&mut tape, params, &mods, Part::Trunk);
        let mut pooled = PerModality::empty();
        for &m in &mods {
            let raw = inputs.get(m).expect("input built for every configured modality");
            pooled.set(m, model::tape_pool(&mut tape, &bound, &self.cfg.model, m, raw)?);
        }
        Ok((tape, pooled))
    }

    /// Loss, summed parameter gradients and the pre-normalization batches
    /// of one batch of clips.
    pub fn loss_and_grads<M: BatchMap>(
        &self,
        params: &ModelParams,
        clips: &[&Clip],
        step: u64,
        mapper: &M,
    ) -> Result<BatchOutcome> {
        let n = clips.len();
        if n < 2 {
            return Err(Error::InvalidBatch(format!("batch of {n}")));
        }
        let mods: Vec<Modality> = self.cfg.modalities.iter().collect();
        let views = mapper.map(n, |i| self.views(clips[i], step, i))?;
        let inputs = self.mix(views, step)?;
        let trunks = mapper.map(n, |i| self.trunk(params, &inputs[i]))?;

        let mut head = Tape::new();
        let bound = model::bind_part(&mut head, params, &mods, Part::Head);
        let mut pooled = PerModality::empty();
        let mut z = PerModality::empty();
        let mut norm_batches = PerModality::empty();
        for &m in &mods {
            let rows: Vec<&Tensor> = trunks.iter().map(|(t, v)| t.value(*v.get(m).expect("configured"))).collect();
            let c = rows[0].numel();
            let data: Vec<f64> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
            let p = head.leaf(Tensor::new(alloc::vec![n, c], data)?.with_requires_grad(true));
            let (h, pre_norm) = model::tape_head_batch(&mut head, &bound, &self.cfg.model, m, p)?;
            z.set(m, model::tape_project_rows(&mut head, &bound, h)?);
            pooled.set(m, p);
            norm_batches.set(m, pre_norm);
        }
        let (loss_var, loss) = objective::tape_total_loss(&mut head, &z, self.cfg.contrastive.temperature)?;
        if !loss.is_finite() {
            return Err(Error::PoisonedStep(format!("loss is not finite: {loss:?}")));
        }
        let seed = if self.cfg.contrastive.mean_reduction { 1.0 / n as f64 } else { 1.0 };
        let head_grads = head.backward_seeded(&[(loss_var, Tensor::scalar(seed))])?;

        let per_sample = mapper.map(n, |i| {
            let (tape, vars) = &trunks[i];
            let mut seeds = Vec::with_capacity(3);
            for &m in &mods {
                let g = head_grads.get(*pooled.get(m).expect("configured")).expect("pooled rows need gradients");
                let c = g.shape()[1];
                let row = Tensor::new(alloc::vec![c], g.data()[i * c..(i + 1) * c].to_vec())?;
                seeds.push((*vars.get(m).expect("configured"), row));
            }
            Ok(tape.backward_seeded(&seeds)?.into_named())
        })?;

        let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for grads in core::iter::once(head_grads.into_named()).chain(per_sample) {
            for (name, g) in grads {
                let acc = total.entry(name).or_insert_with(|| alloc::vec![0.0; g.numel()]);
                for (a, &b) in acc.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        let mut grads = BTreeMap::new();
        for (name, data) in total {
            let shape = params.get(&name)?.shape().to_vec();
            grads.insert(name, Tensor::new(shape, data)?);
        }
        Ok(BatchOutcome { loss, grads, norm_batches })
    }

    /// One optimization step on the batch drawn for `state.step()`.
    pub fn train_step<M: BatchMap>(&self, data: &[Clip], state: &mut TrainState, mapper: &M) -> Result<StepReport> {
        let step = state.step();
        let lr = lr_at_step(&self.cfg.schedule, step)?;
        let idx = self.batch_indices(data.len(), step)?;
        let clips: Vec<&Clip> = idx.iter().map(|&i| &data[i]).collect();
        let out = self.loss_and_grads(&state.params, &clips, step, mapper)?;
        let mut stats = Vec::new();
        for m in self.cfg.modalities.iter() {
            let mut s = state.params.norm_stats(m, &self.cfg.model)?;
            s.update(out.norm_batches.get(m).expect("configured"))?;
            stats.push((m, s));
        }
        adam_step(&mut state.params, &out.grads, &mut state.optim, lr)?;
        for (m, s) in &stats {
            state.params.set_norm_stats(*m, s)?;
        }
        if !state.params.is_finite() {
            return Err(Error::PoisonedStep(format!("parameters not finite after step {step}")));
        }
        Ok(StepReport { step, lr, loss: out.loss })
    }
}
