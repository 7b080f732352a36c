//! Encoders for the three modalities and the shared projector.
//!
//! Each encoder is a stack of strided valid convolutions with ReLU, average
//! pooling over time (the frequency axis of spectrograms and the spatial grid
//! of video frames are kept), a final affine map to `hidden_dim` and a batch
//! normalization; the result `h` is the representation used downstream.
//! During pretraining the normalization uses batch statistics (and updates
//! running averages); frozen feature extraction uses the running averages.
//! The projector `g` (one hidden ReLU layer) is shared by every modality and
//! its output is L2-normalized into the embedding `z`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::VideoClip;
use crate::diffmath::{BatchNormStats, Tape, Tensor, Var};
use crate::dsp::{Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::math;
use crate::modality::Modality;
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Output channels of each convolution stage.
    pub channels: Vec<usize>,
    /// Kernel extent per stage (square for 2-D stages).
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub hidden_dim: usize,
}

impl EncoderConfig {
    fn desk(modality: Modality, kernels: [usize; 3], strides: [usize; 3]) -> Self {
        Self { modality, channels: vec![8, 16, 32], kernels: kernels.into(), strides: strides.into(), hidden_dim: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{} encoder: {} channel stages, {} kernels, {} strides",
                self.modality,
                n,
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.channels.iter().chain(&self.kernels).chain(&self.strides).any(|&v| v == 0) || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(format!("{} encoder has a zero extent", self.modality)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub out: usize,
    /// Initial value of the hidden-layer bias. The projector input is
    /// batch-normalized and the hidden weights start with unit gain, so
    /// hidden pre-activations start near N(bias, 1).
    #[serde(default = "default_hidden_bias")]
    pub hidden_bias_init: f64,
}

fn default_hidden_bias() -> f64 {
    1.0
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { hidden: 512, out: 64, hidden_bias_init: default_hidden_bias() }
    }
}

/// Fixed affine maps applied to raw inputs before the first convolution:
/// `(x - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub spec_offset: f64,
    pub spec_scale: f64,
    pub wave_offset: f64,
    pub wave_scale: f64,
    pub video_offset: f64,
    pub video_scale: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            spec_offset: 0.0,
            spec_scale: 4.0,
            wave_offset: 0.0,
            wave_scale: 0.25,
            video_offset: 0.5,
            video_scale: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub video_size: usize,
    pub video_channels: usize,
    pub spectrogram: EncoderConfig,
    pub waveform: EncoderConfig,
    pub video: EncoderConfig,
    pub projector: ProjectorConfig,
    #[serde(default)]
    pub input_norm: InputNorm,
    /// Running-average momentum of the encoder output normalization.
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(40)
    }
}

impl ModelConfig {
    /// Small three-stage encoders suitable for CPU experiments.
    pub fn desk(n_mels: usize) -> Self {
        Self {
            n_mels,
            video_size: 50,
            video_channels: 3,
            spectrogram: EncoderConfig::desk(Modality::S, [3, 3, 3], [2, 2, 2]),
            waveform: EncoderConfig::desk(Modality::W, [32, 8, 8], [16, 4, 4]),
            video: EncoderConfig::desk(Modality::V, [6, 3, 3], [4, 2, 1]),
            projector: ProjectorConfig::default(),
            input_norm: InputNorm::default(),
            norm_momentum: default_momentum(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Representation width of the reference large-scale setup. The
    /// topology stays the small conv stack; only widths are scaled.
    pub fn large(n_mels: usize, hidden_dim: usize) -> Self {
        let mut c = Self::desk(n_mels);
        for e in [&mut c.spectrogram, &mut c.waveform, &mut c.video] {
            e.channels = vec![64, 256, 1024];
            e.hidden_dim = hidden_dim;
        }
        c
    }

    pub fn encoder(&self, m: Modality) -> &EncoderConfig {
        match m {
            Modality::S => &self.spectrogram,
            Modality::W => &self.waveform,
            Modality::V => &self.video,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.spectrogram.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let e = self.encoder(m);
            if e.modality != m {
                return Err(Error::InvalidConfig(format!("{m} encoder slot holds a {} config", e.modality)));
            }
            e.validate()?;
            if e.hidden_dim != self.hidden_dim() {
                return Err(Error::InvalidConfig(format!(
                    "the shared projector needs equal hidden dims, {m} has {}",
                    e.hidden_dim
                )));
            }
        }
        if self.n_mels == 0 || self.video_size == 0 || self.video_channels == 0 {
            return Err(Error::InvalidConfig("zero input extent".into()));
        }
        for m in [Modality::S, Modality::V] {
            if self.trunk_extent(m).is_none() {
                return Err(Error::InvalidConfig(format!("{m} input too small for its conv stack")));
            }
        }
        if self.projector.hidden == 0 || self.projector.out == 0 {
            return Err(Error::InvalidConfig("zero projector width".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) || !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("bad normalization momentum or eps".into()));
        }
        let n = &self.input_norm;
        if [n.spec_scale, n.wave_scale, n.video_scale].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("input scales must be positive".into()));
        }
        Ok(())
    }

    /// Extent of the kept (non-time) axes after the conv stages: mel bins
    /// for spectrograms, the square spatial grid for video, none for
    /// waveforms. `None` if an input of that size is too small.
    pub fn trunk_extent(&self, m: Modality) -> Option<usize> {
        let e = self.encoder(m);
        let mut n = match m {
            Modality::S => self.n_mels,
            Modality::V => self.video_size,
            Modality::W => return Some(1),
        };
        for (&k, &s) in e.kernels.iter().zip(&e.strides) {
            if k > n {
                return None;
            }
            n = (n - k) / s + 1;
        }
        Some(n)
    }

    /// Width of the pooled trunk output fed to the output map.
    pub fn pooled_dim(&self, m: Modality) -> usize {
        let c = *self.encoder(m).channels.last().expect("validated encoder has stages");
        let k = self.trunk_extent(m).unwrap_or(0);
        match m {
            Modality::S => c * k,
            Modality::W => c,
            Modality::V => c * k * k,
        }
    }

    fn in_channels(&self, m: Modality) -> usize {
        if m == Modality::V {
            self.video_channels
        } else {
            1
        }
    }

    /// Every parameter name with its shape, encoders first, projector last.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            let e = self.encoder(m);
            let mut c_in = self.in_channels(m);
            for (i, (&c, &k)) in e.channels.iter().zip(&e.kernels).enumerate() {
                let w = if m == Modality::W { vec![c, c_in, k] } else { vec![c, c_in, k, k] };
                out.push((format!("{}.conv{i}.w", m.prefix()), w));
                out.push((format!("{}.conv{i}.b", m.prefix()), vec![c]));
                c_in = c;
            }
            out.push((format!("{}.out.w", m.prefix()), vec![e.hidden_dim, self.pooled_dim(m)]));
            out.push((format!("{}.out.b", m.prefix()), vec![e.hidden_dim]));
            out.push((format!("{}.norm.gamma", m.prefix()), vec![e.hidden_dim]));
            out.push((format!("{}.norm.beta", m.prefix()), vec![e.hidden_dim]));
        }
        let p = &self.projector;
        out.push(("proj.fc1.w".into(), vec![p.hidden, self.hidden_dim()]));
        out.push(("proj.fc1.b".into(), vec![p.hidden]));
        out.push(("proj.fc2.w".into(), vec![p.out, p.hidden]));
        out.push(("proj.fc2.b".into(), vec![p.out]));
        out
    }

    /// Non-trained state: running mean and variance of each output
    /// normalization.
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            let d = self.encoder(m).hidden_dim;
            out.push((running_mean_name(m), vec![d]));
            out.push((running_var_name(m), vec![d]));
        }
        out
    }
}

pub fn running_mean_name(m: Modality) -> String {
    format!("{}.norm.running_mean", m.prefix())
}

pub fn running_var_name(m: Modality) -> String {
    format!("{}.norm.running_var", m.prefix())
}

/// Named trainable tensors of all encoders and the projector, plus the
/// non-trained normalization buffers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        Self::from_parts(tensors, BTreeMap::new())
    }

    pub fn from_parts(tensors: BTreeMap<String, Tensor>, buffers: BTreeMap<String, Tensor>) -> Result<Self> {
        for (name, t) in tensors.iter().chain(&buffers) {
            if !t.is_finite() {
                return Err(Error::InvalidConfig(format!("tensor {name} is not finite")));
            }
            if tensors.contains_key(name) && buffers.contains_key(name) {
                return Err(Error::InvalidConfig(format!("{name} is both parameter and buffer")));
            }
        }
        Ok(Self { tensors, buffers })
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if slot.shape() != t.shape() {
            return Err(Error::InvalidShape(format!("buffer {name}: {:?} vs {:?}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    /// Running statistics of a modality's output normalization.
    pub fn norm_stats(&self, m: Modality, cfg: &ModelConfig) -> Result<BatchNormStats> {
        Ok(BatchNormStats {
            mean: self.buffer(&running_mean_name(m))?.to_vec(),
            var: self.buffer(&running_var_name(m))?.to_vec(),
            momentum: cfg.norm_momentum,
            eps: cfg.norm_eps,
        })
    }

    pub fn set_norm_stats(&mut self, m: Modality, stats: &BatchNormStats) -> Result<()> {
        self.set_buffer(&running_mean_name(m), Tensor::vector(stats.mean.clone())?)?;
        self.set_buffer(&running_var_name(m), Tensor::vector(stats.var.clone())?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_parts(self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        (self.tensors, self.buffers)
    }

    /// Replaces an existing tensor of the same shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if slot.shape() != t.shape() {
            return Err(Error::InvalidShape(format!(
                "{name}: {:?} replaced by {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t.with_requires_grad(false);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }

    /// Checks names and shapes against a configuration.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes = cfg.parameter_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::InvalidShape(format!(
                "config expects {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in shapes {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidShape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
        }
        let buffers = cfg.buffer_shapes();
        if buffers.len() != self.buffers.len() {
            return Err(Error::InvalidShape(format!(
                "config expects {} buffers, found {}",
                buffers.len(),
                self.buffers.len()
            )));
        }
        for (name, shape) in buffers {
            let t = self.buffer(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidShape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of parameters
    /// and buffers, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().chain(&self.buffers) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Kaiming-style uniform weights (fan-in scaling, ReLU gain on conv
/// stages), zero biases except the projector hidden bias, unit
/// normalization scale. Reproducible from `seed` alone.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = rng_for(&[seed, stream::INIT]);
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data = if name == "proj.fc1.b" {
            vec![cfg.projector.hidden_bias_init; n]
        } else if name.ends_with(".b") || name.ends_with(".beta") {
            vec![0.0; n]
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let gain = if name.contains(".conv") { 2.0 } else { 1.0 };
            let bound = math::sqrt(3.0 * gain / fan_in as f64);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut buffers = BTreeMap::new();
    for (name, shape) in cfg.buffer_shapes() {
        let fill = if name.ends_with("running_var") { 1.0 } else { 0.0 };
        buffers.insert(name, Tensor::full(shape, fill)?);
    }
    Ok(ModelParams { tensors, buffers })
}

/// Parameters registered on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.into()))
    }
}

/// Which parameters of an encoder a tape needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    /// Convolution stages only.
    Trunk,
    /// Output map, normalization and the shared projector.
    Head,
    All,
}

fn in_part(name: &str, encoders: &[Modality], part: Part) -> bool {
    if name.starts_with("proj.") {
        return part != Part::Trunk;
    }
    let Some(rest) = encoders.iter().find_map(|m| name.strip_prefix(m.prefix()).and_then(|r| r.strip_prefix('.'))) else {
        return false;
    };
    match part {
        Part::All => true,
        Part::Trunk => rest.starts_with("conv"),
        Part::Head => !rest.starts_with("conv"),
    }
}

/// Registers the selected parameters as named differentiable leaves.
pub fn bind_part(tape: &mut Tape, params: &ModelParams, encoders: &[Modality], part: Part) -> Bound {
    let mut vars = BTreeMap::new();
    for (name, t) in params.iter() {
        if in_part(name, encoders, part) {
            vars.insert(name.clone(), tape.param(name.clone(), t.clone()));
        }
    }
    Bound { vars }
}

/// Registers all parameters of the given encoders plus the projector.
pub fn bind(tape: &mut Tape, params: &ModelParams, encoders: &[Modality]) -> Bound {
    bind_part(tape, params, encoders, Part::All)
}

fn affine(x: &Tensor, offset: f64, scale: f64) -> Tensor {
    x.map(|v| (v - offset) / scale)
}

/// Raw spectrogram `[frames, n_mels]` to the network input `[1, frames, n_mels]`.
pub fn prepare_spectrogram(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let [_, m] = *x.shape() else {
        return Err(Error::InvalidShape(format!("spectrogram tensor {:?}", x.shape())));
    };
    if m != cfg.n_mels {
        return Err(Error::InvalidShape(format!("spectrogram has {m} bins, model expects {}", cfg.n_mels)));
    }
    let n = &cfg.input_norm;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    affine(x, n.spec_offset, n.spec_scale).reshape(shape)
}

/// Raw waveform `[1, L]` (or `[L]`) to the network input `[1, L]`.
pub fn prepare_waveform(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let len = match *x.shape() {
        [l] | [1, l] => l,
        _ => return Err(Error::InvalidShape(format!("waveform tensor {:?}", x.shape()))),
    };
    let n = &cfg.input_norm;
    affine(x, n.wave_offset, n.wave_scale).reshape(vec![1, len])
}

/// Raw video `[T, H, W, C]` to per-frame network inputs `[C, H, W]`.
pub fn prepare_video(x: &Tensor, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    let [t, h, w, c] = *x.shape() else {
        return Err(Error::InvalidShape(format!("video tensor {:?}", x.shape())));
    };
    if h != cfg.video_size || w != cfg.video_size || c != cfg.video_channels {
        return Err(Error::InvalidShape(format!(
            "video frames {h}x{w}x{c}, model expects {0}x{0}x{1}",
            cfg.video_size, cfg.video_channels
        )));
    }
    let n = &cfg.input_norm;
    let d = x.data();
    let plane = h * w;
    (0..t)
        .map(|f| {
            let src = &d[f * plane * c..(f + 1) * plane * c];
            let mut out = vec![0.0; plane * c];
            for p in 0..plane {
                for ch in 0..c {
                    out[ch * plane + p] = (src[p * c + ch] - n.video_offset) / n.video_scale;
                }
            }
            Tensor::new(vec![c, h, w], out)
        })
        .collect()
}

fn conv_stack(tape: &mut Tape, b: &Bound, e: &EncoderConfig, mut x: Var) -> Result<Var> {
    let prefix = e.modality.prefix();
    for i in 0..e.channels.len() {
        let w = b.var(&format!("{prefix}.conv{i}.w"))?;
        let bias = b.var(&format!("{prefix}.conv{i}.b"))?;
        let y = if e.modality == Modality::W {
            tape.conv1d(x, w, e.strides[i])?
        } else {
            tape.conv2d(x, w, e.strides[i])?
        };
        let y = tape.add_channel_bias(y, bias)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Records the pooled trunk output `[C]` for one raw input.
pub fn tape_pool(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, m: Modality, raw: &Tensor) -> Result<Var> {
    let e = cfg.encoder(m);
    match m {
        Modality::S => {
            // [C, T', F'] -> mean over T' -> [C·F']
            let x = tape.constant(prepare_spectrogram(raw, cfg)?);
            let y = conv_stack(tape, b, e, x)?;
            let pooled = tape.mean_middle(y)?;
            let n = tape.value(pooled).numel();
            tape.reshape(pooled, vec![n])
        }
        Modality::W => {
            let x = tape.constant(prepare_waveform(raw, cfg)?);
            let y = conv_stack(tape, b, e, x)?;
            tape.mean_trailing(y)
        }
        Modality::V => {
            // per frame [C, H', W'] flattened, then mean over frames
            let frames = prepare_video(raw, cfg)?;
            let mut per_frame = Vec::with_capacity(frames.len());
            for f in frames {
                let x = tape.constant(f);
                let y = conv_stack(tape, b, e, x)?;
                let n = tape.value(y).numel();
                per_frame.push(tape.reshape(y, vec![n])?);
            }
            let stacked = tape.stack(&per_frame)?;
            tape.mean_rows(stacked)
        }
    }
}

/// Output map and normalization with running statistics: `[C] -> h`.
pub fn tape_head(tape: &mut Tape, b: &Bound, p: &ModelParams, cfg: &ModelConfig, m: Modality, pooled: Var) -> Result<Var> {
    let pre = m.prefix();
    let y = tape.linear(b.var(&format!("{pre}.out.w"))?, pooled, b.var(&format!("{pre}.out.b"))?)?;
    let stats = p.norm_stats(m, cfg)?;
    let mean = tape.constant(Tensor::vector(stats.mean.clone())?);
    let inv = tape.constant(Tensor::vector(stats.var.iter().map(|v| 1.0 / math::sqrt(v + stats.eps)).collect())?);
    let centered = tape.sub(y, mean)?;
    let xhat = tape.mul(centered, inv)?;
    let scaled = tape.mul(xhat, b.var(&format!("{pre}.norm.gamma"))?)?;
    tape.add(scaled, b.var(&format!("{pre}.norm.beta"))?)
}

/// Output map and normalization with batch statistics on stacked pooled
/// rows `[N,C] -> H[N,hidden]`. Also returns the pre-normalization batch
/// for the running-average update.
pub fn tape_head_batch(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, m: Modality, pooled: Var) -> Result<(Var, Tensor)> {
    let pre = m.prefix();
    let y = tape.linear_rows(pooled, b.var(&format!("{pre}.out.w"))?, b.var(&format!("{pre}.out.b"))?)?;
    let h = tape.batch_norm_train(
        y,
        b.var(&format!("{pre}.norm.gamma"))?,
        b.var(&format!("{pre}.norm.beta"))?,
        cfg.norm_eps,
    )?;
    Ok((h, tape.value(y).clone()))
}

/// Records `h` for one raw input of modality `m` (frozen-feature mode).
pub fn tape_encode(tape: &mut Tape, b: &Bound, p: &ModelParams, cfg: &ModelConfig, m: Modality, raw: &Tensor) -> Result<Var> {
    let pooled = tape_pool(tape, b, cfg, m, raw)?;
    tape_head(tape, b, p, cfg, m, pooled)
}

fn degenerate(e: Error) -> Error {
    match e {
        Error::DegenerateInput(_) => Error::DegenerateEmbedding,
        other => other,
    }
}

/// Records `Z` for a batch `H[N,hidden]`, one normalized row per sample.
pub fn tape_project_rows(tape: &mut Tape, b: &Bound, h: Var) -> Result<Var> {
    let h1 = tape.linear_rows(h, b.var("proj.fc1.w")?, b.var("proj.fc1.b")?)?;
    let a1 = tape.relu(h1);
    let g = tape.linear_rows(a1, b.var("proj.fc2.w")?, b.var("proj.fc2.b")?)?;
    let n = tape.value(g).shape()[0];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let r = tape.row(g, i)?;
        rows.push(tape.l2_normalize(r).map_err(degenerate)?);
    }
    tape.stack(&rows)
}

/// Records `z = g(h) / ||g(h)||`.
pub fn tape_project(tape: &mut Tape, b: &Bound, h: Var) -> Result<Var> {
    let h1 = tape.linear(b.var("proj.fc1.w")?, h, b.var("proj.fc1.b")?)?;
    let a1 = tape.relu(h1);
    let g = tape.linear(b.var("proj.fc2.w")?, a1, b.var("proj.fc2.b")?)?;
    tape.l2_normalize(g).map_err(degenerate)
}

fn run_encoder(m: Modality, raw: &Tensor, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, p, &[m]);
    let h = tape_encode(&mut tape, &b, p, cfg, m, raw)?;
    Ok(tape.value(h).clone().with_requires_grad(false))
}

/// `h` for a raw input tensor of any modality.
pub fn encode(m: Modality, raw: &Tensor, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    run_encoder(m, raw, p, cfg)
}

pub fn encode_spectrogram(s: &Spectrogram, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    run_encoder(Modality::S, &s.to_tensor(), p, cfg)
}

pub fn encode_waveform(w: &Waveform, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    run_encoder(Modality::W, &w.to_tensor(), p, cfg)
}

pub fn encode_video(v: &VideoClip, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    run_encoder(Modality::V, &v.to_tensor(), p, cfg)
}

pub fn project_and_normalize(h: &Tensor, p: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, p, &[]);
    let x = tape.constant(h.clone());
    let z = tape_project(&mut tape, &b, x)?;
    Ok(tape.value(z).clone())
}
