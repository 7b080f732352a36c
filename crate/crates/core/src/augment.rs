//! Stochastic view construction: paired audio crops with a synchronized
//! video window, spectrogram frequency shift, example mixing and video
//! jitter. Everything is a pure function of its inputs and an explicit RNG.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

/// RGB frame sequence, `[frames, height, width, channels]`, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        if frames * height * width * channels != data.len() || data.is_empty() {
            return Err(Error::InvalidShape(format!(
                "video {frames}x{height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidConfig(format!("video fps {fps}")));
        }
        Ok(Self { frames, height, width, channels, fps, data })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Tensor::from_parts(vec![self.frames, self.height, self.width, self.channels], data)
    }

    pub fn from_tensor(t: &Tensor, fps: f64) -> Result<Self> {
        let [f, h, w, c] = *t.shape() else {
            return Err(Error::InvalidShape(format!("video tensor {:?}", t.shape())));
        };
        Self::new(f, h, w, c, fps, t.data().iter().map(|&v| v as f32).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Maximum absolute shift `F` in mel bins.
    pub max_shift: usize,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { max_shift: 10, enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub beta_a: f64,
    pub beta_b: f64,
    pub spectrogram: bool,
    pub waveform: bool,
    pub video: bool,
    /// Draw one mixing ratio per sample for all modalities instead of one
    /// per sample and modality.
    #[serde(default)]
    pub shared_alpha: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { beta_a: 5.0, beta_b: 2.0, spectrogram: true, waveform: true, video: true, shared_alpha: false }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta parameters must be positive, got ({}, {})",
                self.beta_a, self.beta_b
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub enabled: bool,
    pub min_area: f64,
    pub max_area: f64,
    pub max_brightness: f64,
    pub min_contrast: f64,
    pub max_contrast: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_area: 0.6,
            max_area: 1.0,
            max_brightness: 0.2,
            min_contrast: 0.8,
            max_contrast: 1.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Seconds per audio crop.
    pub crop_len: f64,
    pub video_fps: f64,
    pub video_frames: usize,
    /// Output side length of jittered video frames.
    pub video_size: usize,
    pub shift: ShiftConfig,
    pub mixup: MixupConfig,
    pub jitter: JitterConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_len: 3.0,
            video_fps: 5.0,
            video_frames: 15,
            video_size: 50,
            shift: ShiftConfig::default(),
            mixup: MixupConfig::default(),
            jitter: JitterConfig::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_len > 0.0 && self.video_fps > 0.0) || self.video_frames == 0 || self.video_size == 0 {
            return Err(Error::InvalidConfig(format!("degenerate augment config {self:?}")));
        }
        let j = &self.jitter;
        if !(0.0 < j.min_area && j.min_area <= j.max_area && j.max_area <= 1.0)
            || !(0.0 < j.min_contrast && j.min_contrast <= j.max_contrast)
            || j.max_brightness < 0.0
        {
            return Err(Error::InvalidConfig(format!("bad jitter ranges {j:?}")));
        }
        self.mixup.validate()
    }
}

/// Where the two audio crops and the video window fall within a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub crop1_start: f64,
    pub crop2_start: f64,
    pub crop_len: f64,
    pub video_fps: f64,
    pub video_frames: usize,
    pub video_size: usize,
}

impl CropPlan {
    /// The video is synchronized to the first audio crop.
    pub fn video_window(&self) -> (f64, f64) {
        (self.crop1_start, self.crop1_start + self.crop_len)
    }
}

/// Two independent uniform crop starts in `[0, clip_len - crop_len]`.
pub fn sample_crop_plan(clip_len: f64, cfg: &AugmentConfig, rng: &mut Rng) -> Result<CropPlan> {
    let slack = clip_len - cfg.crop_len;
    if !(slack >= 0.0) {
        return Err(Error::InvalidLength(format!(
            "clip of {clip_len} s shorter than crop of {} s",
            cfg.crop_len
        )));
    }
    let mut draw = || if slack == 0.0 { 0.0 } else { rng.random_range(0.0..=slack) };
    let crop1_start = draw();
    let crop2_start = draw();
    Ok(CropPlan {
        crop1_start,
        crop2_start,
        crop_len: cfg.crop_len,
        video_fps: cfg.video_fps,
        video_frames: cfg.video_frames,
        video_size: cfg.video_size,
    })
}

/// Integer shift drawn uniformly from `[-F, F]`.
pub fn sample_shift(cfg: &ShiftConfig, rng: &mut Rng) -> i64 {
    if !cfg.enabled || cfg.max_shift == 0 {
        return 0;
    }
    let f = cfg.max_shift as i64;
    rng.random_range(-f..=f)
}

/// Moves mel bin `b` to `b + k`; bins shifted out are dropped and vacated
/// bins are zero.
pub fn freq_shift(s: &Spectrogram, k: i64) -> Result<Spectrogram> {
    let m = s.n_mels;
    if k.unsigned_abs() as usize > m {
        return Err(Error::InvalidShift { shift: k, bins: m });
    }
    let mut data = vec![0.0; s.data.len()];
    for f in 0..s.frames {
        let src = s.frame(f);
        let dst = &mut data[f * m..(f + 1) * m];
        for (b, &v) in src.iter().enumerate() {
            let t = b as i64 + k;
            if (0..m as i64).contains(&t) {
                dst[t as usize] = v;
            }
        }
    }
    Ok(Spectrogram { data, ..s.clone() })
}

/// Mixing ratio `α ~ Beta(a, b)`.
pub fn sample_mixing_ratio(cfg: &MixupConfig, rng: &mut Rng) -> Result<f64> {
    cfg.validate()?;
    let beta = Beta::new(cfg.beta_a, cfg.beta_b).map_err(|e| Error::InvalidConfig(format!("{e}")))?;
    Ok(beta.sample(rng))
}

#[inline]
fn mix_value(a: f64, b: f64, alpha: f64) -> f64 {
    if a == b {
        return a;
    }
    // rounding must not leave the segment [a, b]
    (alpha * a + (1.0 - alpha) * b).clamp(a.min(b), a.max(b))
}

/// Convex combination `α·x1 + (1-α)·x2`.
pub fn mixup(x1: &Tensor, x2: &Tensor, alpha: f64) -> Result<Tensor> {
    if x1.shape() != x2.shape() {
        return Err(Error::InvalidShape(format!("mixup {:?} with {:?}", x1.shape(), x2.shape())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("mixing ratio {alpha} outside [0,1]")));
    }
    let data = x1.data().iter().zip(x2.data()).map(|(&a, &b)| mix_value(a, b, alpha)).collect();
    Tensor::new(x1.shape().to_vec(), data)
}

/// Mixes sample `i` of a batch with sample `perm[i]` using ratio `alphas[i]`.
pub fn mixup_batch(batch: &Tensor, perm: &[usize], alphas: &[f64]) -> Result<Tensor> {
    let n = *batch
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidShape("mixup_batch on a scalar".into()))?;
    if perm.len() != n || alphas.len() != n {
        return Err(Error::InvalidBatch(format!(
            "batch of {n} with {} partners and {} ratios",
            perm.len(),
            alphas.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || core::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidBatch(format!("{perm:?} is not a permutation")));
        }
    }
    let per = batch.numel() / n;
    let x = batch.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        let alpha = alphas[i];
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("mixing ratio {alpha} outside [0,1]")));
        }
        let (a, b) = (&x[i * per..(i + 1) * per], &x[perm[i] * per..(perm[i] + 1) * per]);
        out.extend(a.iter().zip(b).map(|(&u, &v)| mix_value(u, v, alpha)));
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// A uniformly random permutation of `0..n` (fixed points allowed).
pub fn random_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Frames of the video window synchronized to the first audio crop.
pub fn extract_video_window(v: &VideoClip, plan: &CropPlan) -> Result<VideoClip> {
    let count = plan.video_frames;
    if v.frames < count {
        return Err(Error::InvalidLength(format!(
            "video has {} frames, window needs {count}",
            v.frames
        )));
    }
    let start = (math::floor(plan.crop1_start * v.fps + 1e-9) as usize).min(v.frames - count);
    let n = v.frame_len();
    VideoClip::new(count, v.height, v.width, v.channels, v.fps, v.data[start * n..(start + count) * n].to_vec())
}

/// One draw of the per-clip spatial and colour jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterParams {
    /// Square crop side in source pixels and its top-left corner.
    pub side: usize,
    pub top: usize,
    pub left: usize,
    pub brightness: f64,
    pub contrast: f64,
}

impl JitterParams {
    /// Full-frame crop, unit contrast, zero offset.
    pub fn identity(v: &VideoClip) -> Self {
        Self { side: v.height.min(v.width), top: 0, left: 0, brightness: 0.0, contrast: 1.0 }
    }
}

pub fn sample_jitter(v: &VideoClip, cfg: &JitterConfig, rng: &mut Rng) -> JitterParams {
    if !cfg.enabled {
        return JitterParams::identity(v);
    }
    let short = v.height.min(v.width);
    let area = rng.random_range(cfg.min_area..=cfg.max_area);
    let side = ((math::sqrt(area) * short as f64).round() as usize).clamp(1, short);
    let top = rng.random_range(0..=v.height - side);
    let left = rng.random_range(0..=v.width - side);
    let brightness = rng.random_range(-cfg.max_brightness..=cfg.max_brightness);
    let contrast = rng.random_range(cfg.min_contrast..=cfg.max_contrast);
    JitterParams { side, top, left, brightness, contrast }
}

/// Applies one crop (bilinear resize to `out × out`) to every frame, then a
/// per-clip brightness offset and contrast factor about the clip mean;
/// results are clamped to [0, 1].
pub fn apply_jitter(v: &VideoClip, p: &JitterParams, out: usize) -> Result<VideoClip> {
    if p.side == 0 || p.top + p.side > v.height || p.left + p.side > v.width {
        return Err(Error::InvalidShape(format!(
            "crop {}px at ({}, {}) outside {}x{} frame",
            p.side, p.top, p.left, v.height, v.width
        )));
    }
    let c = v.channels;
    let scale = p.side as f64 / out as f64;
    let coord = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (p.side - 1) as f64);
        let i0 = s as usize;
        let i1 = (i0 + 1).min(p.side - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..out).map(coord).collect();
    let xs = ys.clone();
    let mut data = Vec::with_capacity(v.frames * out * out * c);
    for t in 0..v.frames {
        let fr = v.frame(t);
        let px = |y: usize, x: usize, ch: usize| f64::from(fr[((p.top + y) * v.width + p.left + x) * c + ch]);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                for ch in 0..c {
                    let top = px(y0, x0, ch) + wx * (px(y0, x1, ch) - px(y0, x0, ch));
                    let bot = px(y1, x0, ch) + wx * (px(y1, x1, ch) - px(y1, x0, ch));
                    data.push(top + wy * (bot - top));
                }
            }
        }
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let out_data = data
        .iter()
        .map(|&x| (x + (p.contrast - 1.0) * (x - mean) + p.brightness).clamp(0.0, 1.0) as f32)
        .collect();
    VideoClip::new(v.frames, out, out, c, v.fps, out_data)
}

pub fn video_jitter(v: &VideoClip, cfg: &JitterConfig, out: usize, rng: &mut Rng) -> Result<VideoClip> {
    let p = sample_jitter(v, cfg, rng);
    apply_jitter(v, &p, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> crate::rng::Rng {
        crate::rng::Rng::seed_from_u64(seed)
    }

    fn spec(frames: usize, bins: &[f64]) -> Spectrogram {
        let data = (0..frames).flat_map(|_| bins.iter().copied()).collect();
        Spectrogram::new(frames, bins.len(), data, 0.01).unwrap()
    }

    /// Asymptotic Kolmogorov p-value for a one-sample KS statistic.
    fn ks_pvalue(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let mut p = 0.0;
        for j in 1..200 {
            let j = j as f64;
            p += 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn crop_boundary_forces_zero() {
        let cfg = AugmentConfig::default();
        let p = sample_crop_plan(3.0, &cfg, &mut rng(1)).unwrap();
        assert_eq!((p.crop1_start, p.crop2_start), (0.0, 0.0));
        assert!(matches!(sample_crop_plan(2.9, &cfg, &mut rng(1)), Err(Error::InvalidLength(_))));
    }

    #[test]
    fn crop_starts_uniform() {
        let cfg = AugmentConfig::default();
        let mut r = rng(2);
        let mut starts: Vec<f64> = Vec::with_capacity(100_000);
        for _ in 0..50_000 {
            let p = sample_crop_plan(10.0, &cfg, &mut r).unwrap();
            assert!((0.0..=7.0).contains(&p.crop1_start) && (0.0..=7.0).contains(&p.crop2_start));
            assert_eq!(p.video_window(), (p.crop1_start, p.crop1_start + 3.0));
            starts.push(p.crop1_start);
            starts.push(p.crop2_start);
        }
        starts.sort_by(f64::total_cmp);
        let n = starts.len();
        let d = starts
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = x / 7.0;
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks_pvalue(d, n) > 0.01, "KS d={d}");
    }

    #[test]
    fn shift_cases() {
        let s = spec(2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(freq_shift(&s, 0).unwrap(), s);
        assert_eq!(freq_shift(&s, 2).unwrap().frame(1), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(freq_shift(&s, -1).unwrap().frame(0), &[2.0, 3.0, 4.0, 0.0]);
        assert_eq!(freq_shift(&s, 4).unwrap().frame(0), &[0.0; 4]);
        assert!(matches!(freq_shift(&s, 5), Err(Error::InvalidShift { .. })));
    }

    #[test]
    fn shift_draws_cover_inclusive_range() {
        let cfg = ShiftConfig::default();
        let mut r = rng(4);
        let mut seen = [false; 21];
        for _ in 0..5000 {
            let k = sample_shift(&cfg, &mut r);
            seen[(k + 10) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(sample_shift(&ShiftConfig { enabled: false, ..cfg }, &mut r), 0);
    }

    #[test]
    fn mixup_cases() {
        let x1 = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let x2 = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert!(mixup(&x1, &x2, 1.0).unwrap().bitwise_eq(&x1));
        let m = mixup(&x1, &x2, 0.7).unwrap();
        assert!((m.data()[0] - 0.7).abs() < 1e-15 && (m.data()[1] - 0.3).abs() < 1e-15);
        let odd = Tensor::vector(vec![0.1, -3.3, 7.7]).unwrap();
        assert!(mixup(&odd, &odd, 0.37).unwrap().bitwise_eq(&odd));
        assert!(matches!(mixup(&x1, &odd, 0.5), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn mixup_batch_cases() {
        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert!(mixup_batch(&b, &[0, 1], &[0.3, 0.9]).unwrap().bitwise_eq(&b));
        assert!(mixup_batch(&b, &[1, 0], &[1.0, 1.0]).unwrap().bitwise_eq(&b));
        let half = mixup_batch(&b, &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(half.data(), &[2.0, 4.0, 2.0, 4.0]);
        assert!(mixup_batch(&b, &[1, 1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn beta_five_two_moments() {
        let cfg = MixupConfig::default();
        let mut r = rng(5);
        let n = 1_000_000;
        let mut hist = vec![0usize; 100];
        let mut sum = 0.0;
        for _ in 0..n {
            let a = sample_mixing_ratio(&cfg, &mut r).unwrap();
            assert!((0.0..=1.0).contains(&a));
            sum += a;
            hist[((a * 100.0) as usize).min(99)] += 1;
        }
        assert!((sum / n as f64 - 5.0 / 7.0).abs() < 0.002);
        let mode_bin = (0..100).max_by_key(|&i| hist[i]).unwrap();
        let mode = (mode_bin as f64 + 0.5) / 100.0;
        assert!((0.75..=0.85).contains(&mode), "mode {mode}");
    }

    fn clip(frames: usize, size: usize, f: impl Fn(usize) -> f32) -> VideoClip {
        let n = frames * size * size * 3;
        VideoClip::new(frames, size, size, 3, 5.0, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn jitter_identity_and_shape() {
        let v = clip(3, 50, |i| ((i * 37) % 101) as f32 / 100.0);
        let id = apply_jitter(&v, &JitterParams::identity(&v), 50).unwrap();
        assert_eq!(id, v);
        let off = JitterConfig { enabled: false, ..JitterConfig::default() };
        assert_eq!(video_jitter(&v, &off, 50, &mut rng(1)).unwrap(), v);
        let big = clip(2, 64, |i| (i % 7) as f32 / 7.0);
        let mut r = rng(9);
        for _ in 0..20 {
            let j = video_jitter(&big, &JitterConfig::default(), 50, &mut r).unwrap();
            assert_eq!((j.frames, j.height, j.width, j.channels), (2, 50, 50, 3));
            assert!(j.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn brightness_offset_on_constant_clip() {
        let v = clip(2, 50, |_| 0.5);
        let p = JitterParams { brightness: 0.1, ..JitterParams::identity(&v) };
        let j = apply_jitter(&v, &p, 50).unwrap();
        assert!(j.data.iter().all(|&x| (f64::from(x) - 0.6).abs() < 1e-6));
    }

    #[test]
    fn video_window_follows_first_crop() {
        let v = clip(20, 4, |i| (i / 48) as f32);
        let cfg = AugmentConfig { video_frames: 5, crop_len: 1.0, ..AugmentConfig::default() };
        let plan = CropPlan { crop1_start: 1.0, crop2_start: 0.0, crop_len: 1.0, video_fps: 5.0, video_frames: 5, video_size: 4 };
        let w = extract_video_window(&v, &plan).unwrap();
        assert_eq!(w.frames, cfg.video_frames);
        assert_eq!(w.frame(0)[0], 5.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mixup_stays_in_convex_hull(
            xs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32),
            alpha in 0.0f64..=1.0,
        ) {
            let a = Tensor::vector(xs.iter().map(|p| p.0).collect()).unwrap();
            let b = Tensor::vector(xs.iter().map(|p| p.1).collect()).unwrap();
            let m = mixup(&a, &b, alpha).unwrap();
            for ((&x, &y), &z) in a.data().iter().zip(b.data()).zip(m.data()) {
                prop_assert!(x.min(y) <= z && z <= x.max(y));
            }
        }

        #[test]
        fn shift_zeroes_exactly_k_bins(k in -12i64..=12, frames in 1usize..5) {
            let bins: Vec<f64> = (1..=12).map(f64::from).collect();
            let s = spec(frames, &bins);
            let out = freq_shift(&s, k).unwrap();
            prop_assert_eq!((out.frames, out.n_mels), (frames, 12));
            for f in 0..frames {
                let zeros = out.frame(f).iter().filter(|&&v| v == 0.0).count();
                prop_assert_eq!(zeros, (k.unsigned_abs() as usize).min(12));
            }
            // composing with the inverse shift restores the interior
            let back = freq_shift(&out, -k).unwrap();
            let ku = k.unsigned_abs() as usize;
            for b in 0..12 {
                let interior = if k >= 0 { b + ku < 12 } else { b >= ku };
                let expect = if interior { s.at(0, b) } else { 0.0 };
                prop_assert_eq!(back.at(0, b), expect);
            }
        }

        #[test]
        fn augmentation_deterministic_given_seed(seed in 0u64..1000) {
            let cfg = AugmentConfig::default();
            let v = clip(2, 60, |i| (i % 13) as f32 / 13.0);
            let run = |s| {
                let mut r = rng(s);
                let p = sample_crop_plan(10.0, &cfg, &mut r).unwrap();
                let k = sample_shift(&cfg.shift, &mut r);
                let a = sample_mixing_ratio(&cfg.mixup, &mut r).unwrap();
                let j = video_jitter(&v, &cfg.jitter, 50, &mut r).unwrap();
                (p, k, a.to_bits(), j)
            };
            prop_assert_eq!(run(seed), run(seed));
        }
    }
}
