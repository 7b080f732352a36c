//! Deterministic correlated trimodal clips.
//!
//! A latent class `c` keys both streams. The audio is a class tone
//! (`200·(c+1)` Hz with two harmonics) blended with a per-clip distractor
//! tone and white noise; the video is a Gaussian blob whose horizontal
//! position encodes the video class and whose vertical position oscillates.
//! The video class equals `c` with probability `shared_cue`, otherwise it is
//! drawn uniformly.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::VideoClip;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub num_classes: usize,
    /// Weight of the class tone against the per-clip distractor tone.
    pub audio_cue: f64,
    /// Weight of the class position against a random blob position.
    pub video_cue: f64,
    /// Probability that the video class equals the audio class.
    pub shared_cue: f64,
    pub noise_level: f64,
    pub clip_len: f64,
    pub sample_rate: u32,
    pub fps: f64,
    pub video_size: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            audio_cue: 0.5,
            video_cue: 1.0,
            shared_cue: 1.0,
            noise_level: 0.3,
            clip_len: 2.0,
            sample_rate: 8000,
            fps: 5.0,
            video_size: 50,
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        for (name, v) in [("audio_cue", self.audio_cue), ("video_cue", self.video_cue), ("shared_cue", self.shared_cue)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0,1]")));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_level {}", self.noise_level)));
        }
        if !(self.clip_len > 0.0 && self.fps > 0.0) || self.sample_rate == 0 || self.video_size < 4 {
            return Err(Error::InvalidConfig("degenerate clip geometry".into()));
        }
        if self.class_frequency(self.num_classes - 1) * 3.0 >= f64::from(self.sample_rate) / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "{} classes need harmonics above Nyquist at {} Hz",
                self.num_classes, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn class_frequency(&self, c: usize) -> f64 {
        200.0 * (c + 1) as f64
    }

    /// Blob centre column of a video class, in pixels.
    pub fn class_position(&self, c: usize) -> f64 {
        let margin = 0.15 * self.video_size as f64;
        let span = self.video_size as f64 - 2.0 * margin;
        margin + span * (c as f64 + 0.5) / self.num_classes as f64
    }

    pub fn samples_per_clip(&self) -> usize {
        math::round(self.clip_len * f64::from(self.sample_rate)) as usize
    }

    pub fn frames_per_clip(&self) -> usize {
        (math::round(self.clip_len * self.fps) as usize).max(1)
    }
}

/// Latent draws behind one sample, kept for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLatents {
    pub video_class: usize,
    pub distractor_hz: f64,
    pub tone_phase: f64,
    pub blob_x: f64,
    pub blob_phase: f64,
    pub blob_rate_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrimodalSample {
    pub index: u64,
    pub label: usize,
    pub waveform: Waveform,
    pub video: VideoClip,
    pub latents: SampleLatents,
}

/// Peak amplitude budget of the audio mixture.
const AUDIO_GAIN: f64 = 0.25;
const HARMONICS: [(f64, f64); 3] = [(1.0, 1.0), (2.0, 0.25), (3.0, 0.125)];

pub fn label_of(spec: &LatentSpec, index: u64) -> usize {
    (index % spec.num_classes as u64) as usize
}

pub fn gen_sample(spec: &LatentSpec, seed: u64, index: u64) -> Result<TrimodalSample> {
    spec.validate()?;
    let mut rng = rng_for(&[seed, stream::SYNTH, index]);
    let label = label_of(spec, index);
    let c = spec.num_classes;
    let video_class = if rng.random_bool(spec.shared_cue) { label } else { rng.random_range(0..c) };
    let nyq = f64::from(spec.sample_rate) / 2.0;
    let distractor_hz = rng.random_range(150.0..(3000.0f64).min(0.8 * nyq));
    let tone_phase = rng.random_range(0.0..core::f64::consts::TAU);
    let distractor_phase = rng.random_range(0.0..core::f64::consts::TAU);
    let random_x = rng.random_range(spec.class_position(0)..=spec.class_position(c - 1));
    let blob_x = spec.video_cue * spec.class_position(video_class) + (1.0 - spec.video_cue) * random_x;
    let blob_phase = rng.random_range(0.0..core::f64::consts::TAU);
    let blob_rate_hz = rng.random_range(0.2..0.6);

    let sr = f64::from(spec.sample_rate);
    let f0 = spec.class_frequency(label);
    let samples = (0..spec.samples_per_clip())
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = HARMONICS
                .iter()
                .map(|&(k, a)| a * math::sin(core::f64::consts::TAU * k * f0 * t + k * tone_phase))
                .sum();
            let distractor = math::sin(core::f64::consts::TAU * distractor_hz * t + distractor_phase);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let x = AUDIO_GAIN
                * (spec.audio_cue * tone + (1.0 - spec.audio_cue) * distractor + spec.noise_level * noise);
            x.clamp(-1.0, 1.0) as f32
        })
        .collect();
    let waveform = Waveform::new(samples, spec.sample_rate)?;

    let size = spec.video_size;
    let frames = spec.frames_per_clip();
    let sigma = 0.08 * size as f64;
    let mut data = Vec::with_capacity(frames * size * size * 3);
    for f in 0..frames {
        let t = f as f64 / spec.fps;
        let y = size as f64 * (0.5 + 0.25 * math::sin(core::f64::consts::TAU * blob_rate_hz * t + blob_phase));
        for r in 0..size {
            for col in 0..size {
                let d2 = (col as f64 + 0.5 - blob_x).powi(2) + (r as f64 + 0.5 - y).powi(2);
                let blob = math::exp(-d2 / (2.0 * sigma * sigma));
                for ch in 0..3 {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let tint = [1.0, 0.8, 0.6][ch];
                    let v = 0.1 + 0.8 * tint * blob + 0.05 * spec.noise_level * noise;
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let video = VideoClip::new(frames, size, size, 3, spec.fps, data)?;
    let latents = SampleLatents { video_class, distractor_hz, tone_phase, blob_x, blob_phase, blob_rate_hz };
    Ok(TrimodalSample { index, label, waveform, video, latents })
}

/// Samples `start..start + n`.
pub fn gen_range(spec: &LatentSpec, seed: u64, start: u64, n: usize) -> Result<Vec<TrimodalSample>> {
    (start..start + n as u64).map(|i| gen_sample(spec, seed, i)).collect()
}

/// `n` samples with labels balanced to within one.
pub fn gen_dataset(spec: &LatentSpec, seed: u64, n: usize) -> Result<Vec<TrimodalSample>> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(Error::InvalidConfig(format!(
            "{n} samples cannot cover {} classes",
            spec.num_classes
        )));
    }
    gen_range(spec, seed, 0, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fast() -> LatentSpec {
        LatentSpec { clip_len: 0.5, video_size: 16, ..LatentSpec::default() }
    }

    #[test]
    fn reproducible_per_index() {
        let s = fast();
        let a = gen_sample(&s, 7, 3).unwrap();
        let b = gen_sample(&s, 7, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.waveform.samples.iter().zip(&b.waveform.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(gen_sample(&s, 7, 4).unwrap().waveform, a.waveform);
        assert_ne!(gen_sample(&s, 8, 3).unwrap().waveform, a.waveform);
    }

    #[test]
    fn class_tone_dominates_clean_audio() {
        let spec = LatentSpec { noise_level: 0.0, audio_cue: 1.0, clip_len: 1.0, ..LatentSpec::default() };
        for idx in 0..4 {
            let s = gen_sample(&spec, 1, idx).unwrap();
            let x: Vec<f64> = s.waveform.samples.iter().map(|&v| f64::from(v)).collect();
            let n = x.len();
            // naive DFT at integer-Hz bins (1 s clip)
            let power = |k: usize| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let a = core::f64::consts::TAU * (k * i) as f64 / n as f64;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                re * re + im * im
            };
            let f0 = spec.class_frequency(s.label) as usize;
            let band: f64 = (f0 - 5..=f0 + 5).map(power).sum();
            let total: f64 = (1..n / 2).map(power).sum();
            assert!(band / total >= 0.9, "class {} band share {}", s.label, band / total);
        }
    }

    /// Two-sample Kolmogorov–Smirnov p-value (asymptotic).
    fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (n, m) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n - j as f64 / m).abs());
        }
        let en = (n * m / (n + m)).sqrt();
        let lambda = (en + 0.12 + 0.11 / en) * d;
        let mut p = 0.0;
        for k in 1..100 {
            let k = k as f64;
            p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    fn centroid_x(v: &VideoClip) -> f64 {
        let f = v.frame(0);
        let (mut sw, mut sx) = (0.0, 0.0);
        for r in 0..v.height {
            for c in 0..v.width {
                let w = f64::from(f[(r * v.width + c) * 3]) - 0.1;
                if w > 0.2 {
                    sw += w;
                    sx += w * c as f64;
                }
            }
        }
        sx / sw
    }

    #[test]
    fn video_without_cue_is_class_independent() {
        let spec = LatentSpec { video_cue: 0.0, clip_len: 0.2, ..fast() };
        let (mut c0, mut c1) = (vec![], vec![]);
        for idx in 0..400u64 {
            let s = gen_sample(&spec, 3, idx).unwrap();
            match s.label {
                0 => c0.push(centroid_x(&s.video)),
                1 => c1.push(centroid_x(&s.video)),
                _ => {}
            }
        }
        assert!(ks_two_sample(c0, c1) > 0.01);
    }

    #[test]
    fn video_cue_orders_blob_positions() {
        let spec = LatentSpec { clip_len: 0.2, ..fast() };
        let xs: Vec<f64> = (0..4).map(|i| gen_sample(&spec, 2, i).unwrap().latents.blob_x).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cue_strength_orders_probe_accuracy() {
        // nearest-class-position rule on the latent blob column
        let accuracy = |video_cue: f64| {
            let spec = LatentSpec { video_cue, clip_len: 0.2, ..fast() };
            let hits = (0..200u64)
                .filter(|&i| {
                    let s = gen_sample(&spec, 5, i).unwrap();
                    let guess = (0..spec.num_classes)
                        .min_by(|&a, &b| {
                            let da = (spec.class_position(a) - s.latents.blob_x).abs();
                            let db = (spec.class_position(b) - s.latents.blob_x).abs();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    guess == s.label
                })
                .count();
            hits as f64 / 200.0
        };
        let (lo, hi) = (accuracy(0.0), accuracy(1.0));
        assert_eq!(hi, 1.0);
        assert!(lo < 0.5, "{lo}");
    }

    #[test]
    fn dataset_balance_and_errors() {
        let s = fast();
        let one_each = gen_dataset(&s, 1, 4).unwrap();
        let mut labels: Vec<usize> = one_each.iter().map(|x| x.label).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        let d = gen_dataset(&LatentSpec { clip_len: 0.1, ..s.clone() }, 1, 23).unwrap();
        let mut hist = [0usize; 4];
        d.iter().for_each(|x| hist[x.label] += 1);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        let test = gen_range(&LatentSpec { clip_len: 0.1, ..s.clone() }, 1, 23, 5).unwrap();
        assert!(test.iter().all(|t| d.iter().all(|x| x.waveform != t.waveform)));
        assert!(gen_dataset(&s, 1, 3).is_err());
        assert!(LatentSpec { audio_cue: 1.5, ..s.clone() }.validate().is_err());
        assert!(LatentSpec { num_classes: 1, ..s }.validate().is_err());
    }
}
