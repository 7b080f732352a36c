//! Log-mel spectrogram frontend.
//!
//! Non-centered Hann-windowed frames, a radix-2 real FFT, triangular filters
//! on the `2595·log10(1 + f/700)` mel scale, then a floored natural log.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Sample index of a time offset (rounded to the nearest sample).
    pub fn sample_at(&self, seconds: f64) -> usize {
        math::round(seconds * f64::from(self.sample_rate)) as usize
    }

    /// The window `[start, start + len)` in seconds.
    pub fn slice_seconds(&self, start: f64, len: f64) -> Result<Waveform> {
        let a = self.sample_at(start);
        let n = self.sample_at(len);
        if start < 0.0 || a + n > self.samples.len() {
            return Err(Error::InvalidLength(format!(
                "window [{start}, {}) s outside clip of {} s",
                start + len,
                self.duration()
            )));
        }
        Ok(Waveform { samples: self.samples[a..a + n].to_vec(), sample_rate: self.sample_rate })
    }

    /// Integer-factor decimation with a boxcar anti-alias average.
    pub fn decimate(&self, factor: u32) -> Result<Waveform> {
        if factor == 0 || self.sample_rate % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "cannot decimate {} Hz by {factor}",
                self.sample_rate
            )));
        }
        let f = factor as usize;
        let samples = self
            .samples
            .chunks_exact(f)
            .map(|c| c.iter().map(|&v| f64::from(v)).sum::<f64>() as f32 / factor as f32)
            .collect();
        Ok(Waveform { samples, sample_rate: self.sample_rate / factor })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.samples.iter().map(|&v| f64::from(v)).collect();
        Tensor::from_parts(vec![1, self.samples.len()], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    /// Debug mode: no taper.
    Rectangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    #[serde(default = "default_window")]
    pub window: WindowKind,
}

fn default_window() -> WindowKind {
    WindowKind::Hann
}

impl Default for DspConfig {
    fn default() -> Self {
        Self::preset_a()
    }
}

impl DspConfig {
    /// 80 mel bins, 20 ms windows, 10 ms hop (AudioSet experiments).
    pub fn preset_a() -> Self {
        Self {
            n_mels: 80,
            window_ms: 20.0,
            hop_ms: 10.0,
            n_fft: 512,
            fmin: 60.0,
            fmax: 7800.0,
            log_floor: 1e-10,
            window: WindowKind::Hann,
        }
    }

    /// 64 mel bins, 25 ms windows, 10 ms hop (other downstream tasks).
    pub fn preset_b() -> Self {
        Self { n_mels: 64, window_ms: 25.0, ..Self::preset_a() }
    }

    /// 40 mel bins up to 3.8 kHz, 25 ms windows, 10 ms hop; sized for 8 kHz
    /// audio in CPU experiments.
    pub fn desk() -> Self {
        Self { n_mels: 40, window_ms: 25.0, n_fft: 256, fmax: 3800.0, ..Self::preset_a() }
    }

    pub fn win_length(&self, sample_rate: u32) -> usize {
        math::round(self.window_ms * f64::from(sample_rate) / 1000.0) as usize
    }

    pub fn hop_length(&self, sample_rate: u32) -> usize {
        math::round(self.hop_ms * f64::from(sample_rate) / 1000.0) as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        let win = self.win_length(sample_rate);
        if sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.n_mels == 0 || win == 0 || self.hop_length(sample_rate) == 0 {
            return bad(format!("degenerate dsp config {self:?}"));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return bad(format!("n_fft {} must be a power of two", self.n_fft));
        }
        if self.n_fft < win {
            return bad(format!("n_fft {} shorter than window {win}", self.n_fft));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// `floor((len - win)/hop) + 1`, or `None` when the input is too short.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let win = self.win_length(sample_rate);
        let hop = self.hop_length(sample_rate);
        (len >= win && hop > 0).then(|| (len - win) / hop + 1)
    }
}

/// Log-mel energies, `frames × n_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
    /// Seconds between frames.
    pub frame_hop: f64,
}

impl Spectrogram {
    pub fn new(frames: usize, n_mels: usize, data: Vec<f64>, frame_hop: f64) -> Result<Self> {
        if frames * n_mels != data.len() || frames == 0 || n_mels == 0 {
            return Err(Error::InvalidShape(format!(
                "spectrogram {frames}x{n_mels} with {} values",
                data.len()
            )));
        }
        Ok(Self { frames, n_mels, data, frame_hop })
    }

    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.n_mels + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.frames, self.n_mels], self.data.clone())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * math::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (math::pow(10.0, m / 2595.0) - 1.0)
}

fn window_fn(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        // periodic Hann
        WindowKind::Hann => (0..len)
            .map(|i| 0.5 - 0.5 * math::cos(2.0 * PI * i as f64 / len as f64))
            .collect(),
        WindowKind::Rectangular => vec![1.0; len],
    }
}

/// Non-centered frames at hop spacing with the configured window applied.
pub fn frame_signal(w: &Waveform, cfg: &DspConfig) -> Result<Tensor> {
    let win = cfg.win_length(w.sample_rate);
    let hop = cfg.hop_length(w.sample_rate);
    let frames = cfg.frame_count(w.len(), w.sample_rate).ok_or_else(|| {
        Error::InvalidLength(format!("{} samples shorter than window {win}", w.len()))
    })?;
    if hop == 0 {
        return Err(Error::InvalidConfig("hop length is zero".into()));
    }
    let taper = window_fn(cfg.window, win);
    let mut data = Vec::with_capacity(frames * win);
    for f in 0..frames {
        let seg = &w.samples[f * hop..f * hop + win];
        data.extend(seg.iter().zip(&taper).map(|(&s, &t)| f64::from(s) * t));
    }
    Ok(Tensor::from_parts(vec![frames, win], data))
}

/// Radix-2 real FFT via a half-length complex transform.
#[derive(Clone, Debug)]
pub struct RealFft {
    n: usize,
    bitrev: Vec<usize>,
    // e^{-2πij/(n/2)}, j < n/4 (complex, interleaved)
    twiddles: Vec<(f64, f64)>,
    // e^{-2πik/n}, k <= n/2
    post: Vec<(f64, f64)>,
}

impl RealFft {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("FFT size {n} must be a power of two >= 2")));
        }
        let half = n / 2;
        let bits = half.trailing_zeros();
        let bitrev = (0..half)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..half / 2)
            .map(|j| {
                let a = -2.0 * PI * j as f64 / half as f64;
                (math::cos(a), math::sin(a))
            })
            .collect();
        let post = (0..=half)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (math::cos(a), math::sin(a))
            })
            .collect();
        Ok(Self { n, bitrev, twiddles, post })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Squared magnitudes of bins `0..=n/2` of a real frame zero-padded to `n`.
    pub fn power(&self, frame: &[f64], out: &mut [f64]) {
        let half = self.n / 2;
        let mut re = vec![0.0; half];
        let mut im = vec![0.0; half];
        for k in 0..half {
            let j = self.bitrev[k];
            re[j] = frame.get(2 * k).copied().unwrap_or(0.0);
            im[j] = frame.get(2 * k + 1).copied().unwrap_or(0.0);
        }
        let mut size = 2;
        while size <= half {
            let step = half / size;
            for start in (0..half).step_by(size) {
                for j in 0..size / 2 {
                    let (wr, wi) = self.twiddles[j * step];
                    let (a, b) = (start + j, start + j + size / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
        for k in 0..=half {
            let (zr, zi) = (re[k % half], im[k % half]);
            let (cr, ci) = (re[(half - k) % half], -im[(half - k) % half]);
            // even part (Z[k] + conj Z[m-k]) / 2, odd part (Z[k] - conj Z[m-k]) / 2i
            let (er, ei) = ((zr + cr) * 0.5, (zi + ci) * 0.5);
            let (or, oi) = ((zi - ci) * 0.5, -(zr - cr) * 0.5);
            let (wr, wi) = self.post[k];
            let xr = er + or * wr - oi * wi;
            let xi = ei + or * wi + oi * wr;
            out[k] = xr * xr + xi * xi;
        }
    }
}

/// Squared-magnitude spectrum per frame: `[F, win] -> [F, n_fft/2 + 1]`.
pub fn power_spectrum(frames: &Tensor, n_fft: usize) -> Result<Tensor> {
    let [f, win] = *frames.shape() else {
        return Err(Error::InvalidShape(format!("frames {:?}", frames.shape())));
    };
    if n_fft < win {
        return Err(Error::InvalidConfig(format!("n_fft {n_fft} shorter than frame {win}")));
    }
    let fft = RealFft::new(n_fft)?;
    let bins = n_fft / 2 + 1;
    let mut out = vec![0.0; f * bins];
    for (frame, dst) in frames.data().chunks_exact(win).zip(out.chunks_exact_mut(bins)) {
        fft.power(frame, dst);
    }
    Ok(Tensor::from_parts(vec![f, bins], out))
}

/// One triangular filter stored over its contiguous support.
#[derive(Clone, Debug)]
pub struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Filter edge frequencies: `n_mels + 2` points equally spaced in mel.
pub fn mel_edges_hz(cfg: &DspConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.n_mels + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

/// Triangle peak frequencies, one per mel bin.
pub fn mel_centers_hz(cfg: &DspConfig) -> Vec<f64> {
    let e = mel_edges_hz(cfg);
    e[1..e.len() - 1].to_vec()
}

fn build_filters(cfg: &DspConfig, sample_rate: u32) -> Vec<MelFilter> {
    let edges = mel_edges_hz(cfg);
    let bins = cfg.n_bins();
    let df = f64::from(sample_rate) / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w: Vec<f64> = (0..bins)
                .map(|j| {
                    let f = j as f64 * df;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect();
            match w.iter().position(|&v| v > 0.0) {
                Some(s) => {
                    let e = w.iter().rposition(|&v| v > 0.0).unwrap_or(s);
                    MelFilter { start: s, weights: w[s..=e].to_vec() }
                }
                None => MelFilter { start: 0, weights: Vec::new() },
            }
        })
        .collect()
}

/// Dense filterbank `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(cfg: &DspConfig, sample_rate: u32) -> Result<Tensor> {
    cfg.validate(sample_rate)?;
    let bins = cfg.n_bins();
    let mut out = vec![0.0; cfg.n_mels * bins];
    for (m, f) in build_filters(cfg, sample_rate).iter().enumerate() {
        out[m * bins + f.start..m * bins + f.start + f.weights.len()].copy_from_slice(&f.weights);
    }
    Ok(Tensor::from_parts(vec![cfg.n_mels, bins], out))
}

/// Precomputed window, FFT plan and filters for one `(config, sample rate)`.
#[derive(Clone, Debug)]
pub struct LogMelFrontend {
    cfg: DspConfig,
    sample_rate: u32,
    taper: Vec<f64>,
    fft: RealFft,
    filters: Vec<MelFilter>,
}

impl LogMelFrontend {
    pub fn new(cfg: &DspConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            taper: window_fn(cfg.window, cfg.win_length(sample_rate)),
            fft: RealFft::new(cfg.n_fft)?,
            filters: build_filters(cfg, sample_rate),
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    /// `log(max(filterbank · power, floor))` for a `[F, n_fft/2+1]` power
    /// spectrum.
    pub fn log_mel_from_power(&self, power: &Tensor) -> Result<Spectrogram> {
        let bins = self.cfg.n_bins();
        let [f, b] = *power.shape() else {
            return Err(Error::InvalidShape(format!("power {:?}", power.shape())));
        };
        if b != bins {
            return Err(Error::InvalidShape(format!("power has {b} bins, expected {bins}")));
        }
        let mut out = Vec::with_capacity(f * self.cfg.n_mels);
        for row in power.data().chunks_exact(bins) {
            self.push_log_mel(row, &mut out);
        }
        self.finish(f, out)
    }

    fn push_log_mel(&self, power_row: &[f64], out: &mut Vec<f64>) {
        let floor = self.cfg.log_floor;
        for filt in &self.filters {
            let seg = &power_row[filt.start..filt.start + filt.weights.len()];
            let e: f64 = seg.iter().zip(&filt.weights).map(|(p, w)| p * w).sum();
            out.push(math::ln(e.max(floor)));
        }
    }

    fn finish(&self, frames: usize, data: Vec<f64>) -> Result<Spectrogram> {
        let hop = self.cfg.hop_length(self.sample_rate) as f64 / f64::from(self.sample_rate);
        Spectrogram::new(frames, self.cfg.n_mels, data, hop)
    }

    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "frontend built for {} Hz, got {} Hz",
                self.sample_rate, w.sample_rate
            )));
        }
        self.compute_samples(&w.samples)
    }

    /// Same as [`compute`](Self::compute) on raw samples at the frontend's rate.
    pub fn compute_samples<T: Copy + Into<f64>>(&self, samples: &[T]) -> Result<Spectrogram> {
        let win = self.taper.len();
        let hop = self.cfg.hop_length(self.sample_rate);
        let frames = self.cfg.frame_count(samples.len(), self.sample_rate).ok_or_else(|| {
            Error::InvalidLength(format!("{} samples shorter than window {win}", samples.len()))
        })?;
        let bins = self.cfg.n_bins();
        let mut frame = vec![0.0; win];
        let mut power = vec![0.0; bins];
        let mut out = Vec::with_capacity(frames * self.cfg.n_mels);
        for f in 0..frames {
            for (i, d) in frame.iter_mut().enumerate() {
                *d = samples[f * hop + i].into() * self.taper[i];
            }
            self.fft.power(&frame, &mut power);
            self.push_log_mel(&power, &mut out);
        }
        self.finish(frames, out)
    }
}

/// Log-mel spectrogram of a waveform.
pub fn log_mel(w: &Waveform, cfg: &DspConfig) -> Result<Spectrogram> {
    LogMelFrontend::new(cfg, w.sample_rate)?.compute(w)
}
