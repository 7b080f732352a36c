//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use trimodal::checkpoint;
use trimodal::config::ExperimentConfig;
use trimodal::dataset::Dataset;
use trimodal::run::{evaluate, protocol_config, run_pretraining, PretrainOptions, Protocol};
use trimodal_core::augment::{mixup, sample_mixing_ratio, MixupConfig};
use trimodal_core::diffmath::Tensor;
use trimodal_core::dsp::{mel_filterbank, DspConfig, LogMelFrontend, Waveform};
use trimodal_core::evaluate::{auc, average_precision, d_prime, FrozenEncoder};
use trimodal_core::modality::Modality;
use trimodal_core::model::ModelParams;
use trimodal_core::objective::pairwise_loss;
use trimodal_core::rng::Rng;
use trimodal_core::synthdata::{gen_dataset, LatentSpec};
use trimodal_core::trainer::{lr_at_step, Clip, Schedule, Sequential, TrainConfig, TrainState, Trainer};
use trimodal_core::Error;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn clips(spec: &LatentSpec, seed: u64, n: usize) -> Vec<Clip> {
    gen_dataset(spec, seed, n)
        .unwrap()
        .into_iter()
        .map(|s| Clip { waveform: s.waveform, video: Some(s.video) })
        .collect()
}

// 1 ---------------------------------------------------------------------

const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on absolute error instead.
const FD_FLOOR: f64 = 1e-4;
const MAX_KINK_REDRAWS: usize = 16;

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 4;
    cfg.augment.crop_len = 0.5;
    cfg.augment.video_frames = 2;
    let data = clips(&LatentSpec { clip_len: 1.0, ..LatentSpec::default() }, 7, 4);
    let trainer = Trainer::new(cfg.clone(), 8000).unwrap();
    let st = TrainState::init(&cfg).unwrap();
    let batch: Vec<&Clip> = data.iter().collect();
    let grads = trainer.loss_and_grads(&st.params, &batch, 3, &Sequential).unwrap().grads;
    let loss_at = |p: &ModelParams| trainer.loss_and_grads(p, &batch, 3, &Sequential).unwrap().loss.total;

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR);
    let central = |name: &String, k: usize, eps: f64| {
        let t = st.params.get(name).unwrap();
        let bump = |d: f64| {
            let mut p = st.params.clone();
            let mut v = t.to_vec();
            v[k] += d;
            p.set(name, Tensor::new(t.shape().to_vec(), v).unwrap()).unwrap();
            loss_at(&p)
        };
        (bump(eps) - bump(-eps)) / (2.0 * eps)
    };

    // eight entries from each encoder and from the projector
    let mut rng = Rng::seed_from_u64(41);
    let (mut checked, mut kinks) = (0usize, 0usize);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for prefix in ["spec.", "wave.", "video.", "proj."] {
        let names: Vec<&String> = st.params.iter().map(|(n, _)| n).filter(|n| n.starts_with(prefix)).collect();
        let mut got = 0;
        while got < 8 {
            let name = names[rng.random_range(0..names.len())].clone();
            let k = rng.random_range(0..st.params.get(&name).unwrap().numel());
            let fd = central(&name, k, FD_EPS);
            // A ReLU or max-pool switch inside the stencil makes the loss
            // non-differentiable there; halving the step then changes the
            // quotient. A wrong gradient would leave the two quotients in
            // agreement with each other and still fail below.
            if rel(fd, central(&name, k, FD_EPS / 2.0)) > FD_REL_TOL {
                kinks += 1;
                continue;
            }
            let err = rel(fd, grads[&name].data()[k]);
            if err > worst {
                worst = err;
                worst_at = format!("{name}[{k}]");
            }
            got += 1;
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < FD_REL_TOL && kinks <= MAX_KINK_REDRAWS && secs < 60.0,
        format!(
            "{checked} parameters, max relative error {worst:.2e} at {worst_at}; {kinks} redrawn for a kink inside the stencil; {secs:.1} s"
        ),
    )
}

// 2 ---------------------------------------------------------------------

fn loss_analytics() -> Outcome {
    let mut worst = 0.0f64;
    for n in [2usize, 4, 8] {
        let mut row = vec![0.0; 5];
        row[2] = 1.0;
        let z = Tensor::new(vec![n, 5], row.repeat(n)).unwrap();
        let expect = 2.0 * n as f64 * ((2 * n - 1) as f64).ln();
        for tau in [0.1, 1.0] {
            worst = worst.max((pairwise_loss(&z, &z, tau).unwrap() - expect).abs());
        }
    }
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let orth = pairwise_loss(&eye, &eye, 1.0).unwrap();
    let expect = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
    let err = (orth - expect).abs();
    check(
        worst < 1e-9 && err < 1e-9 && (orth - 2.205779).abs() < 1e-6,
        format!("identical rows max error {worst:.1e}; orthogonal pair {orth:.9} (error {err:.1e})"),
    )
}

// 3 ---------------------------------------------------------------------

/// Exact AP as a reduced fraction: ranks follow descending score with
/// input order breaking ties.
fn exact_ap(scores: &[u32], labels: &[bool]) -> (u128, u128) {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let (mut num, mut den) = (0u128, 1u128);
    for &i in &pos {
        let r = rank(i) as u128;
        let hits = pos.iter().filter(|&&j| rank(j) as u128 <= r).count() as u128;
        num = num * r + hits * den;
        den *= r;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den *= pos.len() as u128;
    let g = gcd(num, den);
    (num / g, den / g)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Pairwise AUC with half credit for ties.
fn brute_auc(scores: &[u32], labels: &[bool]) -> f64 {
    let (mut twice, mut p, mut q) = (0u64, 0u64, 0u64);
    for i in 0..scores.len() {
        if labels[i] {
            p += 1;
        } else {
            q += 1;
        }
    }
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            twice += match scores[i].cmp(&scores[j]) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / 2.0 / (p * q) as f64
}

fn metric_oracles() -> Outcome {
    let mut cases = 0usize;
    let mut ap_err = 0.0f64;
    let mut auc_mismatch = 0usize;
    let mut compare = |scores: &[u32], labels: &[bool]| {
        let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        let (num, den) = exact_ap(scores, labels);
        let exact = num as f64 / den as f64;
        ap_err = ap_err.max((average_precision(&s, labels).unwrap() - exact).abs() / exact);
        if auc(&s, labels).unwrap() != brute_auc(scores, labels) {
            auc_mismatch += 1;
        }
        cases += 1;
    };
    // every labeling and every three-level score pattern up to n = 7
    for n in 2..=7usize {
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            for code in 0..3u32.pow(n as u32) {
                let scores: Vec<u32> = (0..n as u32).map(|i| code / 3u32.pow(i) % 3).collect();
                compare(&scores, &labels);
            }
        }
    }
    // random tie-heavy instances up to n = 12
    let mut rng = Rng::seed_from_u64(5);
    for _ in 0..200_000 {
        let n = rng.random_range(8..=12usize);
        let levels = rng.random_range(1..=n as u32);
        let scores: Vec<u32> = (0..n).map(|_| rng.random_range(0..levels)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[rng.random_range(0..n)] = true;
        let neg = (0..n).find(|&i| !labels[i]);
        if neg.is_none() {
            labels[0] = false;
            labels[n - 1] = true;
        }
        compare(&scores, &labels);
    }
    let (d1, d2) = (d_prime(0.958).unwrap(), d_prime(0.973).unwrap());
    check(
        ap_err <= 4.0 * f64::EPSILON && auc_mismatch == 0 && (d1 - 2.44).abs() <= 0.01 && (d2 - 2.73).abs() <= 0.01,
        format!(
            "{cases} cases: AUC mismatches {auc_mismatch}, AP max relative deviation from exact fraction {ap_err:.1e}; d'(0.958) = {d1:.4}, d'(0.973) = {d2:.4}"
        ),
    )
}

// 4 ---------------------------------------------------------------------

fn reference_log_mel(x: &[f32], cfg: &DspConfig, sr: u32) -> Vec<f64> {
    let win = (cfg.window_ms * f64::from(sr) / 1000.0).round() as usize;
    let hop = (cfg.hop_ms * f64::from(sr) / 1000.0).round() as usize;
    let n = cfg.n_fft;
    let bins = n / 2 + 1;
    let hann: Vec<f64> = (0..win).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()).collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) =
        (0..n).map(|m| 2.0 * std::f64::consts::PI * m as f64 / n as f64).map(|a| (a.cos(), a.sin())).unzip();
    let fb = mel_filterbank(cfg, sr).unwrap();
    let mut out = Vec::new();
    let frames = (x.len() - win) / hop + 1;
    for f in 0..frames {
        let seg: Vec<f64> = (0..win).map(|t| f64::from(x[f * hop + t]) * hann[t]).collect();
        let power: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in seg.iter().enumerate() {
                    let m = (k * t) % n;
                    re += v * cos[m];
                    im -= v * sin[m];
                }
                re * re + im * im
            })
            .collect();
        for row in fb.data().chunks_exact(bins) {
            let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    out
}

fn dsp_oracle() -> Outcome {
    let t0 = Instant::now();
    let sr = 16000;
    let mut rng = Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let cfg = if i % 2 == 0 { DspConfig::preset_a() } else { DspConfig::preset_b() };
        let fe = LogMelFrontend::new(&cfg, sr).unwrap();
        let (f, amp, noise) = (rng.random_range(50.0..7000.0), rng.random_range(0.0..0.9), rng.random_range(0.0..0.3));
        let x: Vec<f32> = (0..sr as usize / 2)
            .map(|t| {
                let s = amp * (2.0 * std::f64::consts::PI * f * t as f64 / f64::from(sr)).sin();
                (s + noise * rng.random_range(-1.0..1.0)) as f32
            })
            .collect();
        let ours = fe.compute(&Waveform::new(x.clone(), sr).unwrap()).unwrap();
        let reference = reference_log_mel(&x, &cfg, sr);
        assert_eq!(ours.data.len(), reference.len());
        for (a, b) in ours.data.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    let s = LogMelFrontend::new(&DspConfig::preset_a(), sr)
        .unwrap()
        .compute(&Waveform::new(vec![0.01; 3 * sr as usize], sr).unwrap())
        .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && (s.frames, s.n_mels) == (299, 80) && secs < 60.0,
        format!("100 clips, max |diff| {worst:.1e}; preset A on 3 s gives {}x{}; {secs:.1} s", s.frames, s.n_mels),
    )
}

// 5, 6, 10 ----------------------------------------------------------------

const PROBE_TEST_CLIPS: usize = 200;

fn pretrain_in_memory(cfg: &ExperimentConfig, data: &Dataset) -> ModelParams {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg.clone();
    cfg.run.checkpoint_every = cfg.train.schedule.total_steps.max(1);
    let clips: Vec<Clip> = data
        .split(trimodal::dataset::Split::Train)
        .map(|i| Clip { waveform: i.clip.waveform.clone(), video: if cfg.train.modalities.v { i.clip.video.clone() } else { None } })
        .collect();
    run_pretraining(&cfg, &clips, dir.path(), &PretrainOptions::default(), &Sequential).unwrap().state.params
}

fn probe(params: &ModelParams, cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> f64 {
    let pc = protocol_config(cfg, Protocol::Linear, Modality::S, data, seed);
    evaluate(params, &cfg.train, &pc, data, &Sequential).unwrap().accuracy
}

fn learning(trained: &mut Option<(ModelParams, ExperimentConfig, Dataset)>) -> Outcome {
    let t0 = Instant::now();
    let data = Dataset::synthetic(&LatentSpec::default(), 1, 400, PROBE_TEST_CLIPS).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.train.seed = 1;
    assert_eq!((cfg.train.batch_size, cfg.train.schedule.total_steps), (64, 2000));
    let params = pretrain_in_memory(&cfg, &data);
    let acc = probe(&params, &cfg, &data, 1);
    let secs = t0.elapsed().as_secs_f64();
    *trained = Some((params, cfg, data));
    check(
        acc >= 0.90 && secs < 15.0 * 60.0,
        format!("spectrogram probe accuracy {acc:.3} after 2000 SVW steps (chance 0.25), {:.1} min", secs / 60.0),
    )
}

/// Weak audio class tone against a loud per-clip distractor; video carries
/// the class through the blob position.
fn gap_spec() -> LatentSpec {
    LatentSpec { audio_cue: GAP_AUDIO_CUE, ..LatentSpec::default() }
}

const GAP_AUDIO_CUE: f64 = 0.2;
const GAP_STEPS: u64 = 1000;
const GAP_SEEDS: [u64; 3] = [1, 2, 3];
const GAP_MIN_POINTS: f64 = 5.0;

fn cross_modal_gap() -> Outcome {
    let t0 = Instant::now();
    let mut per_seed = Vec::new();
    for seed in GAP_SEEDS {
        let data = Dataset::synthetic(&gap_spec(), seed, 400, PROBE_TEST_CLIPS).unwrap();
        let mut accs = BTreeMap::new();
        for set in ["SW", "SVW"] {
            let mut cfg = ExperimentConfig::default();
            cfg.train.seed = seed;
            cfg.train.modalities = set.parse().unwrap();
            cfg.train.schedule.total_steps = GAP_STEPS;
            let params = pretrain_in_memory(&cfg, &data);
            accs.insert(set, probe(&params, &cfg, &data, seed));
        }
        per_seed.push((accs["SW"], accs["SVW"]));
    }
    let n = per_seed.len() as f64;
    let sw = per_seed.iter().map(|p| p.0).sum::<f64>() / n;
    let svw = per_seed.iter().map(|p| p.1).sum::<f64>() / n;
    let gap = 100.0 * (svw - sw);
    let detail: Vec<String> = per_seed.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    check(
        gap >= GAP_MIN_POINTS,
        format!(
            "mean probe accuracy SW {sw:.3} vs SVW {svw:.3}, gap {gap:+.1} points (per seed SW/SVW {}), {:.1} min",
            detail.join(" "),
            t0.elapsed().as_secs_f64() / 60.0
        ),
    )
}

fn frozen_contract(trained: &Option<(ModelParams, ExperimentConfig, Dataset)>) -> Outcome {
    let fallback;
    let (params, cfg, data) = match trained {
        Some((p, c, d)) => (p, c, d),
        None => {
            let cfg = ExperimentConfig::default();
            let data = Dataset::synthetic(&LatentSpec::default(), 1, 40, 20).unwrap();
            fallback = (TrainState::init(&cfg.train).unwrap().params, cfg, data);
            (&fallback.0, &fallback.1, &fallback.2)
        }
    };
    let before = params.checksum();
    let mut accs = Vec::new();
    for protocol in [Protocol::Linear, Protocol::Audioset] {
        let mut pc = protocol_config(cfg, protocol, Modality::S, data, 3);
        pc.classifier.epochs = pc.classifier.epochs.min(5);
        accs.push(evaluate(params, &cfg.train, &pc, data, &Sequential).unwrap().accuracy);
    }
    let after = params.checksum();
    let fe = LogMelFrontend::new(&cfg.train.dsp, 8000).unwrap();
    let rejected = match FrozenEncoder::new(params, &cfg.train.model, &fe, Modality::V) {
        Err(Error::UnsupportedModality(msg)) => msg.contains("only used during"),
        _ => false,
    };
    check(
        before == after && rejected,
        format!(
            "checksum {}... unchanged: {}; downstream accuracies {:.3}/{:.3}; video extraction rejected: {rejected}",
            &before[..12],
            before == after,
            accs[0],
            accs[1]
        ),
    )
}

// 7 ---------------------------------------------------------------------

fn mixup_machinery() -> Outcome {
    let cfg = MixupConfig::default();
    let mut rng = Rng::seed_from_u64(77);
    let draws = 1_000_000;
    let mut hist = [0usize; 100];
    let mut sum = 0.0;
    for _ in 0..draws {
        let a = sample_mixing_ratio(&cfg, &mut rng).unwrap();
        sum += a;
        hist[((a * 100.0) as usize).min(99)] += 1;
    }
    let mean = sum / draws as f64;
    let peak = hist.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
    let mode = (peak as f64 + 0.5) / 100.0;
    let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    let y = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    let self_mix = (0..100).all(|_| mixup(&x, &x, rng.random_range(0.0..=1.0)).unwrap().bitwise_eq(&x));
    let unit = mixup(&x, &y, 1.0).unwrap().bitwise_eq(&x);
    check(
        (mean - 5.0 / 7.0).abs() <= 0.002 && (0.75..=0.85).contains(&mode) && self_mix && unit,
        format!("mean {mean:.5} (5/7 = {:.5}), histogram mode {mode:.3}, mixup(x,x,a) = x: {self_mix}, a = 1 identity: {unit}", 5.0 / 7.0),
    )
}

// 8 ---------------------------------------------------------------------

fn schedule() -> Outcome {
    let s = Schedule::default();
    let (w, t, peak) = (s.warmup_steps, s.total_steps, s.peak_lr);
    let at = |k| lr_at_step(&s, k).unwrap();
    // one warmup increment on the left; the cosine is flat at its start
    let left = (at(w) - at(w - 1) - peak / w as f64).abs();
    let right = (at(w) - at(w + 1)).abs();
    check(
        at(0) == 0.0
            && (at(w) - 1e-4).abs() < 1e-12
            && (peak - 1e-4).abs() < 1e-18
            && at(t).abs() < 1e-12
            && left < 1e-12
            && right < 1e-12,
        format!("lr(0) = {}, lr({w}) = {:e}, lr({t}) = {:e}, jumps at warmup {left:.1e}/{right:.1e}", at(0), at(w), at(t)),
    )
}

// 9 ---------------------------------------------------------------------

fn determinism() -> Outcome {
    let t0 = Instant::now();
    let data = clips(&LatentSpec::default(), 9, 128);
    let mut cfg = ExperimentConfig::default();
    cfg.train.seed = 5;
    cfg.train.schedule = Schedule { warmup_steps: 20, total_steps: 100, peak_lr: 1e-3 };
    cfg.run.checkpoint_every = 50;
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let opts = PretrainOptions::default();
    run_pretraining(&cfg, &data, dirs[0].path(), &opts, &Sequential).unwrap();
    run_pretraining(&cfg, &data, dirs[1].path(), &opts, &Sequential).unwrap();
    let mid = checkpoint::path_for(&dirs[0].path().join("checkpoints"), 50);
    std::fs::create_dir_all(dirs[2].path()).unwrap();
    let resume = PretrainOptions { until: None, resume: Some(mid) };
    run_pretraining(&cfg, &data, dirs[2].path(), &resume, &Sequential).unwrap();
    let read = |i: usize| std::fs::read(checkpoint::path_for(&dirs[i].path().join("checkpoints"), 100)).unwrap();
    let (a, b, c) = (read(0), read(1), read(2));
    check(
        a == b && a == c,
        format!(
            "step-100 checkpoints ({} bytes): repeat run identical {}, resumed from step 50 identical {}, {:.1} s",
            a.len(),
            a == b,
            a == c,
            t0.elapsed().as_secs_f64()
        ),
    )
}

// -----------------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed: Duration = t0.elapsed();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n:>2} {name:<22} {tag}  {detail}  [{:.1} s]", elapsed.as_secs_f64());
    ok
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results = Vec::new();
    let mut trained = None;
    let mut go = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if on(n) {
            results.push(run(n, name, f));
        }
    };
    go(1, "gradient integrity", &mut gradient_integrity);
    go(2, "loss analytics", &mut loss_analytics);
    go(3, "metric oracles", &mut metric_oracles);
    go(4, "dsp oracle", &mut dsp_oracle);
    go(5, "learning happens", &mut || learning(&mut trained));
    go(6, "cross-modal gain", &mut cross_modal_gap);
    go(7, "mixup machinery", &mut mixup_machinery);
    go(8, "schedule", &mut schedule);
    go(9, "determinism", &mut determinism);
    go(10, "frozen evaluation", &mut || frozen_contract(&trained));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
