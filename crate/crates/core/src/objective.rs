//! Pairwise contrastive loss with intra- and inter-modality negatives.
//!
//! For embeddings `Za`, `Zb` (unit rows) the term for anchor `i` is
//! `−log e^{s_ab(i,i)} / (Σ_{j≠i} e^{s_aa(i,j)} + Σ_j e^{s_ab(i,j)})` with
//! `s = z·z'/τ`. A pair loss sums both directions over the batch; the total
//! sums the pairs of the configured modalities.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffmath::{ops, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::modality::{Modality, PerModality};

/// Allowed deviation of an embedding row norm from one.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Divide the summed loss by the batch size before differentiating.
    /// Logged values are always the plain sums.
    #[serde(default)]
    pub mean_reduction: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.1, mean_reduction: false }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_vs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_vw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_sw: Option<f64>,
    pub total: f64,
    pub temperature: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_vs, self.l_vw, self.l_sw].iter().flatten().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// The modality pairs in loss order.
pub const PAIRS: [(Modality, Modality); 3] =
    [(Modality::V, Modality::S), (Modality::V, Modality::W), (Modality::S, Modality::W)];

fn check_unit_rows(z: &Tensor) -> Result<(usize, usize)> {
    let [n, e] = *z.shape() else {
        return Err(Error::InvalidShape(format!("embeddings must be [N,E], got {:?}", z.shape())));
    };
    if n < 2 {
        return Err(Error::InvalidBatch(format!("contrastive loss needs N >= 2, got {n}")));
    }
    for (i, row) in z.data().chunks_exact(e).enumerate() {
        let norm = math::sqrt(row.iter().map(|v| v * v).sum());
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::ContractViolation(format!("embedding row {i} has norm {norm}")));
        }
    }
    Ok((n, e))
}

fn check_pair(za: &Tensor, zb: &Tensor) -> Result<usize> {
    let (n, e) = check_unit_rows(za)?;
    let (m, f) = check_unit_rows(zb)?;
    if n != m {
        return Err(Error::InvalidBatch(format!("batch sizes differ: {n} vs {m}")));
    }
    if e != f {
        return Err(Error::InvalidShape(format!("embedding widths differ: {e} vs {f}")));
    }
    Ok(n)
}

fn check_tau(tau: f64) -> Result<()> {
    ContrastiveConfig { temperature: tau, mean_reduction: false }.validate()
}

/// `L_i^{a→b}` evaluated directly.
pub fn directional_loss(za: &Tensor, zb: &Tensor, i: usize, tau: f64) -> Result<f64> {
    let n = check_pair(za, zb)?;
    check_tau(tau)?;
    if i >= n {
        return Err(Error::InvalidBatch(format!("anchor {i} outside batch of {n}")));
    }
    let e = za.shape()[1];
    let a = za.data();
    let b = zb.data();
    let ai = &a[i * e..(i + 1) * e];
    let sim = |r: &[f64]| ai.iter().zip(r).map(|(p, q)| p * q).sum::<f64>() / tau;
    let mut logits = Vec::with_capacity(2 * n - 1);
    for j in 0..n {
        if j != i {
            logits.push(sim(&a[j * e..(j + 1) * e]));
        }
    }
    let inter_start = logits.len();
    for j in 0..n {
        logits.push(sim(&b[j * e..(j + 1) * e]));
    }
    Ok(ops::logsumexp_slice(&logits) - logits[inter_start + i])
}

/// `L^{ab} = Σ_i (L_i^{a→b} + L_i^{b→a})`.
pub fn pairwise_loss(za: &Tensor, zb: &Tensor, tau: f64) -> Result<f64> {
    let n = check_pair(za, zb)?;
    let mut total = 0.0;
    for i in 0..n {
        total += directional_loss(za, zb, i, tau)? + directional_loss(zb, za, i, tau)?;
    }
    Ok(total)
}

/// Loss over whichever modalities are present; absent pairs are omitted.
pub fn total_loss(z: &PerModality<Tensor>, tau: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = z.as_ref().map(|_, t| tape.constant(t.clone()));
    let (_, b) = tape_total_loss(&mut tape, &vars, tau)?;
    Ok(b)
}

/// Loss and its gradient with respect to every present embedding matrix.
/// With `mean_reduction` the gradients are divided by the batch size.
pub fn loss_and_grads(z: &PerModality<Tensor>, cfg: &ContrastiveConfig) -> Result<(LossBreakdown, PerModality<Tensor>)> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let vars = z.as_ref().map(|_, t| tape.leaf(t.clone().with_requires_grad(true)));
    let (loss, breakdown) = tape_total_loss(&mut tape, &vars, cfg.temperature)?;
    let n = tape.value(loss).numel();
    debug_assert_eq!(n, 1);
    let batch = z.s.as_ref().or(z.w.as_ref()).or(z.v.as_ref()).map_or(1, |t| t.shape()[0]);
    let seed = if cfg.mean_reduction { 1.0 / batch as f64 } else { 1.0 };
    let grads = tape.backward_seeded(&[(loss, Tensor::scalar(seed))])?;
    let out = vars.map(|_, v| grads.get(v).cloned().expect("leaf reached by loss"));
    Ok((breakdown, out))
}

/// Records `L^{ab}` on a tape.
pub fn tape_pairwise_loss(tape: &mut Tape, za: Var, zb: Var, tau: f64) -> Result<Var> {
    let n = check_pair(tape.value(za), tape.value(zb))?;
    check_tau(tau)?;
    let inv = 1.0 / tau;
    let mut terms = Vec::with_capacity(2 * n);
    for (a, b) in [(za, zb), (zb, za)] {
        let aa = tape.matmul_nt(a, a)?;
        let saa = tape.scale(aa, inv);
        let ab = tape.matmul_nt(a, b)?;
        let sab = tape.scale(ab, inv);
        for i in 0..n {
            let intra_row = tape.row(saa, i)?;
            let intra = tape.exclude(intra_row, i)?;
            let inter = tape.row(sab, i)?;
            let logits = tape.concat(&[intra, inter])?;
            let lse = tape.logsumexp(logits);
            let pos = tape.element(inter, i)?;
            terms.push(tape.sub(lse, pos)?);
        }
    }
    tape.add_all(&terms)
}

/// Records the total loss over the present modalities.
pub fn tape_total_loss(tape: &mut Tape, z: &PerModality<Var>, tau: f64) -> Result<(Var, LossBreakdown)> {
    let present = z.present();
    if present.len() < 2 {
        return Err(Error::InvalidBatch(format!("need two modalities, got {present}")));
    }
    let mut breakdown = LossBreakdown { l_vs: None, l_vw: None, l_sw: None, total: 0.0, temperature: tau };
    let mut terms = Vec::with_capacity(3);
    for (a, b) in PAIRS {
        let (Some(&va), Some(&vb)) = (z.get(a), z.get(b)) else { continue };
        let l = tape_pairwise_loss(tape, va, vb, tau)?;
        let value = tape.value(l).item()?;
        *match (a, b) {
            (Modality::V, Modality::S) => &mut breakdown.l_vs,
            (Modality::V, Modality::W) => &mut breakdown.l_vw,
            _ => &mut breakdown.l_sw,
        } = Some(value);
        terms.push(l);
    }
    let total = tape.add_all(&terms)?;
    breakdown.total = tape.value(total).item()?;
    Ok((total, breakdown))
}

/// `2N·ln(2N−1)`: the pair loss when all similarities are equal.
pub fn uniform_pair_loss(n: usize) -> f64 {
    2.0 * n as f64 * math::ln(2.0 * n as f64 - 1.0)
}
