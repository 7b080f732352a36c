//! Pure forward kernels on [`Tensor`]s. The [`Tape`](super::Tape) records
//! these and supplies their adjoints.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, conv_out_len};
use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

fn shape_err(msg: alloc::string::String) -> Error {
    Error::InvalidShape(msg)
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(shape_err(format!("{what}: expected rank-2, got {s:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err(format!("matmul inner extents {k} != {k2}")));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a[m,k]`, `b[n,k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, k2) = dims2(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(shape_err(format!("matmul_nt inner extents {k} != {k2}")));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nt(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn conv1d_dims(x: &Tensor, w: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, len) = dims2(x, "conv1d input")?;
    let [c_out, wc_in, k] = *w.shape() else {
        return Err(shape_err(format!("conv1d weight: expected rank-3, got {:?}", w.shape())));
    };
    if wc_in != c_in {
        return Err(shape_err(format!("conv1d channels: input {c_in}, weight {wc_in}")));
    }
    if stride == 0 {
        return Err(shape_err("conv1d stride must be >= 1".into()));
    }
    if k > len {
        return Err(shape_err(format!("conv1d kernel {k} longer than input {len}")));
    }
    Ok((c_in, len, c_out, k, conv_out_len(len, k, stride)))
}

/// Valid-mode 1-D cross-correlation: `x[C_in,L] ⋆ w[C_out,C_in,K] -> [C_out,L']`.
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, len, c_out, k, out_len) = conv1d_dims(x, w, stride)?;
    let mut cols = vec![0.0; c_in * k * out_len];
    kernels::im2col_1d(x.data(), c_in, len, k, stride, &mut cols);
    let mut out = vec![0.0; c_out * out_len];
    kernels::gemm_nn(c_out, c_in * k, out_len, w.data(), &cols, &mut out);
    Ok(Tensor::from_parts(vec![c_out, out_len], out))
}

pub(crate) struct Conv2dDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_dims(x: &Tensor, w: &Tensor, stride: usize) -> Result<Conv2dDims> {
    let [c_in, h, wd] = *x.shape() else {
        return Err(shape_err(format!("conv2d input: expected rank-3, got {:?}", x.shape())));
    };
    let [c_out, wc_in, kh, kw] = *w.shape() else {
        return Err(shape_err(format!("conv2d weight: expected rank-4, got {:?}", w.shape())));
    };
    if wc_in != c_in {
        return Err(shape_err(format!("conv2d channels: input {c_in}, weight {wc_in}")));
    }
    if stride == 0 {
        return Err(shape_err("conv2d stride must be >= 1".into()));
    }
    if kh > h || kw > wd {
        return Err(shape_err(format!("conv2d kernel {kh}x{kw} larger than input {h}x{wd}")));
    }
    Ok(Conv2dDims {
        c_in,
        h,
        w: wd,
        c_out,
        kh,
        kw,
        oh: conv_out_len(h, kh, stride),
        ow: conv_out_len(wd, kw, stride),
    })
}

/// Valid-mode 2-D cross-correlation: `x[C_in,H,W] ⋆ w[C_out,C_in,Kh,Kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let d = conv2d_dims(x, w, stride)?;
    let rows = d.c_in * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let mut cols = vec![0.0; rows * plane];
    kernels::im2col_2d(x.data(), d.c_in, d.h, d.w, d.kh, d.kw, stride, &mut cols);
    let mut out = vec![0.0; d.c_out * plane];
    kernels::gemm_nn(d.c_out, rows, plane, w.data(), &cols, &mut out);
    Ok(Tensor::from_parts(vec![d.c_out, d.oh, d.ow], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Per-column batch mean and biased variance of `x[N,D]`.
pub fn batch_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = dims2(x, "batch moments")?;
    let xs = x.data();
    let mut mean = vec![0.0; d];
    for row in xs.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in xs.chunks_exact(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    Ok((mean, var))
}

/// Saved forward quantities for the batch-norm adjoint.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch normalization of `x[N,D]`.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, d) = dims2(x, "batch_norm")?;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("batch norm needs N >= 2, got {n}")));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(format!(
            "batch_norm affine params {:?}/{:?} for {d} features",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (mean, var) = batch_moments(x)?;
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    let (g, b) = (gamma.data(), beta.data());
    for (r, row) in x.data().chunks_exact(d).enumerate() {
        for j in 0..d {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat[r * d + j] = h;
            out[r * d + j] = g[j] * h + b[j];
        }
    }
    Ok((Tensor::from_parts(vec![n, d], out), BatchNormCache { xhat, inv_std }))
}

/// Euclidean normalization. A zero vector is an error, not a silent epsilon.
pub fn l2_normalize(x: &Tensor) -> Result<(Tensor, f64)> {
    let norm = math::sqrt(kernels::dot(x.data(), x.data()));
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateInput(format!("cannot normalize vector with norm {norm}")));
    }
    Ok((x.map(|v| v / norm), norm))
}

/// `log Σ exp(x)` via the max shift.
pub fn logsumexp(x: &Tensor) -> f64 {
    logsumexp_slice(x.data())
}

pub(crate) fn logsumexp_slice(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = x.iter().map(|&v| math::exp(v - m)).sum();
    m + math::ln(s)
}

pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp_slice(x);
    x.iter().map(|&v| math::exp(v - lse)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2).unwrap(), &a).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matches!(matmul(&a, &t(&[3, 1], &[1.0; 3])), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn conv1d_hand_cases() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = conv1d(&x, &t(&[1, 1, 2], &[1.0, 1.0]), 1).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        let id = conv1d(&x, &t(&[1, 1, 1], &[1.0]), 1).unwrap();
        assert_eq!(id.data(), x.data());
        assert!(conv1d(&x, &t(&[1, 1, 4], &[1.0; 4]), 1).is_err());
        // stride: L' = floor((L-K)/s)+1
        let x = t(&[1, 7], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = conv1d(&x, &t(&[1, 1, 2], &[1.0, 0.0]), 3).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn conv2d_hand_cases() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), 1).unwrap().data(), x.data());
        assert_eq!(conv2d(&x, &t(&[1, 1, 2, 2], &[1.0; 4]), 1).unwrap().data(), &[10.0]);
        assert!(conv2d(&x, &t(&[1, 1, 3, 1], &[1.0; 3]), 1).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let pos = t(&[2], &[0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn batch_norm_two_point() {
        let x = t(&[2, 1], &[1.0, 3.0]);
        let (y, _) = batch_norm_train(&x, &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let one = t(&[1, 1], &[1.0]);
        assert!(matches!(
            batch_norm_train(&one, &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-5),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn batch_norm_zero_mean_columns() {
        let x = t(&[4, 2], &[1.0, -3.0, 2.5, 0.0, -7.0, 2.0, 0.3, 9.0]);
        let (y, _) = batch_norm_train(&x, &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1e-5).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| y.data()[i * 2 + j]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let (z, _) = l2_normalize(&t(&[2], &[3.0, 4.0])).unwrap();
        assert!((z.data()[0] - 0.6).abs() < 1e-15 && (z.data()[1] - 0.8).abs() < 1e-15);
        let u = t(&[3], &[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&u).unwrap().0, u);
        assert!(matches!(l2_normalize(&t(&[2], &[0.0, 0.0])), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&t(&[2], &[0.0, 0.0])) - core::f64::consts::LN_2).abs() < 1e-15);
        let big = logsumexp(&t(&[2], &[1000.0, 1000.0]));
        assert!((big - (1000.0 + core::f64::consts::LN_2)).abs() < 1e-12);
    }
}
