//! Slice-level kernels. All products accumulate into `out` (`out += ...`)
//! so backward passes can add contributions in place.

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// Dot product with four fixed accumulators (deterministic order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output length of a valid-mode convolution along one axis.
#[inline]
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Unfolds `x[c_in, len]` into `cols[c_in*k, out_len]`.
pub fn im2col_1d(x: &[f64], c_in: usize, len: usize, k: usize, stride: usize, cols: &mut [f64]) {
    let out_len = conv_out_len(len, k, stride);
    for c in 0..c_in {
        let xrow = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let dst = &mut cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = xrow[t * stride + kk];
            }
        }
    }
}

/// Adjoint of [`im2col_1d`]: scatters `cols` back, accumulating into `dx`.
pub fn col2im_1d(cols: &[f64], c_in: usize, len: usize, k: usize, stride: usize, dx: &mut [f64]) {
    let out_len = conv_out_len(len, k, stride);
    for c in 0..c_in {
        let xrow = &mut dx[c * len..(c + 1) * len];
        for kk in 0..k {
            let src = &cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, &s) in src.iter().enumerate() {
                xrow[t * stride + kk] += s;
            }
        }
    }
}

/// Unfolds `x[c_in, h, w]` into `cols[c_in*kh*kw, oh*ow]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col_2d(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_len(h, kh, stride);
    let ow = conv_out_len(w, kw, stride);
    let plane = oh * ow;
    for c in 0..c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                for oy in 0..oh {
                    let src = &xc[(oy * stride + ky) * w..];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        *d = src[ox * stride + kx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_2d`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_2d(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_len(h, kh, stride);
    let ow = conv_out_len(w, kw, stride);
    let plane = oh * ow;
    for c in 0..c_in {
        let xc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let src = &cols[r * plane..(r + 1) * plane];
                for oy in 0..oh {
                    let base = (oy * stride + ky) * w;
                    for ox in 0..ow {
                        xc[base + ox * stride + kx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
