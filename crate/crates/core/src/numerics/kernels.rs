//! Raw compute kernels shared by graph forward and backward passes.
//!
//! All kernels operate on row-major `f64` slices. Backward kernels
//! accumulate into their output buffers so multiple gradient paths can
//! share one buffer; forward kernels overwrite.

/// out[m×n] = a[m×k] · b[k×n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_accum(a, b, m, k, n, out);
}

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub fn matmul_trans_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_trans_b_accum(a, b, m, k, n, out);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn matmul_trans_b_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
pub fn matmul_trans_a_accum(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub struct Conv2dDims {
    pub cin: usize,
    pub fh: usize,
    pub ft: usize,
    pub cout: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dDims {
    pub fn out_f(&self) -> usize {
        (self.fh + 2 * self.pad.0 - self.kf) / self.stride.0 + 1
    }
    pub fn out_t(&self) -> usize {
        (self.ft + 2 * self.pad.1 - self.kt) / self.stride.1 + 1
    }

    fn padded(&self, x: &[f64]) -> (Vec<f64>, usize, usize) {
        let (pf, pt) = self.pad;
        let (ph, pw) = (self.fh + 2 * pf, self.ft + 2 * pt);
        let mut buf = vec![0.0; self.cin * ph * pw];
        for c in 0..self.cin {
            for f in 0..self.fh {
                let src = &x[(c * self.fh + f) * self.ft..][..self.ft];
                let dst = &mut buf[(c * ph + f + pf) * pw + pt..][..self.ft];
                dst.copy_from_slice(src);
            }
        }
        (buf, ph, pw)
    }
}

/// 2-D convolution over a [Cin×F×T] input with a [Cout×Cin×KF×KT] kernel.
pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], d: &Conv2dDims, out: &mut [f64]) {
    let (xp, _ph, pw) = d.padded(x);
    let (of, ot) = (d.out_f(), d.out_t());
    let (sf, st) = d.stride;
    for co in 0..d.cout {
        out[co * of * ot..(co + 1) * of * ot].fill(b[co]);
        for ci in 0..d.cin {
            for kf in 0..d.kf {
                for kt in 0..d.kt {
                    let wv = w[((co * d.cin + ci) * d.kf + kf) * d.kt + kt];
                    for fo in 0..of {
                        let irow = &xp[(ci * (d.fh + 2 * d.pad.0) + fo * sf + kf) * pw + kt..];
                        let orow = &mut out[(co * of + fo) * ot..][..ot];
                        if st == 1 {
                            for (o, &v) in orow.iter_mut().zip(&irow[..ot]) {
                                *o += wv * v;
                            }
                        } else {
                            for (to, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[to * st];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates conv2d input/weight/bias gradients.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &Conv2dDims,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (xp, ph, pw) = d.padded(x);
    let mut dxp = vec![0.0; xp.len()];
    let (of, ot) = (d.out_f(), d.out_t());
    let (sf, st) = d.stride;
    for co in 0..d.cout {
        let gplane = &g[co * of * ot..(co + 1) * of * ot];
        db[co] += gplane.iter().sum::<f64>();
        for ci in 0..d.cin {
            for kf in 0..d.kf {
                for kt in 0..d.kt {
                    let widx = ((co * d.cin + ci) * d.kf + kf) * d.kt + kt;
                    let wv = w[widx];
                    let mut wg = 0.0;
                    for fo in 0..of {
                        let base = (ci * ph + fo * sf + kf) * pw + kt;
                        let grow = &gplane[fo * ot..(fo + 1) * ot];
                        if st == 1 {
                            let irow = &xp[base..base + ot];
                            let drow = &mut dxp[base..base + ot];
                            for ((&gv, &iv), dv) in grow.iter().zip(irow).zip(drow) {
                                wg += gv * iv;
                                *dv += gv * wv;
                            }
                        } else {
                            for (to, &gv) in grow.iter().enumerate() {
                                wg += gv * xp[base + to * st];
                                dxp[base + to * st] += gv * wv;
                            }
                        }
                    }
                    dw[widx] += wg;
                }
            }
        }
    }
    // crop padding off the input gradient
    let (pf, pt) = d.pad;
    for c in 0..d.cin {
        for f in 0..d.fh {
            let src = &dxp[(c * ph + f + pf) * pw + pt..][..d.ft];
            let dst = &mut dx[(c * d.fh + f) * d.ft..][..d.ft];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
}

/// Depthwise temporal convolution over [T×D]; kernel [K×D], "same" padding,
/// stride 1, K odd.
pub fn depthwise_conv1d(x: &[f64], w: &[f64], b: &[f64], t: usize, dch: usize, k: usize, out: &mut [f64]) {
    let pad = (k - 1) / 2;
    for ti in 0..t {
        let orow = &mut out[ti * dch..(ti + 1) * dch];
        orow.copy_from_slice(b);
        for kk in 0..k {
            let src = ti + kk;
            if src < pad || src - pad >= t {
                continue;
            }
            let xrow = &x[(src - pad) * dch..(src - pad + 1) * dch];
            let wrow = &w[kk * dch..(kk + 1) * dch];
            for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                *o += xv * wv;
            }
        }
    }
}

pub fn depthwise_conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    t: usize,
    dch: usize,
    k: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let pad = (k - 1) / 2;
    for ti in 0..t {
        let grow = &g[ti * dch..(ti + 1) * dch];
        for (o, &gv) in db.iter_mut().zip(grow) {
            *o += gv;
        }
        for kk in 0..k {
            let src = ti + kk;
            if src < pad || src - pad >= t {
                continue;
            }
            let xi = src - pad;
            let xrow = &x[xi * dch..(xi + 1) * dch];
            let wrow = &w[kk * dch..(kk + 1) * dch];
            let dxrow = &mut dx[xi * dch..(xi + 1) * dch];
            let dwrow = &mut dw[kk * dch..(kk + 1) * dch];
            for i in 0..dch {
                dxrow[i] += grow[i] * wrow[i];
                dwrow[i] += grow[i] * xrow[i];
            }
        }
    }
}

/// Endpoint-aligned linear interpolation along rows: [Tin×D] → [Tin·factor×D].
/// Output row j samples source position j·(Tin−1)/(Tout−1); a single source
/// row broadcasts.
pub fn upsample_rows(x: &[f64], tin: usize, dch: usize, factor: usize, out: &mut [f64]) {
    let tout = tin * factor;
    for j in 0..tout {
        let orow = &mut out[j * dch..(j + 1) * dch];
        if tin == 1 {
            orow.copy_from_slice(&x[..dch]);
            continue;
        }
        let pos = j as f64 * (tin - 1) as f64 / (tout - 1) as f64;
        let i0 = (pos.floor() as usize).min(tin - 1);
        let i1 = (i0 + 1).min(tin - 1);
        let wfrac = pos - i0 as f64;
        let r0 = &x[i0 * dch..(i0 + 1) * dch];
        let r1 = &x[i1 * dch..(i1 + 1) * dch];
        for ((o, &a), &b) in orow.iter_mut().zip(r0).zip(r1) {
            *o = (1.0 - wfrac) * a + wfrac * b;
        }
    }
}

pub fn upsample_rows_backward(g: &[f64], tin: usize, dch: usize, factor: usize, dx: &mut [f64]) {
    let tout = tin * factor;
    for j in 0..tout {
        let grow = &g[j * dch..(j + 1) * dch];
        if tin == 1 {
            for (o, &gv) in dx[..dch].iter_mut().zip(grow) {
                *o += gv;
            }
            continue;
        }
        let pos = j as f64 * (tin - 1) as f64 / (tout - 1) as f64;
        let i0 = (pos.floor() as usize).min(tin - 1);
        let i1 = (i0 + 1).min(tin - 1);
        let wfrac = pos - i0 as f64;
        for (i, &gv) in grow.iter().enumerate() {
            dx[i0 * dch + i] += (1.0 - wfrac) * gv;
            dx[i1 * dch + i] += wfrac * gv;
        }
    }
}

/// Per-row normalization of [R×C] with per-column affine parameters.
pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..cols {
            or[i] = gamma[i] * (xr[i] - mean) * inv + beta[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward(
    x: &[f64],
    gamma: &[f64],
    g: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let cf = cols as f64;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();

        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..cols {
            let xhat = (xr[i] - mean) * inv;
            let dxhat = gr[i] * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[i] += gr[i] * xhat;
            dbeta[i] += gr[i];
        }
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for i in 0..cols {
            let xhat = (xr[i] - mean) * inv;
            let dxhat = gr[i] * gamma[i];
            dxr[i] += inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
        }
    }
}

/// Normalizes a [C×F×T] map across channels at every (f, t) position, with
/// per-channel affine parameters.
pub fn channel_norm(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, spatial: usize, eps: f64, out: &mut [f64]) {
    let cf = c as f64;
    for s in 0..spatial {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += x[ch * spatial + s];
        }
        mean /= cf;
        let mut var = 0.0;
        for ch in 0..c {
            let d = x[ch * spatial + s] - mean;
            var += d * d;
        }
        var /= cf;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in 0..c {
            out[ch * spatial + s] = gamma[ch] * (x[ch * spatial + s] - mean) * inv + beta[ch];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward(
    x: &[f64],
    gamma: &[f64],
    g: &[f64],
    c: usize,
    spatial: usize,
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let cf = c as f64;
    for s in 0..spatial {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += x[ch * spatial + s];
        }
        mean /= cf;
        let mut var = 0.0;
        for ch in 0..c {
            let d = x[ch * spatial + s] - mean;
            var += d * d;
        }
        var /= cf;
        let inv = 1.0 / (var + eps).sqrt();

        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let xhat = (x[ch * spatial + s] - mean) * inv;
            let dxhat = g[ch * spatial + s] * gamma[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[ch] += g[ch * spatial + s] * xhat;
            dbeta[ch] += g[ch * spatial + s];
        }
        for ch in 0..c {
            let xhat = (x[ch * spatial + s] - mean) * inv;
            let dxhat = g[ch * spatial + s] * gamma[ch];
            dx[ch * spatial + s] += inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
        }
    }
}

/// Row-wise softmax over visible entries only. Rows with nothing visible
/// come out all-zero.
pub fn masked_softmax_rows(x: &[f64], allow: &[bool], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ar = &allow[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for i in 0..cols {
            if ar[i] && xr[i] > mx {
                mx = xr[i];
            }
        }
        if mx == f64::NEG_INFINITY {
            or.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for i in 0..cols {
            if ar[i] {
                let e = (xr[i] - mx).exp();
                or[i] = e;
                sum += e;
            } else {
                or[i] = 0.0;
            }
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
}

/// dx += y ∘ (g − Σ g∘y) per row, where y is the forward output.
pub fn masked_softmax_rows_backward(y: &[f64], g: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        let dr = &mut dx[r * cols..(r + 1) * cols];
        for i in 0..cols {
            dr[i] += yr[i] * (gr[i] - dot);
        }
    }
}
