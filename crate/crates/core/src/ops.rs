//! Forward and backward kernels for the closed op vocabulary.
//!
//! Every kernel is a pure function of its inputs. Reductions run in a fixed
//! sequential order so repeated calls are bit-identical.

use crate::error::{Result, ScsmError};
use crate::tensor::{numel, strides, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// dense matrix kernels (row-major, accumulate into `c`)

/// Narrow outputs are computed as row dot products over a transposed copy.
const NARROW: usize = 8;

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n < NARROW && k >= NARROW {
        return dot_rows(a, &transpose(b, k, n), c, m, k, n);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n < NARROW && k >= NARROW {
        return dot_rows(&transpose(a, k, m), &transpose(b, k, n), c, m, k, n);
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k < NARROW && n >= NARROW {
        let bt = transpose(b, n, k);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                for (cv, &bv) in crow.iter_mut().zip(&bt[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
        return;
    }
    dot_rows(a, b, c, m, k, n)
}

/// Four-lane dot product; the fixed lane order keeps results reproducible.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            lanes[l] += a[l] * b[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn dot_rows(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` when viewed with shape `out` (zero on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(out: &[usize], a_st: &[usize], b_st: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; n];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            ia += a_st[ax];
            ib += b_st[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= a_st[ax] * idx[ax];
            ib -= b_st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

pub fn binary_forward(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| ScsmError::dim(format!("{op:?}"), a.shape(), b.shape()))?;
    let mut out = vec![0.0; numel(&out_shape)];
    if out_shape == a.shape() && a.shape().ends_with(b.shape()) {
        let bl = b.numel();
        for (chunk, ac) in out.chunks_mut(bl).zip(a.data().chunks(bl)) {
            for ((o, &x), &y) in chunk.iter_mut().zip(ac).zip(b.data()) {
                *o = f(x, y);
            }
        }
    } else {
        let a_st = broadcast_strides(a.shape(), &out_shape);
        let b_st = broadcast_strides(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &a_st, &b_st, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    }
    Tensor::new(&out_shape, out)
}

/// Gradients of a broadcast binary op, reduced back onto the operand shapes.
pub fn binary_backward(op: BinaryOp, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let a_st = broadcast_strides(a.shape(), g.shape());
    let b_st = broadcast_strides(b.shape(), g.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    {
        let (gam, gbm) = (ga.data_mut(), gb.data_mut());
        for_each_broadcast(g.shape(), &a_st, &b_st, |o, ia, ib| match op {
            BinaryOp::Add => {
                gam[ia] += gd[o];
                gbm[ib] += gd[o];
            }
            BinaryOp::Mul => {
                gam[ia] += gd[o] * bd[ib];
                gbm[ib] += gd[o] * ad[ia];
            }
        });
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a batch offset, b batch offset) per output batch element; `None` when
    /// `b` is a plain matrix and `a` can be flattened.
    pairs: Option<Vec<(usize, usize)>>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(ScsmError::dim("matmul (rank < 2)", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(ScsmError::dim("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    if bb.is_empty() {
        let mut out_shape = ba.to_vec();
        out_shape.extend([m, n]);
        return Ok(MatmulPlan { m, k, n, out_shape, pairs: None });
    }
    let batch = broadcast_shape(ba, bb).ok_or_else(|| ScsmError::dim("matmul batch", a, b))?;
    let a_st = broadcast_strides(ba, &batch);
    let b_st = broadcast_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    if batch.is_empty() {
        pairs.push((0, 0));
    } else {
        for_each_broadcast(&batch, &a_st, &b_st, |_, ia, ib| pairs.push((ia * m * k, ib * k * n)));
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan { m, k, n, out_shape, pairs: Some(pairs) })
}

pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; numel(&plan.out_shape)];
    match &plan.pairs {
        None => gemm_nn(a.data(), b.data(), &mut out, a.numel() / k, k, n),
        Some(pairs) => {
            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                gemm_nn(
                    &a.data()[ia..ia + m * k],
                    &b.data()[ib..ib + k * n],
                    &mut out[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
    Tensor::new(&plan.out_shape, out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let plan = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    match &plan.pairs {
        None => {
            let rows = a.numel() / k;
            gemm_nt(g.data(), b.data(), ga.data_mut(), rows, n, k);
            gemm_tn(a.data(), g.data(), gb.data_mut(), k, rows, n);
        }
        Some(pairs) => {
            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                let gs = &g.data()[o * m * n..(o + 1) * m * n];
                gemm_nt(gs, &b.data()[ib..ib + k * n], &mut ga.data_mut()[ia..ia + m * k], m, n, k);
                gemm_tn(&a.data()[ia..ia + m * k], gs, &mut gb.data_mut()[ib..ib + k * n], k, m, n);
            }
        }
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// convolutions

fn expect_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        let want = vec![0; rank];
        return Err(ScsmError::dim(format!("{op} (rank)"), t.shape(), &want));
    }
    Ok(())
}

/// Per-pixel linear map over channels: `x[B,C,H,W]`, `w[Co,C]`, `bias[Co]`.
pub fn conv1x1_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("conv_1x1", x, 4)?;
    expect_rank("conv_1x1 weight", w, 2)?;
    let [bsz, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = w.shape()[0];
    if w.shape()[1] != c || bias.shape() != [co] {
        return Err(ScsmError::dim("conv_1x1", x.shape(), w.shape()));
    }
    let hw = h * wd;
    let mut out = vec![0.0; bsz * co * hw];
    for b in 0..bsz {
        let ob = &mut out[b * co * hw..(b + 1) * co * hw];
        for (o, row) in ob.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[o]);
        }
        gemm_nn(w.data(), &x.data()[b * c * hw..(b + 1) * c * hw], ob, co, c, hw);
    }
    Tensor::new(&[bsz, co, h, wd], out)
}

pub fn conv1x1_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [bsz, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = w.shape()[0];
    let hw = h * wd;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gbias = Tensor::zeros(&[co]);
    for b in 0..bsz {
        let gs = &g.data()[b * co * hw..(b + 1) * co * hw];
        gemm_nt(gs, &x.data()[b * c * hw..(b + 1) * c * hw], gw.data_mut(), co, hw, c);
        gemm_tn(w.data(), gs, &mut gx.data_mut()[b * c * hw..(b + 1) * c * hw], c, co, hw);
        for (o, row) in gs.chunks(hw).enumerate() {
            gbias.data_mut()[o] += row.iter().sum::<f64>();
        }
    }
    (gx, gw, gbias)
}

struct Conv2dGeom {
    bsz: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv2d_geom(x: &Tensor, w: &Tensor, stride: usize) -> Result<Conv2dGeom> {
    expect_rank("conv2d", x, 4)?;
    expect_rank("conv2d weight", w, 4)?;
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    if w.shape()[1] != x.shape()[1] || kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
        return Err(ScsmError::dim("conv2d", x.shape(), w.shape()));
    }
    let pad = kh / 2;
    let (h, wd) = (x.shape()[2], x.shape()[3]);
    Ok(Conv2dGeom {
        bsz: x.shape()[0],
        ci: x.shape()[1],
        h,
        w: wd,
        co: w.shape()[0],
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * (kw / 2) - kw) / stride + 1,
        stride,
        pad,
    })
}

fn im2col(g: &Conv2dGeom, x: &[f64], cols: &mut [f64]) {
    let hw_o = g.ho * g.wo;
    let padw = g.kw / 2;
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw_o;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - padw as isize;
                        cols[row + oy * g.wo + ox] =
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Conv2dGeom, cols: &[f64], x: &mut [f64]) {
    let hw_o = g.ho * g.wo;
    let padw = g.kw / 2;
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw_o;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - padw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 2-D convolution with odd kernel and integer stride.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv2d_geom(x, w, stride)?;
    if bias.shape() != [g.co] {
        return Err(ScsmError::dim("conv2d bias", bias.shape(), &[g.co]));
    }
    let ck = g.ci * g.kh * g.kw;
    let hw_o = g.ho * g.wo;
    let in_sz = g.ci * g.h * g.w;
    let mut cols = vec![0.0; ck * hw_o];
    let mut out = vec![0.0; g.bsz * g.co * hw_o];
    for b in 0..g.bsz {
        im2col(&g, &x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
        let ob = &mut out[b * g.co * hw_o..(b + 1) * g.co * hw_o];
        for (o, row) in ob.chunks_mut(hw_o).enumerate() {
            row.fill(bias.data()[o]);
        }
        gemm_nn(w.data(), &cols, ob, g.co, ck, hw_o);
    }
    Tensor::new(&[g.bsz, g.co, g.ho, g.wo], out)
}

/// Returns `(gx, gw, gbias)`; `gx` is skipped (zeros, not computed) when `need_gx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    gout: &Tensor,
    need_gx: bool,
    need_gw: bool,
) -> (Tensor, Tensor, Tensor) {
    let g = conv2d_geom(x, w, stride).expect("validated in forward");
    let ck = g.ci * g.kh * g.kw;
    let hw_o = g.ho * g.wo;
    let in_sz = g.ci * g.h * g.w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gbias = Tensor::zeros(&[g.co]);
    let mut cols = vec![0.0; ck * hw_o];
    for b in 0..g.bsz {
        let gs = &gout.data()[b * g.co * hw_o..(b + 1) * g.co * hw_o];
        if need_gw {
            im2col(&g, &x.data()[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm_nt(gs, &cols, gw.data_mut(), g.co, hw_o, ck);
            for (o, row) in gs.chunks(hw_o).enumerate() {
                gbias.data_mut()[o] += row.iter().sum::<f64>();
            }
        }
        if need_gx {
            cols.fill(0.0);
            gemm_tn(w.data(), gs, &mut cols, ck, g.co, hw_o);
            col2im(&g, &cols, &mut gx.data_mut()[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gw, gbias)
}

/// Causal depthwise convolution along the sequence axis of `x[B,L,D]` with
/// `kernel[D,k]`; `k-1` zeros are padded on the left, so tap `k-1` multiplies
/// the current position.
pub fn conv1d_seq_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    expect_rank("conv1d_depthwise_seq", x, 3)?;
    expect_rank("conv1d_depthwise_seq kernel", kernel, 2)?;
    let [bsz, l, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if kernel.shape()[0] != d {
        return Err(ScsmError::dim("conv1d_depthwise_seq", x.shape(), kernel.shape()));
    }
    let k = kernel.shape()[1];
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; x.numel()];
    for b in 0..bsz {
        for t in 0..l {
            let o = &mut out[(b * l + t) * d..(b * l + t + 1) * d];
            for j in 0..k {
                let src = t as isize + j as isize - (k as isize - 1);
                if src < 0 {
                    continue;
                }
                let xs = &xd[(b * l + src as usize) * d..(b * l + src as usize + 1) * d];
                for (dd, ov) in o.iter_mut().enumerate() {
                    *ov += kd[dd * k + j] * xs[dd];
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn conv1d_seq_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let [bsz, l, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let k = kernel.shape()[1];
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    for b in 0..bsz {
        for t in 0..l {
            let go = &gd[(b * l + t) * d..(b * l + t + 1) * d];
            for j in 0..k {
                let src = t as isize + j as isize - (k as isize - 1);
                if src < 0 {
                    continue;
                }
                let base = (b * l + src as usize) * d;
                for dd in 0..d {
                    gx.data_mut()[base + dd] += kd[dd * k + j] * go[dd];
                    gk.data_mut()[dd * k + j] += xd[base + dd] * go[dd];
                }
            }
        }
    }
    (gx, gk)
}

// ---------------------------------------------------------------------------
// elementwise activations and normalisation

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

pub fn softmax_forward(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().expect("rank >= 1");
    let mut gx = Tensor::zeros(y.shape());
    for ((gxr, yr), gr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

/// Returns `(y, xhat, rstd)` with `xhat` normalised before the affine map.
pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let n = *x.shape().last().expect("rank >= 1");
    if n < 2 {
        return Err(ScsmError::arg("layer_norm needs a last dimension of at least 2"));
    }
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(ScsmError::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstds = Vec::with_capacity(x.numel() / n);
    for (xr, yr) in xhat.data_mut().chunks_mut(n).zip(y.data_mut().chunks_mut(n)) {
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (i, (xv, yv)) in xr.iter_mut().zip(yr.iter_mut()).enumerate() {
            *xv = (*xv - mean) * rstd;
            *yv = *xv * gamma.data()[i] + beta.data()[i];
        }
        rstds.push(rstd);
    }
    Ok((y, xhat, rstds))
}

pub fn layer_norm_backward(xhat: &Tensor, rstd: &[f64], gamma: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = *xhat.shape().last().expect("rank >= 1");
    let mut gx = Tensor::zeros(xhat.shape());
    let mut gg = Tensor::zeros(&[n]);
    let mut gb = Tensor::zeros(&[n]);
    for (r, ((gxr, xr), gr)) in gx
        .data_mut()
        .chunks_mut(n)
        .zip(xhat.data().chunks(n))
        .zip(g.data().chunks(n))
        .enumerate()
    {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for i in 0..n {
            let dxh = gr[i] * gamma.data()[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xr[i];
            gg.data_mut()[i] += gr[i] * xr[i];
            gb.data_mut()[i] += gr[i];
        }
        mean_dxh /= n as f64;
        mean_dxh_xh /= n as f64;
        for i in 0..n {
            let dxh = gr[i] * gamma.data()[i];
            gxr[i] = rstd[r] * (dxh - mean_dxh - xr[i] * mean_dxh_xh);
        }
    }
    (gx, gg, gb)
}

// ---------------------------------------------------------------------------
// spatial resampling

fn bin(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool2d_forward(x: &Tensor, p: usize) -> Result<Tensor> {
    expect_rank("adaptive_avg_pool2d", x, 4)?;
    let [bsz, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if p == 0 || p > h || p > w {
        return Err(ScsmError::arg(format!("pool size {p} invalid for spatial size {h}x{w}")));
    }
    let mut out = vec![0.0; bsz * c * p * p];
    for (plane, o) in x.data().chunks(h * w).zip(out.chunks_mut(p * p)) {
        for oy in 0..p {
            let (y0, y1) = bin(oy, p, h);
            for ox in 0..p {
                let (x0, x1) = bin(ox, p, w);
                let mut s = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s += plane[yy * w + xx];
                    }
                }
                o[oy * p + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::new(&[bsz, c, p, p], out)
}

pub fn adaptive_avg_pool2d_backward(in_shape: &[usize], p: usize, g: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut gx = Tensor::zeros(in_shape);
    for (plane, go) in gx.data_mut().chunks_mut(h * w).zip(g.data().chunks(p * p)) {
        for oy in 0..p {
            let (y0, y1) = bin(oy, p, h);
            for ox in 0..p {
                let (x0, x1) = bin(ox, p, w);
                let v = go[oy * p + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        plane[yy * w + xx] += v;
                    }
                }
            }
        }
    }
    gx
}

pub fn upsample_nearest_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    expect_rank("upsample_nearest", x, 4)?;
    if out_h == 0 || out_w == 0 {
        return Err(ScsmError::arg("upsample target must be non-empty"));
    }
    let [bsz, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = vec![0.0; bsz * c * out_h * out_w];
    for (plane, o) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                o[oy * out_w + ox] = plane[sy * w + ox * w / out_w];
            }
        }
    }
    Tensor::new(&[bsz, c, out_h, out_w], out)
}

pub fn upsample_nearest_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
    let mut gx = Tensor::zeros(in_shape);
    for (plane, go) in gx.data_mut().chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                plane[sy * w + ox * w / out_w] += go[oy * out_w + ox];
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// loss

/// Mean cross-entropy of `logits[N,C]` against class indices. Returns the loss
/// and the row-wise softmax probabilities.
pub fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank("cross_entropy", logits, 2)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(ScsmError::dim("cross_entropy labels", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(ScsmError::arg(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_forward(logits);
    let mut loss = 0.0;
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    Ok((loss / n as f64, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], g: f64) -> Tensor {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let mut gx = probs.clone();
    for (row, &l) in gx.data_mut().chunks_mut(c).zip(labels) {
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= g / n as f64;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_operand() {
        let b = Tensor::from_fn(&[3, 3], |i| (i as f64).sin());
        let out = matmul_forward(&Tensor::eye(3), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn hand_expanded_two_by_two_product() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let out = matmul_forward(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul_forward(&a, &b) {
            Err(ScsmError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts_batch_dims() {
        let a = Tensor::from_fn(&[2, 3, 2, 4], |i| i as f64 * 0.1);
        let b = Tensor::from_fn(&[3, 4, 5], |i| (i as f64).cos());
        let out = matmul_forward(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 5]);
        for i in 0..2 {
            for j in 0..3 {
                for r in 0..2 {
                    for c in 0..5 {
                        let want: f64 = (0..4).map(|p| a.at(&[i, j, r, p]) * b.at(&[j, p, c])).sum();
                        assert!((out.at(&[i, j, r, c]) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1x1_identity_and_summation() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let out = conv1x1_forward(&x, &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out, x);

        let ones = Tensor::ones(&[1, 2, 1, 1]);
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let out = conv1x1_forward(&ones, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &[2.0]);

        assert!(conv1x1_forward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn conv1d_identity_tap_and_impulse() {
        let x = Tensor::from_fn(&[1, 5, 2], |i| i as f64 + 1.0);
        let ident = Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1d_seq_forward(&x, &ident).unwrap(), x);

        let mut impulse = Tensor::zeros(&[1, 5, 1]);
        impulse.data_mut()[0] = 1.0;
        let kernel = Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let out = conv1d_seq_forward(&impulse, &kernel).unwrap();
        assert_eq!(out.data(), &[0.5, 0.3, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn softmax_limits() {
        let t = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_forward(&t).data(), &[0.5, 0.5]);
        let t = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_forward(&t);
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(silu_grad(0.0), 0.5);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[2, 4], 3.0);
        let (y, _, _) = layer_norm_forward(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(layer_norm_forward(&Tensor::zeros(&[3, 1]), &Tensor::ones(&[1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn pool_cases() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(adaptive_avg_pool2d_forward(&x, 1).unwrap().data(), &[4.0]);
        assert_eq!(adaptive_avg_pool2d_forward(&x, 2).unwrap(), x);
        assert!(adaptive_avg_pool2d_forward(&x, 3).is_err());
    }

    #[test]
    fn upsample_then_pool_round_trips() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 0.7).sin());
        let up = upsample_nearest_forward(&x, 6, 6).unwrap();
        let back = adaptive_avg_pool2d_forward(&up, 3).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_n() {
        let logits = Tensor::zeros(&[3, 5]);
        let (loss, _) = cross_entropy_forward(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }
}
