//! Differentiable operations recorded on a [`Tape`].
//!
//! Every function computes its forward value eagerly and records a backward
//! rule. Shape errors are reported before anything is recorded.

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::{strides_of, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` whose receptive tap `offset` lands
    /// inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = tap as isize - self.pad as isize;
        // need 0 <= o*s + shift <= extent-1
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_num = extent as isize - 1 - shift;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let hi = hi.min(out_extent as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

fn conv_geometry(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let (batch, c_in, h, w) = match *input {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim(OP, "input rank", "3 or 4", input.len())),
    };
    let [c_out, wc_in, kh, kw] = *weight else {
        return Err(Error::dim(OP, "weight rank", 4, weight.len()));
    };
    if wc_in != c_in {
        return Err(Error::dim(OP, "channel (input axis -3 vs weight axis 1)", c_in, wc_in));
    }
    if kh != kw {
        return Err(Error::dim(OP, "kernel width (weight axis 3)", kh, kw));
    }
    if kh % 2 == 0 {
        return Err(Error::arg(OP, format!("kernel size must be odd, got {kh}")));
    }
    if stride == 0 {
        return Err(Error::arg(OP, "stride must be >= 1"));
    }
    if h + 2 * pad < kh {
        return Err(Error::dim(OP, "height (input axis -2)", format!(">= {}", kh.saturating_sub(2 * pad)), h));
    }
    if w + 2 * pad < kh {
        return Err(Error::dim(OP, "width (input axis -1)", format!(">= {}", kh.saturating_sub(2 * pad)), w));
    }
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kh) / stride + 1,
    })
}

/// `c = a · b + beta · c` for row-major `a` `[m,k]` (or its transpose when
/// `ta`) and `b` `[k,n]` (or transposed when `tb`); `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index the strides above can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one batch item `[C_in,H,W]` into `[C_in·k·k, H_out·W_out]`.
    fn im2col(&self, input: &[f64], col: &mut [f64]) {
        let plane = self.h_out * self.w_out;
        for ci in 0..self.c_in {
            let src = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    dst.fill(0.0);
                    let (oy0, oy1) = self.valid_range(ky, self.h, self.h_out);
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.w_out);
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let in_row = &src[iy * self.w..(iy + 1) * self.w];
                        let out_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        for ox in ox0..ox1 {
                            out_row[ox] = in_row[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns back.
    fn col2im(&self, col: &[f64], gin: &mut [f64]) {
        let plane = self.h_out * self.w_out;
        for ci in 0..self.c_in {
            let dst = &mut gin[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (oy0, oy1) = self.valid_range(ky, self.h, self.h_out);
                    let (ox0, ox1) = self.valid_range(kx, self.w, self.w_out);
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let g_row = &mut dst[iy * self.w..(iy + 1) * self.w];
                        let c_row = &src[oy * self.w_out..(oy + 1) * self.w_out];
                        for ox in ox0..ox1 {
                            g_row[ox * self.stride + kx - self.pad] += c_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let (kk, in_len, out_len) = (g.patch_len(), g.c_in * g.h * g.w, g.c_out * plane_out);
    let mut out = vec![0.0; g.batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * plane_out] };
    for n in 0..g.batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                y[co * plane_out..(co + 1) * plane_out].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.c_out, kk, plane_out, weight, false, x, false, beta, y);
        } else {
            g.im2col(x, &mut col);
            gemm(g.c_out, kk, plane_out, weight, false, &col, false, beta, y);
        }
    }
    out
}

fn conv_backward_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let (kk, in_len, out_len) = (g.patch_len(), g.c_in * g.h * g.w, g.c_out * plane_out);
    let mut gin = vec![0.0; g.batch * in_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * plane_out] };
    for n in 0..g.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        let gi = &mut gin[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(kk, g.c_out, plane_out, weight, true, go, false, 0.0, gi);
        } else {
            gemm(kk, g.c_out, plane_out, weight, true, go, false, 0.0, &mut col);
            g.col2im(&col, gi);
        }
    }
    gin
}

fn conv_backward_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let (kk, in_len, out_len) = (g.patch_len(), g.c_in * g.h * g.w, g.c_out * plane_out);
    let mut gw = vec![0.0; g.c_out * kk];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * plane_out] };
    for n in 0..g.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        let x = &input[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.c_out, plane_out, kk, go, false, x, true, 1.0, &mut gw);
        } else {
            g.im2col(x, &mut col);
            gemm(g.c_out, plane_out, kk, go, false, &col, true, 1.0, &mut gw);
        }
    }
    gw
}

struct Conv2dRule {
    geom: ConvGeom,
    has_bias: bool,
}

impl Backward for Conv2dRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = &self.geom;
        let go = ctx.grad_out.data();
        let input = ctx.inputs[0];
        let weight = ctx.inputs[1];
        let gin = ctx.needs[0].then(|| {
            Tensor::new(input.shape().to_vec(), conv_backward_input(g, go, weight.data())).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            Tensor::new(weight.shape().to_vec(), conv_backward_weight(g, go, input.data())).unwrap()
        });
        let mut out = vec![gin, gw];
        if self.has_bias {
            let plane = g.h_out * g.w_out;
            let mut gb = vec![0.0; g.c_out];
            for n in 0..g.batch {
                for (co, slot) in gb.iter_mut().enumerate() {
                    let base = (n * g.c_out + co) * plane;
                    *slot += go[base..base + plane].iter().sum::<f64>();
                }
            }
            out.push(ctx.needs[2].then(|| Tensor::from_vec(gb)));
        }
        out
    }
}

/// Cross-correlation of `input` (`[C,H,W]`, or `[T,C,H,W]` with the same
/// kernel applied at every leading index) with `weight` `[C_out,C_in,k,k]`.
pub fn conv2d(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let geom = conv_geometry(tape.shape(input), tape.shape(weight), stride, padding)?;
    if let Some(b) = bias {
        if tape.shape(b) != [geom.c_out] {
            return Err(Error::dim("conv2d", "bias", geom.c_out, format!("{:?}", tape.shape(b))));
        }
    }
    let data = conv_forward(
        &geom,
        tape.value(input).data(),
        tape.value(weight).data(),
        bias.map(|b| tape.value(b).data()),
    );
    let mut shape = tape.shape(input).to_vec();
    let r = shape.len();
    shape[r - 3] = geom.c_out;
    shape[r - 2] = geom.h_out;
    shape[r - 1] = geom.w_out;
    let value = Tensor::new(shape, data)?;
    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    Ok(tape.record(
        value,
        &inputs,
        Conv2dRule {
            geom,
            has_bias: bias.is_some(),
        },
    ))
}

// ---------------------------------------------------------------------------
// nearest-neighbour upsampling
// ---------------------------------------------------------------------------

struct UpsampleRule {
    factor: usize,
}

impl Backward for UpsampleRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let shape = ctx.inputs[0].shape();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let planes = ctx.inputs[0].len() / (h * w);
        let go = ctx.grad_out.data();
        let mut gin = vec![0.0; ctx.inputs[0].len()];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    gin[p * h * w + (oy / f) * w + ox / f] += go[p * ho * wo + oy * wo + ox];
                }
            }
        }
        vec![Some(Tensor::new(shape.to_vec(), gin).unwrap())]
    }
}

/// Repeats every element of the trailing two axes `factor` times along each.
pub fn nearest_upsample(tape: &mut Tape, input: Var, factor: usize) -> Result<Var> {
    if factor < 1 {
        return Err(Error::arg("nearest_upsample", "factor must be >= 1"));
    }
    let x = tape.value(input);
    let shape = x.shape().to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(Error::dim("nearest_upsample", "rank", ">= 2", r));
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (ho, wo) = (h * factor, w * factor);
    let planes = x.len() / (h * w);
    let src = x.data();
    let mut data = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for oy in 0..ho {
            let row = &src[p * h * w + (oy / factor) * w..p * h * w + (oy / factor + 1) * w];
            data.extend((0..wo).map(|ox| row[ox / factor]));
        }
    }
    let mut out_shape = shape;
    out_shape[r - 2] = ho;
    out_shape[r - 1] = wo;
    let value = Tensor::new(out_shape, data)?;
    Ok(tape.record(value, &[input], UpsampleRule { factor }))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
    Sum,
}

/// Visits `shape` in row-major order and returns `Σ index[k] · strides[k]`
/// for every element.
fn walk_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let r = shape.len();
    if r == 0 {
        out.push(0);
        return out;
    }
    let (inner, inner_stride) = (shape[r - 1], strides[r - 1]);
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    while out.len() < n {
        out.extend((0..inner).map(|i| base + i * inner_stride));
        // advance the outer odometer
        let mut k = r - 1;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            base += strides[k];
            if idx[k] < shape[k] {
                break;
            }
            base -= strides[k] * shape[k];
            idx[k] = 0;
        }
    }
    out
}

/// For each input element, the flat index of the output element it reduces
/// into, plus the output shape (reduced axes dropped).
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let out_strides = strides_of(&out_shape);
    let mut target = vec![0; shape.len()];
    for (&a, &os) in keep.iter().zip(&out_strides) {
        target[a] = os;
    }
    (walk_offsets(shape, &target), out_shape)
}

struct PoolRule {
    mode: PoolMode,
    map: Vec<usize>,
    count: f64,
    argmax: Vec<usize>,
}

impl Backward for PoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let go = ctx.grad_out.data();
        let mut gin = vec![0.0; ctx.inputs[0].len()];
        match self.mode {
            PoolMode::Sum => {
                for (g, &o) in gin.iter_mut().zip(&self.map) {
                    *g = go[o];
                }
            }
            PoolMode::Avg => {
                for (g, &o) in gin.iter_mut().zip(&self.map) {
                    *g = go[o] / self.count;
                }
            }
            PoolMode::Max => {
                for (o, &i) in self.argmax.iter().enumerate() {
                    gin[i] += go[o];
                }
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gin).unwrap())]
    }
}

/// Reduces `input` over `axes`. Max routes its gradient to the first
/// maximal element in row-major order.
pub fn pool(tape: &mut Tape, input: Var, axes: &[usize], mode: PoolMode) -> Result<Var> {
    let x = tape.value(input);
    let rank = x.rank();
    if axes.is_empty() {
        return Err(Error::arg("pool", "axis set must be nonempty"));
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank {
            return Err(Error::arg("pool", format!("axis {a} invalid for rank {rank}")));
        }
        if axes[..i].contains(&a) {
            return Err(Error::arg("pool", format!("axis {a} repeated")));
        }
    }
    let (map, out_shape) = reduction_map(x.shape(), axes);
    let out_len: usize = out_shape.iter().product();
    let count = (x.len() / out_len) as f64;
    let mut out = vec![0.0; out_len];
    let mut argmax = Vec::new();
    match mode {
        PoolMode::Sum | PoolMode::Avg => {
            for (&v, &o) in x.data().iter().zip(&map) {
                out[o] += v;
            }
            if mode == PoolMode::Avg {
                out.iter_mut().for_each(|v| *v /= count);
            }
        }
        PoolMode::Max => {
            out.fill(f64::NEG_INFINITY);
            argmax = vec![usize::MAX; out_len];
            for (i, (&v, &o)) in x.data().iter().zip(&map).enumerate() {
                if v > out[o] || argmax[o] == usize::MAX {
                    out[o] = v;
                    argmax[o] = i;
                }
            }
        }
    }
    let value = Tensor::new(out_shape, out)?;
    Ok(tape.record(
        value,
        &[input],
        PoolRule {
            mode,
            map,
            count,
            argmax,
        },
    ))
}

struct SumRule;

impl Backward for SumRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_out.item();
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    }
}

/// Sum of all elements, as a scalar.
pub fn sum(tape: &mut Tape, input: Var) -> Var {
    let s = tape.value(input).sum();
    tape.record(Tensor::scalar(s), &[input], SumRule)
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

struct LinearRule {
    rows: usize,
    n: usize,
    m: usize,
    has_bias: bool,
}

impl Backward for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (rows, n, m) = (self.rows, self.n, self.m);
        let go = ctx.grad_out.data();
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0.0; rows * n];
            for r in 0..rows {
                for j in 0..m {
                    let g = go[r * m + j];
                    for i in 0..n {
                        gx[r * n + i] += g * w[j * n + i];
                    }
                }
            }
            Tensor::new(ctx.inputs[0].shape().to_vec(), gx).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![0.0; m * n];
            for r in 0..rows {
                for j in 0..m {
                    let g = go[r * m + j];
                    for i in 0..n {
                        gw[j * n + i] += g * x[r * n + i];
                    }
                }
            }
            Tensor::new(vec![m, n], gw).unwrap()
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            let mut gb = vec![0.0; m];
            for r in 0..rows {
                for j in 0..m {
                    gb[j] += go[r * m + j];
                }
            }
            out.push(ctx.needs[2].then(|| Tensor::from_vec(gb)));
        }
        out
    }
}

/// `weight · x (+ bias)` applied along the last axis of `input`.
pub fn linear(tape: &mut Tape, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    const OP: &str = "linear";
    let xs = tape.shape(input).to_vec();
    let [m, n] = *tape.shape(weight) else {
        return Err(Error::dim(OP, "weight rank", 2, tape.shape(weight).len()));
    };
    let Some(&last) = xs.last() else {
        return Err(Error::dim(OP, "input rank", ">= 1", 0));
    };
    if last != n {
        return Err(Error::dim(OP, format!("input axis {} vs weight axis 1", xs.len() - 1), n, last));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [m] {
            return Err(Error::dim(OP, "bias axis 0", m, format!("{:?}", tape.shape(b))));
        }
    }
    let rows = tape.value(input).len() / n;
    let x = tape.value(input).data();
    let w = tape.value(weight).data();
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        for j in 0..m {
            let mut acc = bias.map_or(0.0, |b| tape.value(b).data()[j]);
            for i in 0..n {
                acc += w[j * n + i] * x[r * n + i];
            }
            out[r * m + j] = acc;
        }
    }
    let mut shape = xs;
    *shape.last_mut().unwrap() = m;
    let value = Tensor::new(shape, out)?;
    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    Ok(tape.record(
        value,
        &inputs,
        LinearRule {
            rows,
            n,
            m,
            has_bias: bias.is_some(),
        },
    ))
}

// ---------------------------------------------------------------------------
// pointwise
// ---------------------------------------------------------------------------

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SigmoidRule;

impl Backward for SigmoidRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.output.zip_map(ctx.grad_out, |y, g| g * y * (1.0 - y));
        vec![Some(g)]
    }
}

pub fn sigmoid(tape: &mut Tape, input: Var) -> Var {
    let value = tape.value(input).map(sigmoid_scalar);
    tape.record(value, &[input], SigmoidRule)
}

struct ReluRule;

impl Backward for ReluRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.inputs[0].zip_map(ctx.grad_out, |x, g| if x > 0.0 { g } else { 0.0 });
        vec![Some(g)]
    }
}

pub fn relu(tape: &mut Tape, input: Var) -> Var {
    let value = tape.value(input).map(|x| x.max(0.0));
    tape.record(value, &[input], ReluRule)
}

struct ScaleRule(f64);

impl Backward for ScaleRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad_out.map(|g| g * self.0))]
    }
}

pub fn scale(tape: &mut Tape, input: Var, factor: f64) -> Var {
    let value = tape.value(input).map(|x| x * factor);
    tape.record(value, &[input], ScaleRule(factor))
}

// ---------------------------------------------------------------------------
// broadcast add / mul
// ---------------------------------------------------------------------------

/// Offset into `b` for every flat index of `a`, where `b`'s shape is `a`'s
/// with some axes set to 1 or trailing axes omitted.
fn broadcast_offsets(op: &'static str, a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    if b.len() > a.len() {
        return Err(Error::dim(op, "rank", format!("<= {}", a.len()), b.len()));
    }
    let mut padded = b.to_vec();
    padded.resize(a.len(), 1);
    for (axis, (&da, &db)) in a.iter().zip(&padded).enumerate() {
        if db != da && db != 1 {
            return Err(Error::dim(op, axis, da, db));
        }
    }
    let b_strides: Vec<usize> = strides_of(&padded)
        .into_iter()
        .zip(&padded)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    Ok(Some(walk_offsets(a, &b_strides)))
}

struct AddRule {
    offsets: Option<Vec<usize>>,
}

impl Backward for AddRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let ga = ctx.needs[0].then(|| ctx.grad_out.clone());
        let gb = ctx.needs[1].then(|| match &self.offsets {
            None => ctx.grad_out.clone(),
            Some(off) => {
                let mut gb = Tensor::zeros(ctx.inputs[1].shape());
                let d = gb.data_mut();
                for (&g, &o) in ctx.grad_out.data().iter().zip(off) {
                    d[o] += g;
                }
                gb
            }
        });
        vec![ga, gb]
    }
}

/// `a + b`, with `b` broadcast over the axes where it has extent 1 or which
/// it omits at the end.
pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let offsets = broadcast_offsets("add", tape.shape(a), tape.shape(b))?;
    let av = tape.value(a);
    let bv = tape.value(b).data();
    let value = match &offsets {
        None => av.zip_map(tape.value(b), |x, y| x + y),
        Some(off) => {
            let data = av.data().iter().zip(off).map(|(&x, &o)| x + bv[o]).collect();
            Tensor::new(av.shape().to_vec(), data)?
        }
    };
    Ok(tape.record(value, &[a, b], AddRule { offsets }))
}

struct MulRule {
    offsets: Option<Vec<usize>>,
}

impl Backward for MulRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, b, go) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
        match &self.offsets {
            None => vec![
                ctx.needs[0].then(|| go.zip_map(b, |g, y| g * y)),
                ctx.needs[1].then(|| go.zip_map(a, |g, x| g * x)),
            ],
            Some(off) => {
                let bd = b.data();
                let ga = ctx.needs[0].then(|| {
                    let data = go.data().iter().zip(off).map(|(&g, &o)| g * bd[o]).collect();
                    Tensor::new(a.shape().to_vec(), data).unwrap()
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = Tensor::zeros(b.shape());
                    let d = gb.data_mut();
                    for ((&g, &x), &o) in go.data().iter().zip(a.data()).zip(off) {
                        d[o] += g * x;
                    }
                    gb
                });
                vec![ga, gb]
            }
        }
    }
}

/// `a ⊗ b`, broadcasting `b` as in [`add`].
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let offsets = broadcast_offsets("mul", tape.shape(a), tape.shape(b))?;
    let av = tape.value(a);
    let bv = tape.value(b).data();
    let value = match &offsets {
        None => av.zip_map(tape.value(b), |x, y| x * y),
        Some(off) => {
            let data = av.data().iter().zip(off).map(|(&x, &o)| x * bv[o]).collect();
            Tensor::new(av.shape().to_vec(), data)?
        }
    };
    Ok(tape.record(value, &[a, b], MulRule { offsets }))
}

// ---------------------------------------------------------------------------
// structural
// ---------------------------------------------------------------------------

struct ConcatRule {
    axis: usize,
    extents: Vec<usize>,
}

impl Backward for ConcatRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let shape = ctx.grad_out.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let total = shape[self.axis];
        let go = ctx.grad_out.data();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.extents.len());
        for (k, &e) in self.extents.iter().enumerate() {
            if ctx.needs[k] {
                let mut d = Vec::with_capacity(outer * e * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    d.extend_from_slice(&go[base..base + e * inner]);
                }
                out.push(Some(Tensor::new(ctx.inputs[k].shape().to_vec(), d).unwrap()));
            } else {
                out.push(None);
            }
            start += e;
        }
        out
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(tape: &mut Tape, parts: &[Var], axis: usize) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat", "nothing to concatenate"))?;
    let base = tape.shape(*first).to_vec();
    if axis >= base.len() {
        return Err(Error::arg("concat", format!("axis {axis} invalid for rank {}", base.len())));
    }
    let mut extents = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = tape.shape(p);
        if s.len() != base.len() {
            return Err(Error::dim("concat", "rank", base.len(), s.len()));
        }
        for (ax, (&x, &y)) in base.iter().zip(s).enumerate() {
            if ax != axis && x != y {
                return Err(Error::dim("concat", ax, x, y));
            }
        }
        extents.push(s[axis]);
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (&p, &e) in parts.iter().zip(&extents) {
            let src = tape.value(p).data();
            data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let value = Tensor::new(shape, data)?;
    Ok(tape.record(value, parts, ConcatRule { axis, extents }))
}

struct ReshapeRule;

impl Backward for ReshapeRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad_out.clone().reshape(ctx.inputs[0].shape()).unwrap())]
    }
}

pub fn reshape(tape: &mut Tape, input: Var, shape: &[usize]) -> Result<Var> {
    let value = tape.value(input).clone().reshape(shape)?;
    Ok(tape.record(value, &[input], ReshapeRule))
}

struct CropRule {
    h: usize,
    w: usize,
}

impl Backward for CropRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let shape = ctx.inputs[0].shape();
        let r = shape.len();
        let (sh, sw) = (shape[r - 2], shape[r - 1]);
        let planes = ctx.inputs[0].len() / (sh * sw);
        let go = ctx.grad_out.data();
        let mut gin = vec![0.0; ctx.inputs[0].len()];
        for p in 0..planes {
            for y in 0..self.h {
                let src = &go[(p * self.h + y) * self.w..(p * self.h + y + 1) * self.w];
                let dst = p * sh * sw + y * sw;
                gin[dst..dst + self.w].copy_from_slice(src);
            }
        }
        vec![Some(Tensor::new(shape.to_vec(), gin).unwrap())]
    }
}

/// Keeps the top-left `h × w` window of the trailing two axes.
pub fn crop2d(tape: &mut Tape, input: Var, h: usize, w: usize) -> Result<Var> {
    let value = crop2d_value(tape.value(input), h, w)?;
    Ok(tape.record(value, &[input], CropRule { h, w }))
}

pub fn crop2d_value(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = x.shape();
    let r = shape.len();
    if r < 2 {
        return Err(Error::dim("crop2d", "rank", ">= 2", r));
    }
    let (sh, sw) = (shape[r - 2], shape[r - 1]);
    if h == 0 || h > sh {
        return Err(Error::dim("crop2d", r - 2, format!("1..={sh}"), h));
    }
    if w == 0 || w > sw {
        return Err(Error::dim("crop2d", r - 1, format!("1..={sw}"), w));
    }
    let planes = x.len() / (sh * sw);
    let mut data = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let s = p * sh * sw + y * sw;
            data.extend_from_slice(&x.data()[s..s + w]);
        }
    }
    let mut out = shape.to_vec();
    out[r - 2] = h;
    out[r - 1] = w;
    Tensor::new(out, data)
}

/// Zero-pads the trailing two axes at the bottom/right to `h × w`.
pub fn pad2d_value(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = x.shape();
    let r = shape.len();
    if r < 2 {
        return Err(Error::dim("pad2d", "rank", ">= 2", r));
    }
    let (sh, sw) = (shape[r - 2], shape[r - 1]);
    if h < sh || w < sw {
        return Err(Error::dim("pad2d", r - 2, format!(">= {sh}x{sw}"), format!("{h}x{w}")));
    }
    let planes = x.len() / (sh * sw);
    let mut data = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..sh {
            let s = p * sh * sw + y * sw;
            let d = p * h * w + y * w;
            data[d..d + sw].copy_from_slice(&x.data()[s..s + sw]);
        }
    }
    let mut out = shape.to_vec();
    out[r - 2] = h;
    out[r - 1] = w;
    Tensor::new(out, data)
}
