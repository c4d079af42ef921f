//! Tape-free forward and adjoint kernels.
//!
//! Every function here works on plain [`Tensor`]s. The tape in the parent
//! module records which kernel produced a value and calls the matching
//! adjoint during the reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{numel, strides, Tensor};

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err("broadcast", format!("{a:?} vs {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` laid out inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let own = strides(shape);
    let lead = r - shape.len();
    (0..r).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] }).collect()
}

/// Visits every element of `out_shape` in row-major order, passing the linear
/// output index and the matching offsets under two stride sets.
fn for_each_index2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out_shape.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer = numel(&out_shape[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut lin = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(lin, oa + j * ia, ob + j * ib);
            lin += 1;
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = Vec::with_capacity(numel(&out_shape));
    for_each_index2(&out_shape, &sa, &sb, |_, oa, ob| data.push(f(ad[oa], bd[ob])));
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let full = broadcast_shape(x.shape(), shape)?;
    if full != shape {
        return Err(shape_err("broadcast_to", format!("{:?} -> {shape:?}", x.shape())));
    }
    let sx = broadcast_strides(x.shape(), shape);
    let xd = x.data();
    let mut data = Vec::with_capacity(numel(shape));
    for_each_index2(shape, &sx, &sx, |_, o, _| data.push(xd[o]));
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Sums `g` over the axes along which `shape` was broadcast to produce it.
pub fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let st = broadcast_strides(shape, g.shape());
    let own = strides(g.shape());
    let mut out = vec![T::ZERO; numel(shape)];
    let gd = g.data();
    for_each_index2(g.shape(), &own, &st, |_, og, ot| out[ot] += gd[og]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Sum over one axis, keeping it with size 1.
pub fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid("sum_axis", format!("axis {axis} for rank {}", x.rank())));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(reduce_to(x, &shape))
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
        return Err(invalid("permute", format!("{perm:?} for rank {r}")));
    }
    let own = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let sp: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let xd = x.data();
    let mut data = Vec::with_capacity(x.numel());
    for_each_index2(&out_shape, &sp, &sp, |_, o, _| data.push(xd[o]));
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(invalid("concat", format!("axis {axis} for rank {}", first.rank())));
    }
    let mut total = 0;
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", format!("{:?} vs {:?} on axis {axis}", x.shape(), first.shape())));
        }
        total += x.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let outer = numel(&first.shape()[..axis]);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let chunk = numel(&x.shape()[axis..]);
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(invalid("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape())));
    }
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis + 1..]);
    let d = x.shape()[axis];
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * d + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Adjoint of [`narrow`]: scatters `g` into a zero tensor of `full` shape.
pub fn narrow_backward<T: Real>(g: &Tensor<T>, full: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let outer = numel(&full[..axis]);
    let inner = numel(&full[axis + 1..]);
    let d = full[axis];
    let len = g.shape()[axis];
    let mut out = vec![T::ZERO; numel(full)];
    for o in 0..outer {
        let dst = (o * d + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::from_parts(full.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid("softmax", format!("axis {axis} for rank {}", x.rank())));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = xd[at(0)];
            for j in 1..n {
                m = m.max(xd[at(j)]);
            }
            let mut s = T::ZERO;
            for j in 0..n {
                let e = (xd[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            let inv = T::ONE / s;
            for j in 0..n {
                out[at(j)] *= inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::ZERO; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..n {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Geometry of a (possibly batched) product `op(a) * op(b)`.
#[derive(Debug, Clone, Copy)]
pub struct MatMulDims {
    pub batch: Option<usize>,
    pub b_shared: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

fn mat_dims(shape: &[usize], t: bool) -> (usize, usize) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    if t {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

pub fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatMulDims> {
    let bad = || shape_err("matmul", format!("{a:?} (t={ta}) x {b:?} (t={tb})"));
    let (batch, b_shared) = match (a.len(), b.len()) {
        (2, 2) => (None, false),
        (3, 3) if a[0] == b[0] => (Some(a[0]), false),
        (3, 2) => (Some(a[0]), true),
        _ => return Err(bad()),
    };
    let (m, k) = mat_dims(a, ta);
    let (k2, n) = mat_dims(b, tb);
    if k != k2 {
        return Err(bad());
    }
    Ok(MatMulDims { batch, b_shared, m, k, n })
}

fn mat<'a, T>(data: &'a [T], shape: &[usize], idx: usize, t: bool) -> MatRef<'a, T> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let sz = rows * cols;
    let m = MatRef::new(&data[idx * sz..(idx + 1) * sz], rows, cols);
    if t {
        m.t()
    } else {
        m
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let nb = d.batch.unwrap_or(1);
    let mut out = vec![T::ZERO; nb * d.m * d.n];
    for i in 0..nb {
        let bi = if d.b_shared { 0 } else { i };
        gemm(
            mat(a.data(), a.shape(), i, ta),
            mat(b.data(), b.shape(), bi, tb),
            T::ZERO,
            &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
        );
    }
    let shape = match d.batch {
        Some(bs) => vec![bs, d.m, d.n],
        None => vec![d.m, d.n],
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Returns the gradients of `op(a) * op(b)` with respect to `a` and `b`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = matmul_dims(a.shape(), b.shape(), ta, tb).expect("validated in forward");
    let nb = d.batch.unwrap_or(1);
    let mut ga = vec![T::ZERO; a.numel()];
    let mut gb = vec![T::ZERO; b.numel()];
    let a_sz = d.m * d.k;
    let b_sz = d.k * d.n;
    for i in 0..nb {
        let bi = if d.b_shared { 0 } else { i };
        let gi = MatRef::new(&g.data()[i * d.m * d.n..(i + 1) * d.m * d.n], d.m, d.n);
        let opa = mat(a.data(), a.shape(), i, ta);
        let opb = mat(b.data(), b.shape(), bi, tb);
        let ga_i = &mut ga[i * a_sz..(i + 1) * a_sz];
        if ta {
            gemm(opb, gi.t(), T::ZERO, ga_i);
        } else {
            gemm(gi, opb.t(), T::ZERO, ga_i);
        }
        let beta = if d.b_shared && i > 0 { T::ONE } else { T::ZERO };
        let gb_i = &mut gb[bi * b_sz..(bi + 1) * b_sz];
        if tb {
            gemm(gi.t(), opa, beta, gb_i);
        } else {
            gemm(opa.t(), gi, beta, gb_i);
        }
    }
    (Tensor::from_parts(a.shape().to_vec(), ga), Tensor::from_parts(b.shape().to_vec(), gb))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of a 2-D convolution whose weight is either shared
/// (`[C_out, C_in, k, k]`) or per batch element (`[B, C_out, C_in, k, k]`).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub x_batched: bool,
    pub w_batched: bool,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize, padding: usize) -> Result<Self> {
        let bad = |why: &str| shape_err("conv2d", format!("input {x:?}, weight {w:?}: {why}"));
        if x.len() != 4 {
            return Err(bad("input must be rank 4"));
        }
        let (wb, wshape) = match w.len() {
            4 => (None, w),
            5 => (Some(w[0]), &w[1..]),
            _ => return Err(bad("weight must be rank 4 or 5")),
        };
        let (c_out, c_in, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if k != k2 {
            return Err(bad("kernel must be square"));
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if c_in != x[1] {
            return Err(bad("channel mismatch"));
        }
        let batch = match wb {
            None => x[0],
            Some(b) if x[0] == b || x[0] == 1 => b,
            Some(1) => x[0],
            Some(_) => return Err(bad("batch mismatch")),
        };
        if let Some(bs) = bias {
            if bs != [c_out] {
                return Err(bad("bias must be [C_out]"));
            }
        }
        let (h, wd) = (x[2], x[3]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(bad("kernel larger than padded input"));
        }
        Ok(ConvGeom {
            batch,
            x_batched: x[0] == batch,
            w_batched: wb == Some(batch),
            c_in,
            c_out,
            h,
            w: wd,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        })
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn x_index(&self, b: usize) -> usize {
        if self.x_batched {
            b
        } else {
            0
        }
    }

    fn w_index(&self, b: usize) -> usize {
        if self.w_batched {
            b
        } else {
            0
        }
    }
}

/// Output columns `ox` whose input column `ox * s + kj - p` lies inside `[0, w)`.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if g.w + p > kj { ((g.w + p - kj - 1) / s + 1).min(g.w_out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let so = g.spatial_out();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * so..(row + 1) * so];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::ZERO);
                    line[hi..].fill(T::ZERO);
                    let start = lo * s + kj - p;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[start + j * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.padding);
    let so = g.spatial_out();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * so..(row + 1) * so];
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                let start = lo * s + kj - p;
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let from = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if s == 1 {
                        for (d, &v) in line[start..start + hi - lo].iter_mut().zip(from) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in from.iter().enumerate() {
                            line[start + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, padding)?;
    let (rows, so) = (g.cols_rows(), g.spatial_out());
    let x_sz = g.c_in * g.h * g.w;
    let w_sz = g.c_out * rows;
    let out_sz = g.c_out * so;
    let mut out = vec![T::ZERO; g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * so] };
    let mut cols_for = usize::MAX;
    for b in 0..g.batch {
        let xb = g.x_index(b);
        let xs = &x.data()[xb * x_sz..(xb + 1) * x_sz];
        let col_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            if cols_for != xb {
                im2col(&g, xs, &mut cols);
                cols_for = xb;
            }
            &cols
        };
        let wb = g.w_index(b);
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (co, line) in ob.chunks_mut(so).enumerate() {
                line.fill(bias.data()[co]);
            }
        }
        gemm(
            MatRef::new(&w.data()[wb * w_sz..(wb + 1) * w_sz], g.c_out, rows),
            MatRef::new(col_ref, rows, so),
            if bias.is_some() { T::ONE } else { T::ZERO },
            ob,
        );
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.h_out, g.w_out], out))
}

/// Input, weight and bias gradients; `None` where not requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of [`conv2d`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    gout: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> ConvGrads<T> {
    let bias_shape = [w.shape()[w.rank() - 4]];
    let g = ConvGeom::new(x.shape(), w.shape(), if has_bias { Some(&bias_shape[..]) } else { None }, stride, padding)
        .expect("validated in forward");
    let (rows, so) = (g.cols_rows(), g.spatial_out());
    let x_sz = g.c_in * g.h * g.w;
    let w_sz = g.c_out * rows;
    let out_sz = g.c_out * so;
    let gd = gout.data();

    let mut gx = if need_x { Some(vec![T::ZERO; x.numel()]) } else { None };
    let mut gw = if need_w { Some(vec![T::ZERO; w.numel()]) } else { None };
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * so] };
    let mut gcols = if g.is_pointwise() || !need_x { Vec::new() } else { vec![T::ZERO; rows * so] };
    let mut cols_for = usize::MAX;
    for b in 0..g.batch {
        let xb = g.x_index(b);
        let wb = g.w_index(b);
        let gb = MatRef::new(&gd[b * out_sz..(b + 1) * out_sz], g.c_out, so);
        let wmat = MatRef::new(&w.data()[wb * w_sz..(wb + 1) * w_sz], g.c_out, rows);
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[xb * x_sz..(xb + 1) * x_sz];
            let col_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                if cols_for != xb {
                    im2col(&g, xs, &mut cols);
                    cols_for = xb;
                }
                &cols
            };
            let accumulate = !g.w_batched && b > 0;
            gemm(
                gb,
                MatRef::new(col_ref, rows, so).t(),
                if accumulate { T::ONE } else { T::ZERO },
                &mut gw[wb * w_sz..(wb + 1) * w_sz],
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[xb * x_sz..(xb + 1) * x_sz];
            if g.is_pointwise() {
                gemm(wmat.t(), gb, T::ONE, dst);
            } else {
                gemm(wmat.t(), gb, T::ZERO, &mut gcols);
                col2im_add(&g, &gcols, dst);
            }
        }
    }
    let gbias = if has_bias {
        let mut acc = vec![T::ZERO; g.c_out];
        for b in 0..g.batch {
            for (co, a) in acc.iter_mut().enumerate() {
                let start = b * out_sz + co * so;
                *a += gd[start..start + so].iter().copied().sum::<T>();
            }
        }
        Some(Tensor::from_parts(vec![g.c_out], acc))
    } else {
        None
    };
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        gbias,
    )
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

/// Normalized coordinate in [-1, 1] to a clamped pixel position. Returns the
/// lower tap, the interpolation weight, and whether the coordinate was
/// clamped (which zeroes its derivative).
fn sample_axis<T: Real>(c: T, size: usize) -> (usize, usize, T, bool) {
    if size == 1 {
        return (0, 0, T::ZERO, true);
    }
    let half = T::from_f64(0.5);
    let max = T::from_usize(size - 1);
    let p = (c + T::ONE) * half * max;
    let clamped = !(p > T::ZERO && p < max);
    let p = p.max(T::ZERO).min(max);
    let i0 = (p.floor().to_f64() as usize).min(size - 2);
    let frac = p - T::from_usize(i0);
    (i0, i0 + 1, frac, clamped)
}

#[derive(Debug, Clone, Copy)]
struct SampleGeom {
    batch: usize,
    x_batched: bool,
    grid_batched: bool,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn sample_geom(x: &[usize], grid: &[usize]) -> Result<SampleGeom> {
    if x.len() != 4 || grid.len() != 4 || grid[3] != 2 {
        return Err(shape_err("grid_sample", format!("input {x:?}, grid {grid:?}")));
    }
    let batch = match (x[0], grid[0]) {
        (a, b) if a == b => a,
        (1, b) => b,
        (a, 1) => a,
        _ => return Err(shape_err("grid_sample", format!("batch {} vs {}", x[0], grid[0]))),
    };
    Ok(SampleGeom {
        batch,
        x_batched: x[0] == batch,
        grid_batched: grid[0] == batch,
        c: x[1],
        h: x[2],
        w: x[3],
        ho: grid[1],
        wo: grid[2],
    })
}

/// Bilinear sampling with normalized coordinates (`-1` and `1` are the
/// centers of the border pixels) and border clamping.
pub fn grid_sample<T: Real>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let g = sample_geom(x.shape(), grid.shape())?;
    let plane = g.h * g.w;
    let npix = g.ho * g.wo;
    let mut out = vec![T::ZERO; g.batch * g.c * npix];
    let gd = grid.data();
    for b in 0..g.batch {
        let xb = if g.x_batched { b } else { 0 };
        let gb = if g.grid_batched { b } else { 0 };
        let xs = &x.data()[xb * g.c * plane..(xb + 1) * g.c * plane];
        for pix in 0..npix {
            let gi = (gb * npix + pix) * 2;
            let (x0, x1, wx, _) = sample_axis(gd[gi], g.w);
            let (y0, y1, wy, _) = sample_axis(gd[gi + 1], g.h);
            let (ux, uy) = (T::ONE - wx, T::ONE - wy);
            for c in 0..g.c {
                let p = &xs[c * plane..(c + 1) * plane];
                let v = uy * (ux * p[y0 * g.w + x0] + wx * p[y0 * g.w + x1])
                    + wy * (ux * p[y1 * g.w + x0] + wx * p[y1 * g.w + x1]);
                out[(b * g.c + c) * npix + pix] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c, g.ho, g.wo], out))
}

pub fn grid_sample_backward<T: Real>(
    x: &Tensor<T>,
    grid: &Tensor<T>,
    gout: &Tensor<T>,
    need_x: bool,
    need_grid: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = sample_geom(x.shape(), grid.shape()).expect("validated in forward");
    let plane = g.h * g.w;
    let npix = g.ho * g.wo;
    let gd = grid.data();
    let go = gout.data();
    let mut gx = if need_x { Some(vec![T::ZERO; x.numel()]) } else { None };
    let mut gg = if need_grid { Some(vec![T::ZERO; grid.numel()]) } else { None };
    let half = T::from_f64(0.5);
    let sx = T::from_usize(g.w.saturating_sub(1)) * half;
    let sy = T::from_usize(g.h.saturating_sub(1)) * half;
    for b in 0..g.batch {
        let xb = if g.x_batched { b } else { 0 };
        let gb = if g.grid_batched { b } else { 0 };
        let xs = &x.data()[xb * g.c * plane..(xb + 1) * g.c * plane];
        for pix in 0..npix {
            let gi = (gb * npix + pix) * 2;
            let (x0, x1, wx, cx) = sample_axis(gd[gi], g.w);
            let (y0, y1, wy, cy) = sample_axis(gd[gi + 1], g.h);
            let (ux, uy) = (T::ONE - wx, T::ONE - wy);
            let (mut dpx, mut dpy) = (T::ZERO, T::ZERO);
            for c in 0..g.c {
                let go_v = go[(b * g.c + c) * npix + pix];
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[(xb * g.c + c) * plane..(xb * g.c + c + 1) * plane];
                    dst[y0 * g.w + x0] += go_v * uy * ux;
                    dst[y0 * g.w + x1] += go_v * uy * wx;
                    dst[y1 * g.w + x0] += go_v * wy * ux;
                    dst[y1 * g.w + x1] += go_v * wy * wx;
                }
                if need_grid {
                    let p = &xs[c * plane..(c + 1) * plane];
                    let (v00, v01) = (p[y0 * g.w + x0], p[y0 * g.w + x1]);
                    let (v10, v11) = (p[y1 * g.w + x0], p[y1 * g.w + x1]);
                    dpx += go_v * (uy * (v01 - v00) + wy * (v11 - v10));
                    dpy += go_v * (ux * (v10 - v00) + wx * (v11 - v01));
                }
            }
            if let Some(gg) = gg.as_mut() {
                if !cx {
                    gg[gi] += dpx * sx;
                }
                if !cy {
                    gg[gi + 1] += dpy * sy;
                }
            }
        }
    }
    (gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)), gg.map(|d| Tensor::from_parts(grid.shape().to_vec(), d)))
}

/// Normalized coordinate grid `[1, h, w, 2]` whose entries are the exact
/// pixel-center coordinates (x then y).
pub fn identity_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let lin = |i: usize, n: usize| {
        if n == 1 {
            T::ZERO
        } else {
            T::from_f64(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
        }
    };
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(lin(x, w));
            data.push(lin(y, h));
        }
    }
    Tensor::from_parts(vec![1, h, w, 2], data)
}

// ---------------------------------------------------------------------------
// Resampling and pooling
// ---------------------------------------------------------------------------

fn image_dims(x: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(shape_err(op, format!("expected [B, C, H, W], got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0] * s[1], s[2], s[3]))
}

pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = image_dims(x, "upsample_nearest2")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(planes * h2 * w2);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for xo in 0..w2 {
                out.push(row[xo / 2]);
            }
        }
    }
    let s = x.shape();
    Ok(Tensor::from_parts(vec![s[0], s[1], h2, w2], out))
}

pub fn upsample_nearest2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (planes, h2, w2) = (s[0] * s[1], s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xo in 0..w2 {
                dst[(y / 2) * w + xo / 2] += src[y * w2 + xo];
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], h, w], out)
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = image_dims(x, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("avg_pool2", format!("odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q);
            }
        }
    }
    let s = x.shape();
    Ok(Tensor::from_parts(vec![s[0], s[1], ho, wo], out))
}

pub fn avg_pool2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (planes, ho, wo) = (s[0] * s[1], s[2], s[3]);
    let (h, w) = (2 * ho, 2 * wo);
    let q = T::from_f64(0.25);
    let mut out = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..w {
                dst[y * w + xo] = src[(y / 2) * wo + xo / 2] * q;
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], h, w], out)
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = image_dims(x, "global_avg_pool")?;
    let inv = T::ONE / T::from_usize(h * w);
    let out = (0..planes).map(|p| x.data()[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() * inv).collect();
    Ok(Tensor::from_parts(vec![x.shape()[0], x.shape()[1]], out))
}

pub fn global_avg_pool_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = T::ONE / T::from_usize(h * w);
    let mut out = Vec::with_capacity(numel(x_shape));
    for &v in g.data() {
        out.extend(core::iter::repeat_n(v * inv, h * w));
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[3]).unwrap(), vec![3]);
        assert!(broadcast_shape(&[2, 3], &[4, 3, 2]).is_err());
        let a = t(&[2, 1, 3], |i| i as f64);
        let b = t(&[4, 1], |i| 10.0 * i as f64);
        let c = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.at(&[1, 2, 0]), 3.0 + 20.0);
        let r = reduce_to(&c, &[4, 1]);
        // each row sums the six `a` values plus 6 * b
        assert_eq!(r.at(&[3, 0]), 15.0 + 6.0 * 30.0);
    }

    #[test]
    fn permute_transposes_and_inverts() {
        let x = t(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_of_narrow_pieces_is_identity() {
        let x = t(&[2, 8, 3], |i| (i as f64).sin());
        let a = narrow(&x, 1, 0, 5).unwrap();
        let b = narrow(&x, 1, 5, 3).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
        assert!(narrow(&x, 1, 6, 3).is_err());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = t(&[2, 3, 5, 5], |i| ((i * 37) % 11) as f64 / 7.0 - 0.6);
        let w = t(&[4, 3, 3, 3], |i| ((i * 13) % 9) as f64 / 5.0 - 0.8);
        let bias = t(&[4], |i| i as f64 * 0.1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            let y = conv2d(&x, &w, Some(&bias), stride, pad).unwrap();
            let (ho, wo) = (y.shape()[2], y.shape()[3]);
            assert_eq!(ho, (5 + 2 * pad - 3) / stride + 1);
            for b in 0..2 {
                for co in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bias.data()[co];
                            for ci in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let iy = (oy * stride + ki) as isize - pad as isize;
                                        let ix = (ox * stride + kj) as isize - pad as isize;
                                        if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                            acc += x.at(&[b, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ki, kj]);
                                        }
                                    }
                                }
                            }
                            assert!((y.at(&[b, co, oy, ox]) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernels_and_channel_mismatch() {
        let x = t(&[1, 3, 5, 5], |_| 0.0);
        assert!(conv2d(&x, &t(&[2, 3, 2, 2], |_| 0.0), None, 1, 0).is_err());
        assert!(conv2d(&x, &t(&[2, 4, 3, 3], |_| 0.0), None, 1, 1).is_err());
    }

    #[test]
    fn per_batch_weights_broadcast_a_shared_input() {
        let x = t(&[1, 2, 4, 4], |i| i as f64 * 0.1);
        let w = t(&[3, 2, 2, 3, 3], |i| ((i * 7) % 5) as f64 - 2.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2, 4, 4]);
        for b in 0..3 {
            let wb = w.index_first(b).unwrap();
            let yb = conv2d(&x, &wb, None, 1, 1).unwrap();
            assert_eq!(y.index_first(b).unwrap().data(), yb.data());
        }
    }

    #[test]
    fn grid_sample_identity_and_clamp() {
        let x = t(&[1, 2, 3, 4], |i| i as f64);
        let id = identity_grid::<f64>(3, 4);
        let y = grid_sample(&x, &id).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
        let far = Tensor::from_f64(&[1, 1, 1, 2], &[5.0, -5.0]).unwrap();
        let y = grid_sample(&x, &far).unwrap();
        assert_eq!(y.data(), &[3.0, 15.0]);
    }

    #[test]
    fn pooling_shapes_and_values() {
        let x = t(&[1, 1, 2, 4], |i| i as f64);
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5]);
        let u = upsample_nearest2(&p).unwrap();
        assert_eq!(u.shape(), &[1, 1, 2, 4]);
        assert_eq!(u.data(), &[2.5, 2.5, 4.5, 4.5, 2.5, 2.5, 4.5, 4.5]);
        assert!(avg_pool2(&t(&[1, 1, 3, 4], |_| 0.0)).is_err());
        let gap = global_avg_pool(&x).unwrap();
        assert_eq!(gap.data(), &[3.5]);
    }
}
