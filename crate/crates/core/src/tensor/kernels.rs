//! Slice-level numeric kernels shared by the tape's forward and backward passes.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Border handling for same-size convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around the frame edges (exact translation equivariance).
    Circular,
}

/// Row-major `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    beta: F,
    c: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and `c` is a distinct &mut.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
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

/// Sum of `f(0..n)` taken as `(f(i) + f(n-1-i))` pairs from the outside in.
///
/// Reversing the index order yields bit-identical results, which is what
/// makes stripe pooling exactly equivariant under frame flips.
#[inline]
pub(crate) fn mirrored_sum<F: Real>(n: usize, mut f: impl FnMut(usize) -> F) -> F {
    let mut acc = F::zero();
    for i in 0..n / 2 {
        let a = f(i);
        let b = f(n - 1 - i);
        acc = acc + (a + b);
    }
    if n % 2 == 1 {
        acc = acc + f(n / 2);
    }
    acc
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape after removing `axes` (sorted, distinct). Full reduction gives `[1]`.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        vec![1]
    } else {
        out
    }
}

fn reduce_rec<F: Real>(data: &[F], base: usize, axes: &[(usize, usize)]) -> F {
    match axes.split_first() {
        None => data[base],
        Some((&(len, stride), rest)) => mirrored_sum(len, |i| reduce_rec(data, base + i * stride, rest)),
    }
}

/// Visits every input offset of the reduced block for each output element.
fn for_each_output(shape: &[usize], axes: &[usize], mut visit: impl FnMut(usize, usize)) {
    let st = strides(shape);
    let kept: Vec<(usize, usize)> = (0..shape.len())
        .filter(|i| !axes.contains(i))
        .map(|i| (shape[i], st[i]))
        .collect();
    let out_len: usize = kept.iter().map(|k| k.0).product();
    for o in 0..out_len {
        let mut rem = o;
        let mut base = 0;
        for &(len, stride) in kept.iter().rev() {
            base += (rem % len) * stride;
            rem /= len;
        }
        visit(o, base);
    }
}

pub(crate) fn mean_axes<F: Real>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let st = strides(shape);
    let red: Vec<(usize, usize)> = axes.iter().map(|&a| (shape[a], st[a])).collect();
    let count: usize = red.iter().map(|r| r.0).product();
    let scale = F::of(count as f64);
    let mut out = vec![F::zero(); numel_out(shape, axes)];
    for_each_output(shape, axes, |o, base| {
        out[o] = reduce_rec(data, base, &red) / scale;
    });
    out
}

pub(crate) fn mean_axes_backward<F: Real>(g: &[F], shape: &[usize], axes: &[usize], dx: &mut [F]) {
    let st = strides(shape);
    let red: Vec<(usize, usize)> = axes.iter().map(|&a| (shape[a], st[a])).collect();
    let count: usize = red.iter().map(|r| r.0).product();
    let inv = F::one() / F::of(count as f64);
    for_each_output(shape, axes, |o, base| {
        let v = g[o] * inv;
        scatter_rec(dx, base, &red, v);
    });
}

fn scatter_rec<F: Real>(dx: &mut [F], base: usize, axes: &[(usize, usize)], v: F) {
    match axes.split_first() {
        None => dx[base] = dx[base] + v,
        Some((&(len, stride), rest)) => {
            for i in 0..len {
                scatter_rec(dx, base + i * stride, rest, v);
            }
        }
    }
}

fn numel_out(shape: &[usize], axes: &[usize]) -> usize {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .product()
}

/// Numerically stable softmax of one row.
pub fn softmax<F: Real>(row: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); row.len()];
    softmax_into(row, &mut out);
    out
}

pub(crate) fn softmax_into<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<F: Real>(logits: &[F], label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("cross_entropy", "NaN logit"));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln() - logits[label])
}

pub(crate) fn narrow<F: Real>(data: &[F], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<F> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * dim + start) * inner;
        out.extend_from_slice(&data[from..from + len * inner]);
    }
    out
}

pub(crate) fn narrow_backward<F: Real>(g: &[F], shape: &[usize], axis: usize, start: usize, len: usize, dx: &mut [F]) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    for o in 0..outer {
        let to = (o * dim + start) * inner;
        let from = o * len * inner;
        for (d, &v) in dx[to..to + len * inner].iter_mut().zip(&g[from..from + len * inner]) {
            *d = *d + v;
        }
    }
}

/// `[frames, channels, height, width]` view used by the spatial kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Frames {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Frames {
    pub fn of(shape: &[usize]) -> Self {
        Frames {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
        }
    }
}

fn pad_index(i: isize, len: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Circular => Some(i.rem_euclid(len as isize) as usize),
    }
}

/// Unfolds one `c×h×w` frame into a `(c·k·k) × (h·w)` matrix.
fn im2col<F: Real>(frame: &[F], f: Frames, k: usize, padding: Padding, cols: &mut [F]) {
    let p = (k / 2) as isize;
    let hw = f.h * f.w;
    for ci in 0..f.c {
        let plane = &frame[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..f.h {
                    let sy = pad_index(y as isize + ky as isize - p, f.h, padding);
                    for x in 0..f.w {
                        let sx = pad_index(x as isize + kx as isize - p, f.w, padding);
                        row[y * f.w + x] = match (sy, sx) {
                            (Some(sy), Some(sx)) => plane[sy * f.w + sx],
                            _ => F::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], f: Frames, k: usize, padding: Padding, frame: &mut [F]) {
    let p = (k / 2) as isize;
    let hw = f.h * f.w;
    for ci in 0..f.c {
        let plane = &mut frame[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..f.h {
                    let Some(sy) = pad_index(y as isize + ky as isize - p, f.h, padding) else {
                        continue;
                    };
                    for x in 0..f.w {
                        if let Some(sx) = pad_index(x as isize + kx as isize - p, f.w, padding) {
                            plane[sy * f.w + sx] = plane[sy * f.w + sx] + row[y * f.w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-size stride-1 convolution applied frame by frame.
pub(crate) fn conv2d<F: Real>(
    x: &[F],
    f: Frames,
    w: &[F],
    bias: &[F],
    c_out: usize,
    k: usize,
    padding: Padding,
) -> Vec<F> {
    let hw = f.h * f.w;
    let ckk = f.c * k * k;
    let mut out = vec![F::zero(); f.n * c_out * hw];
    let mut cols = vec![F::zero(); ckk * hw];
    for t in 0..f.n {
        im2col(&x[t * f.c * hw..(t + 1) * f.c * hw], f, k, padding, &mut cols);
        let o = &mut out[t * c_out * hw..(t + 1) * c_out * hw];
        for (co, row) in o.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(c_out, ckk, hw, w, false, &cols, false, F::one(), o);
    }
    out
}

/// Returns `(dx, dw, db)` for the requested operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<F: Real>(
    g: &[F],
    x: &[F],
    f: Frames,
    w: &[F],
    c_out: usize,
    k: usize,
    padding: Padding,
    want_dx: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let hw = f.h * f.w;
    let ckk = f.c * k * k;
    let mut dw = vec![F::zero(); c_out * ckk];
    let mut db = vec![F::zero(); c_out];
    let mut dx = want_dx.then(|| vec![F::zero(); x.len()]);
    let mut cols = vec![F::zero(); ckk * hw];
    let mut dcols = vec![F::zero(); ckk * hw];
    for t in 0..f.n {
        let gt = &g[t * c_out * hw..(t + 1) * c_out * hw];
        for (co, row) in gt.chunks(hw).enumerate() {
            db[co] = db[co] + row.iter().copied().sum::<F>();
        }
        im2col(&x[t * f.c * hw..(t + 1) * f.c * hw], f, k, padding, &mut cols);
        gemm(c_out, hw, ckk, gt, false, &cols, true, F::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(ckk, c_out, hw, w, true, gt, false, F::zero(), &mut dcols);
            col2im(&dcols, f, k, padding, &mut dx[t * f.c * hw..(t + 1) * f.c * hw]);
        }
    }
    (dx, dw, db)
}

pub(crate) fn avg_pool<F: Real>(x: &[F], f: Frames, k: usize) -> Vec<F> {
    let (oh, ow) = (f.h / k, f.w / k);
    let scale = F::of((k * k) as f64);
    let mut out = Vec::with_capacity(f.n * f.c * oh * ow);
    for plane in x.chunks(f.h * f.w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let s = mirrored_sum(k, |dy| {
                    let row = &plane[(oy * k + dy) * f.w + ox * k..][..k];
                    mirrored_sum(k, |dx| row[dx])
                });
                out.push(s / scale);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<F: Real>(g: &[F], f: Frames, k: usize) -> Vec<F> {
    let (oh, ow) = (f.h / k, f.w / k);
    let inv = F::one() / F::of((k * k) as f64);
    let mut dx = vec![F::zero(); f.n * f.c * f.h * f.w];
    for (plane, gp) in dx.chunks_mut(f.h * f.w).zip(g.chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gp[oy * ow + ox] * inv;
                for dy in 0..k {
                    for dxi in 0..k {
                        plane[(oy * k + dy) * f.w + ox * k + dxi] = v;
                    }
                }
            }
        }
    }
    dx
}

/// Channels `[0, fold)` take the next frame's values, `[fold, 2·fold)` the
/// previous frame's; vacated frames are zero.
pub(crate) fn temporal_shift<F: Real>(x: &[F], f: Frames, fold: usize, backward: bool) -> Vec<F> {
    let hw = f.h * f.w;
    let frame = f.c * hw;
    let mut out = vec![F::zero(); x.len()];
    for t in 0..f.n {
        for c in 0..f.c {
            // forward: out[t] = x[t + dir]; backward moves gradient the other way.
            let dir: isize = if c < fold {
                1
            } else if c < 2 * fold {
                -1
            } else {
                0
            };
            let dir = if backward { -dir } else { dir };
            let src = t as isize + dir;
            if src < 0 || src >= f.n as isize {
                continue;
            }
            let src = src as usize;
            out[t * frame + c * hw..t * frame + (c + 1) * hw]
                .copy_from_slice(&x[src * frame + c * hw..src * frame + (c + 1) * hw]);
        }
    }
    out
}
