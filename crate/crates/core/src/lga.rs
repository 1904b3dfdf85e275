//! Local guided aggregation.
//!
//! Every pixel owns three `K×K` kernels applied to disparity planes `d`,
//! `d-1` and `d+1` of its neighbourhood:
//!
//! ```text
//! A(p,d) = Σ_q ω0(p,q)·C(q,d) + Σ_q ω1(p,q)·C(q,d-1) + Σ_q ω2(p,q)·C(q,d+1)
//! ```
//!
//! The `3K²` weights of a pixel jointly sum to one. Neighbours outside the
//! image and disparities outside `[0, D)` contribute zero. The layer applies
//! the same weights `repeats` times (two by default).

use crate::error::{Error, Result};
use crate::grid::{CostVolume, Shape};
use crate::par;
use crate::sga::{softmax_backward, softmax_in_place};

const SUM_TOL: f64 = 1e-12;

pub const DEFAULT_KERNEL: usize = 5;
pub const DEFAULT_REPEATS: usize = 2;

/// `H×W×F×3K²` real field; slot order is `(kernel, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LgaField {
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    data: Vec<f64>,
}

impl LgaField {
    pub fn filled(h: usize, w: usize, f: usize, k: usize, value: f64) -> Result<Self> {
        check_k(k)?;
        Ok(LgaField {
            h,
            w,
            f,
            k,
            data: vec![value; h * w * f * 3 * k * k],
        })
    }

    pub fn from_vec(h: usize, w: usize, f: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        check_k(k)?;
        let n = h * w * f * 3 * k * k;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "LGA field needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(LgaField { h, w, f, k, data })
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h, self.w, self.f, self.k)
    }

    /// Slots per `(pixel, channel)` group: `3K²`.
    pub fn group_len(&self) -> usize {
        3 * self.k * self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn group(&self, p: usize, c: usize) -> &[f64] {
        let g = self.group_len();
        let o = (p * self.f + c) * g;
        &self.data[o..o + g]
    }

    fn check_volume(&self, s: Shape) -> Result<()> {
        if (self.h, self.w, self.f) != (s.h, s.w, s.f) {
            return Err(Error::Shape(format!(
                "LGA weights cover {}x{}x{}, volume is {s}",
                self.h, self.w, self.f
            )));
        }
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "LGA kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Normalised filter bank: each `(p, f)` group of `3K²` weights sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LgaWeights(LgaField);

impl LgaWeights {
    pub fn new(field: LgaField) -> Result<Self> {
        for (i, g) in field.data.chunks_exact(field.group_len()).enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite LGA weight in group {i}"
                )));
            }
            let sum: f64 = g.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::Config(format!(
                    "LGA group {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(LgaWeights(field))
    }

    /// All mass on the centre tap of `ω0`.
    pub fn identity(h: usize, w: usize, f: usize, k: usize) -> Result<Self> {
        let mut field = LgaField::filled(h, w, f, k, 0.0)?;
        let g = field.group_len();
        let centre = (k / 2) * k + k / 2;
        for grp in field.data.chunks_exact_mut(g) {
            grp[centre] = 1.0;
        }
        Ok(LgaWeights(field))
    }

    pub(crate) fn new_unchecked(field: LgaField) -> Self {
        LgaWeights(field)
    }

    pub fn field(&self) -> &LgaField {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgaLogits(LgaField);

impl LgaLogits {
    pub fn new(field: LgaField) -> Result<Self> {
        if let Some(v) = field.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite LGA logit {v}")));
        }
        Ok(LgaLogits(field))
    }

    /// Zero logits except `centre_logit` on the centre tap of `ω0`.
    pub fn centered(h: usize, w: usize, f: usize, k: usize, centre_logit: f64) -> Result<Self> {
        let mut field = LgaField::filled(h, w, f, k, 0.0)?;
        let g = field.group_len();
        let centre = (k / 2) * k + k / 2;
        for grp in field.data.chunks_exact_mut(g) {
            grp[centre] = centre_logit;
        }
        Ok(LgaLogits(field))
    }

    pub fn field(&self) -> &LgaField {
        &self.0
    }

    pub fn field_mut(&mut self) -> &mut LgaField {
        &mut self.0
    }
}

/// Joint softmax over the `3K²` slots of each pixel and channel.
pub fn lga_normalize(logits: &LgaLogits) -> Result<LgaWeights> {
    let src = logits.field();
    if let Some(v) = src.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite LGA logit {v}")));
    }
    let mut out = src.clone();
    let g = out.group_len();
    for grp in out.data.chunks_exact_mut(g) {
        softmax_in_place(grp);
    }
    Ok(LgaWeights(out))
}

/// Inputs to each application, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LgaTape {
    inputs: Vec<CostVolume>,
}

impl LgaTape {
    pub fn repeats(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[CostVolume] {
        &self.inputs
    }
}

/// Disparity shift of the plane each kernel reads: `ω0 → d`, `ω1 → d-1`,
/// `ω2 → d+1`.
const SHIFT: [isize; 3] = [0, -1, 1];

pub fn lga_forward(
    vol: &CostVolume,
    weights: &LgaWeights,
    repeats: usize,
) -> Result<(CostVolume, LgaTape)> {
    weights.field().check_volume(vol.shape())?;
    if repeats == 0 {
        return Err(Error::Config("LGA needs at least one application".into()));
    }
    let mut inputs = Vec::with_capacity(repeats);
    let mut cur = vol.clone();
    for _ in 0..repeats {
        let next = apply(&cur, weights.field());
        inputs.push(cur);
        cur = next;
    }
    Ok((cur, LgaTape { inputs }))
}

/// One application of the filter bank.
pub(crate) fn apply(vol: &CostVolume, w: &LgaField) -> CostVolume {
    let s = vol.shape();
    let (nd, nf, k) = (s.d, s.f, w.k);
    let r = (k / 2) as isize;
    let kk = k * k;
    let per = nd * nf;
    let src = vol.data();
    let mut out = vec![0.0; s.len()];
    par::for_each_chunk_mut(&mut out, s.w * per, |y, row| {
        for x in 0..s.w {
            let p = y * s.w + x;
            let acc = &mut row[x * per..(x + 1) * per];
            for c in 0..nf {
                let grp = w.group(p, c);
                for (t, (dy, dx)) in taps(r).enumerate() {
                    let Some(q) = neighbour(s, y, x, dy, dx) else {
                        continue;
                    };
                    let cq = &src[q * per..(q + 1) * per];
                    for (kern, &shift) in SHIFT.iter().enumerate() {
                        let wt = grp[kern * kk + t];
                        for d in 0..nd {
                            let e = d as isize + shift;
                            if e < 0 || e >= nd as isize {
                                continue;
                            }
                            acc[d * nf + c] += wt * cq[e as usize * nf + c];
                        }
                    }
                }
            }
        }
    });
    CostVolume::from_vec(s, out).expect("filter keeps the input shape")
}

/// Adjoint of [`apply`] in the cost argument, written as a gather so each
/// output pixel is owned by one task.
pub(crate) fn apply_adjoint(grad: &CostVolume, w: &LgaField) -> CostVolume {
    let s = grad.shape();
    let (nd, nf, k) = (s.d, s.f, w.k);
    let r = (k / 2) as isize;
    let kk = k * k;
    let per = nd * nf;
    let g = grad.data();
    let mut out = vec![0.0; s.len()];
    par::for_each_chunk_mut(&mut out, s.w * per, |qy, row| {
        for qx in 0..s.w {
            let acc = &mut row[qx * per..(qx + 1) * per];
            for (t, (dy, dx)) in taps(r).enumerate() {
                // p = q - offset(t) reads q through tap t
                let Some(p) = neighbour(s, qy, qx, -dy, -dx) else {
                    continue;
                };
                let gp = &g[p * per..(p + 1) * per];
                for c in 0..nf {
                    let grp = w.group(p, c);
                    for (kern, &shift) in SHIFT.iter().enumerate() {
                        let wt = grp[kern * kk + t];
                        for e in 0..nd {
                            // output plane d reads plane e = d + shift
                            let d = e as isize - shift;
                            if d < 0 || d >= nd as isize {
                                continue;
                            }
                            acc[e * nf + c] += wt * gp[d as usize * nf + c];
                        }
                    }
                }
            }
        }
    });
    CostVolume::from_vec(s, out).expect("adjoint keeps the input shape")
}

/// Gradient of one application with respect to its weights.
fn weight_grad(input: &CostVolume, grad: &CostVolume, w: &LgaField, acc: &mut [f64]) {
    let s = input.shape();
    let (nd, nf, k) = (s.d, s.f, w.k);
    let r = (k / 2) as isize;
    let kk = k * k;
    let gl = 3 * kk;
    let per = nd * nf;
    let (src, g) = (input.data(), grad.data());
    par::for_each_chunk_mut(acc, s.w * nf * gl, |y, row| {
        for x in 0..s.w {
            let p = y * s.w + x;
            let gp = &g[p * per..(p + 1) * per];
            for (t, (dy, dx)) in taps(r).enumerate() {
                let Some(q) = neighbour(s, y, x, dy, dx) else {
                    continue;
                };
                let cq = &src[q * per..(q + 1) * per];
                for c in 0..nf {
                    let grp = &mut row[(x * nf + c) * gl..(x * nf + c + 1) * gl];
                    for (kern, &shift) in SHIFT.iter().enumerate() {
                        let mut sum = 0.0;
                        for d in 0..nd {
                            let e = d as isize + shift;
                            if e < 0 || e >= nd as isize {
                                continue;
                            }
                            sum += gp[d * nf + c] * cq[e as usize * nf + c];
                        }
                        grp[kern * kk + t] += sum;
                    }
                }
            }
        }
    });
}

/// Gradients with respect to the input volume and the normalised weights,
/// chained through every application.
pub fn lga_backward(
    tape: &LgaTape,
    weights: &LgaWeights,
    grad_out: &CostVolume,
) -> Result<(CostVolume, LgaField)> {
    let first = tape
        .inputs
        .first()
        .ok_or_else(|| Error::Config("empty LGA tape".into()))?;
    grad_out.ensure_shape(first.shape(), "lga_backward gradient")?;
    weights.field().check_volume(first.shape())?;
    let (h, w, f, k) = weights.field().dims();
    let mut gw = LgaField::filled(h, w, f, k, 0.0)?;
    let mut g = grad_out.clone();
    for input in tape.inputs.iter().rev() {
        weight_grad(input, &g, weights.field(), &mut gw.data);
        g = apply_adjoint(&g, weights.field());
    }
    Ok((g, gw))
}

/// Pulls a weight gradient back through the joint softmax.
pub fn lga_logit_grad(weights: &LgaWeights, grad_w: &LgaField) -> LgaField {
    let mut out = grad_w.clone();
    let g = out.group_len();
    for ((o, wt), gr) in out
        .data
        .chunks_exact_mut(g)
        .zip(weights.field().data.chunks_exact(g))
        .zip(grad_w.data.chunks_exact(g))
    {
        softmax_backward(wt, gr, o);
    }
    out
}

fn taps(r: isize) -> impl Iterator<Item = (isize, isize)> {
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}

#[inline]
fn neighbour(s: Shape, y: usize, x: usize, dy: isize, dx: isize) -> Option<usize> {
    let (qy, qx) = (y as isize + dy, x as isize + dx);
    (qy >= 0 && qx >= 0 && qy < s.h as isize && qx < s.w as isize)
        .then(|| qy as usize * s.w + qx as usize)
}
