//! Semi-global guided aggregation.
//!
//! For each of the four scan directions `r` the layer runs
//!
//! ```text
//! A_r(p,d) = w0·C(p,d) + w1·A_r(p-r,d) + w2·A_r(p-r,d-1)
//!          + w3·A_r(p-r,d+1) + w4·max_i A_r(p-r,i)
//! ```
//!
//! with per-pixel weights `w0..w4` that sum to one, then keeps the
//! elementwise maximum over directions. Every disparity plane shares the
//! pixel's weights. At the first pixel of a path `A_r(p,d) = C(p,d)`, and
//! terms whose disparity falls outside `[0, D)` contribute zero.
//!
//! The backward pass walks each path in reverse. The gradient reaching
//! `A_r(p,·)` is the direct gradient plus what the successor `p+r` sends
//! back through its `w1..w3` terms, plus, for the single disparity that was
//! the predecessor maximum, the successor's `w4` times its whole gradient
//! row. The fusion maximum routes each output gradient to the winning
//! direction only.

use crate::error::{Error, Result};
use crate::grid::{CostVolume, Direction, Shape};
use crate::par;

/// Number of weights per pixel, direction and channel.
pub const SLOTS: usize = 5;

const SUM_TOL: f64 = 1e-12;

/// Per-direction `H×W×F×5` real field. Backs weights, logits and their
/// gradients, which all share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaField {
    h: usize,
    w: usize,
    f: usize,
    dirs: [Vec<f64>; 4],
}

impl SgaField {
    pub fn filled(h: usize, w: usize, f: usize, value: f64) -> Self {
        let n = h * w * f * SLOTS;
        SgaField {
            h,
            w,
            f,
            dirs: std::array::from_fn(|_| vec![value; n]),
        }
    }

    /// Same five values at every pixel, direction and channel.
    pub fn splat(h: usize, w: usize, f: usize, slots: [f64; SLOTS]) -> Self {
        let n = h * w * f;
        let one: Vec<f64> = (0..n).flat_map(|_| slots).collect();
        SgaField {
            h,
            w,
            f,
            dirs: std::array::from_fn(|_| one.clone()),
        }
    }

    pub fn from_dirs(h: usize, w: usize, f: usize, dirs: [Vec<f64>; 4]) -> Result<Self> {
        let n = h * w * f * SLOTS;
        if let Some(bad) = dirs.iter().find(|d| d.len() != n) {
            return Err(Error::Shape(format!(
                "direction field needs {n} values, got {}",
                bad.len()
            )));
        }
        Ok(SgaField { h, w, f, dirs })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.f)
    }

    pub fn dir(&self, dir: Direction) -> &[f64] {
        &self.dirs[dir.ordinal()]
    }

    pub fn dir_mut(&mut self, dir: Direction) -> &mut [f64] {
        &mut self.dirs[dir.ordinal()]
    }

    /// The five entries at flat pixel `p`, channel `c`.
    #[inline]
    pub fn at(&self, dir: Direction, p: usize, c: usize) -> &[f64] {
        let o = (p * self.f + c) * SLOTS;
        &self.dirs[dir.ordinal()][o..o + SLOTS]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.dirs.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.dirs.iter_mut().flatten()
    }

    pub fn len(&self) -> usize {
        4 * self.h * self.w * self.f * SLOTS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_volume(&self, s: Shape) -> Result<()> {
        if (self.h, self.w, self.f) != (s.h, s.w, s.f) {
            return Err(Error::Shape(format!(
                "weights cover {}x{}x{}, volume is {s}",
                self.h, self.w, self.f
            )));
        }
        Ok(())
    }
}

/// Normalised aggregation weights: at every `(p, r, f)` the five entries
/// sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaWeights(SgaField);

impl SgaWeights {
    pub fn new(field: SgaField) -> Result<Self> {
        for dir in Direction::ALL {
            for (i, group) in field.dir(dir).chunks_exact(SLOTS).enumerate() {
                if group.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite weight in {dir:?} group {i}"
                    )));
                }
                let sum: f64 = group.iter().sum();
                if (sum - 1.0).abs() > SUM_TOL {
                    return Err(Error::Config(format!(
                        "weights in {dir:?} group {i} sum to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(SgaWeights(field))
    }

    /// `w0 = 1` everywhere; the forward pass is then the identity.
    pub fn identity(h: usize, w: usize, f: usize) -> Self {
        SgaWeights(SgaField::splat(h, w, f, [1.0, 0.0, 0.0, 0.0, 0.0]))
    }

    pub fn field(&self) -> &SgaField {
        &self.0
    }

    pub fn into_field(self) -> SgaField {
        self.0
    }
}

/// Unconstrained pre-softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaLogits(SgaField);

impl SgaLogits {
    pub fn new(field: SgaField) -> Result<Self> {
        if let Some(v) = field.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit {v}")));
        }
        Ok(SgaLogits(field))
    }

    /// Logit `w0_logit` on the cost term and zero elsewhere.
    pub fn centered(h: usize, w: usize, f: usize, w0_logit: f64) -> Self {
        SgaLogits(SgaField::splat(h, w, f, [w0_logit, 0.0, 0.0, 0.0, 0.0]))
    }

    pub fn field(&self) -> &SgaField {
        &self.0
    }

    pub fn field_mut(&mut self) -> &mut SgaField {
        &mut self.0
    }

    pub fn into_field(self) -> SgaField {
        self.0
    }
}

/// Softmax over the five logits of every `(p, r, f)` group.
pub fn normalize_logits(logits: &SgaLogits) -> Result<SgaWeights> {
    let src = logits.field();
    if let Some(v) = src.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {v}")));
    }
    let mut out = src.clone();
    for dir in Direction::ALL {
        for group in out.dir_mut(dir).chunks_exact_mut(SLOTS) {
            softmax_in_place(group);
        }
    }
    Ok(SgaWeights(out))
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Chain rule through a softmax: `dl_i = w_i (g_i - Σ_j w_j g_j)`.
pub(crate) fn softmax_backward(weights: &[f64], grad: &[f64], out: &mut [f64]) {
    let dot: f64 = weights.iter().zip(grad).map(|(w, g)| w * g).sum();
    for ((o, w), g) in out.iter_mut().zip(weights).zip(grad) {
        *o = w * (g - dot);
    }
}

/// Per-direction forward record: the index and value of `max_i A_r(p,i)`
/// for every pixel and channel. Ties keep the lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct DirRecord {
    pub argmax: Vec<u32>,
    pub max: Vec<f64>,
}

/// Everything [`sga_backward`] needs from a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaTape {
    shape: Shape,
    per_dir: [CostVolume; 4],
    records: [DirRecord; 4],
    winner: Vec<u8>,
}

impl SgaTape {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn aggregated(&self, dir: Direction) -> &CostVolume {
        &self.per_dir[dir.ordinal()]
    }

    pub fn record(&self, dir: Direction) -> &DirRecord {
        &self.records[dir.ordinal()]
    }

    /// Winning direction of the fusion maximum per `(p, d, f)` entry.
    pub fn winners(&self) -> &[u8] {
        &self.winner
    }
}

/// One-direction aggregation.
pub fn sga_forward_dir(
    vol: &CostVolume,
    weights: &SgaWeights,
    dir: Direction,
) -> Result<(CostVolume, DirRecord)> {
    weights.field().check_volume(vol.shape())?;
    Ok(forward_dir(vol, weights.field(), dir))
}

pub(crate) fn forward_dir(
    vol: &CostVolume,
    w: &SgaField,
    dir: Direction,
) -> (CostVolume, DirRecord) {
    let s = vol.shape();
    let (nd, nf, len) = (s.d, s.f, dir.line_len(s.h, s.w));
    let per = nd * nf;
    let wd = w.dir(dir);
    let src = vol.data();

    let lines = par::map_indexed(dir.line_count(s.h, s.w), |line| {
        let mut buf = vec![0.0; len * per];
        let mut argmax = vec![0u32; len * nf];
        let mut maxv = vec![0.0; len * nf];
        for k in 0..len {
            let p = dir.pixel_at(s.h, s.w, line, k);
            let cost = &src[p * per..(p + 1) * per];
            if k == 0 {
                buf[..per].copy_from_slice(cost);
            } else {
                let (done, rest) = buf.split_at_mut(k * per);
                let prev = &done[(k - 1) * per..];
                let cur = &mut rest[..per];
                for c in 0..nf {
                    let wt = &wd[(p * nf + c) * SLOTS..(p * nf + c + 1) * SLOTS];
                    let pmax = maxv[(k - 1) * nf + c];
                    for d in 0..nd {
                        let mut v = wt[0] * cost[d * nf + c] + wt[1] * prev[d * nf + c];
                        if d > 0 {
                            v += wt[2] * prev[(d - 1) * nf + c];
                        }
                        if d + 1 < nd {
                            v += wt[3] * prev[(d + 1) * nf + c];
                        }
                        v += wt[4] * pmax;
                        cur[d * nf + c] = v;
                    }
                }
            }
            let cur = &buf[k * per..(k + 1) * per];
            for c in 0..nf {
                let (mut bi, mut bv) = (0, cur[c]);
                for d in 1..nd {
                    if cur[d * nf + c] > bv {
                        bi = d;
                        bv = cur[d * nf + c];
                    }
                }
                argmax[k * nf + c] = bi as u32;
                maxv[k * nf + c] = bv;
            }
        }
        (buf, argmax, maxv)
    });

    let mut out = vec![0.0; s.len()];
    let mut argmax = vec![0u32; s.pixels() * nf];
    let mut maxv = vec![0.0; s.pixels() * nf];
    for (line, (buf, am, mv)) in lines.into_iter().enumerate() {
        for k in 0..len {
            let p = dir.pixel_at(s.h, s.w, line, k);
            out[p * per..(p + 1) * per].copy_from_slice(&buf[k * per..(k + 1) * per]);
            argmax[p * nf..(p + 1) * nf].copy_from_slice(&am[k * nf..(k + 1) * nf]);
            maxv[p * nf..(p + 1) * nf].copy_from_slice(&mv[k * nf..(k + 1) * nf]);
        }
    }
    (
        CostVolume::from_vec(s, out).expect("forward keeps the input shape"),
        DirRecord { argmax, max: maxv },
    )
}

/// Elementwise maximum over the four directions, with the winning
/// direction per entry (first in [`Direction::ALL`] order on ties).
pub fn sga_fuse_max(per_dir: &[CostVolume; 4]) -> Result<(CostVolume, Vec<u8>)> {
    let s = per_dir[0].shape();
    for v in &per_dir[1..] {
        v.ensure_shape(s, "sga_fuse_max")?;
    }
    let mut out = per_dir[0].clone();
    let mut winner = vec![0u8; s.len()];
    for (r, v) in per_dir.iter().enumerate().skip(1) {
        for ((o, wn), &x) in out.data_mut().iter_mut().zip(&mut winner).zip(v.data()) {
            if x > *o {
                *o = x;
                *wn = r as u8;
            }
        }
    }
    Ok((out, winner))
}

/// Four-direction forward pass plus fusion.
pub fn sga_forward(vol: &CostVolume, weights: &SgaWeights) -> Result<(CostVolume, SgaTape)> {
    weights.field().check_volume(vol.shape())?;
    Ok(forward_all(vol, weights.field()))
}

pub(crate) fn forward_all(vol: &CostVolume, w: &SgaField) -> (CostVolume, SgaTape) {
    let mut vols = Vec::with_capacity(4);
    let mut recs = Vec::with_capacity(4);
    for dir in Direction::ALL {
        let (v, r) = forward_dir(vol, w, dir);
        vols.push(v);
        recs.push(r);
    }
    let per_dir: [CostVolume; 4] = vols.try_into().expect("four directions");
    let records: [DirRecord; 4] = recs.try_into().expect("four directions");
    let (out, winner) = sga_fuse_max(&per_dir).expect("directions share a shape");
    (
        out,
        SgaTape {
            shape: vol.shape(),
            per_dir,
            records,
            winner,
        },
    )
}

/// Gradients of the fused output with respect to the input volume and the
/// five weights of every direction.
pub fn sga_backward(
    tape: &SgaTape,
    weights: &SgaWeights,
    vol: &CostVolume,
    grad_out: &CostVolume,
) -> Result<(CostVolume, SgaField)> {
    let s = tape.shape;
    vol.ensure_shape(s, "sga_backward input")?;
    grad_out.ensure_shape(s, "sga_backward gradient")?;
    weights.field().check_volume(s)?;
    if tape.winner.len() != s.len() {
        return Err(Error::Shape("tape does not match the forward call".into()));
    }
    Ok(backward_all(tape, weights.field(), vol, grad_out))
}

pub(crate) fn backward_all(
    tape: &SgaTape,
    w: &SgaField,
    vol: &CostVolume,
    grad_out: &CostVolume,
) -> (CostVolume, SgaField) {
    let s = tape.shape;
    let mut grad_in = vec![0.0; s.len()];
    let mut grad_w = SgaField::filled(s.h, s.w, s.f, 0.0);
    for dir in Direction::ALL {
        let r = dir.ordinal() as u8;
        let routed: Vec<f64> = grad_out
            .data()
            .iter()
            .zip(&tape.winner)
            .map(|(&g, &wn)| if wn == r { g } else { 0.0 })
            .collect();
        let (gc, gw) = backward_dir(
            vol,
            &tape.per_dir[dir.ordinal()],
            &tape.records[dir.ordinal()],
            w,
            dir,
            &routed,
        );
        for (a, b) in grad_in.iter_mut().zip(&gc) {
            *a += b;
        }
        grad_w.dir_mut(dir).copy_from_slice(&gw);
    }
    (
        CostVolume::from_vec(s, grad_in).expect("gradient keeps the input shape"),
        grad_w,
    )
}

/// Reverse scan for one direction. `grad_agg` is the gradient reaching
/// `A_r`; returns the contribution to `dE/dC` and `dE/dw` for `r`.
fn backward_dir(
    vol: &CostVolume,
    agg: &CostVolume,
    rec: &DirRecord,
    w: &SgaField,
    dir: Direction,
    grad_agg: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let s = vol.shape();
    let (nd, nf, len) = (s.d, s.f, dir.line_len(s.h, s.w));
    let per = nd * nf;
    let wd = w.dir(dir);
    let (src, a) = (vol.data(), agg.data());

    let lines = par::map_indexed(dir.line_count(s.h, s.w), |line| {
        // gb: gradient w.r.t. A_r along this line, filled from the path end
        let mut gb = vec![0.0; len * per];
        let mut gc = vec![0.0; len * per];
        let mut gw = vec![0.0; len * nf * SLOTS];
        for k in (0..len).rev() {
            let p = dir.pixel_at(s.h, s.w, line, k);
            gb[k * per..(k + 1) * per].copy_from_slice(&grad_agg[p * per..(p + 1) * per]);
            if k + 1 < len {
                let q = dir.pixel_at(s.h, s.w, line, k + 1);
                let (head, tail) = gb.split_at_mut((k + 1) * per);
                let cur = &mut head[k * per..];
                let next = &tail[..per];
                for c in 0..nf {
                    let wt = &wd[(q * nf + c) * SLOTS..(q * nf + c + 1) * SLOTS];
                    let row_sum: f64 = (0..nd).map(|d| next[d * nf + c]).sum();
                    let imax = rec.argmax[p * nf + c] as usize;
                    for d in 0..nd {
                        let mut g = wt[1] * next[d * nf + c];
                        if d + 1 < nd {
                            g += wt[2] * next[(d + 1) * nf + c];
                        }
                        if d > 0 {
                            g += wt[3] * next[(d - 1) * nf + c];
                        }
                        if d == imax {
                            g += wt[4] * row_sum;
                        }
                        cur[d * nf + c] += g;
                    }
                }
            }

            let g = &gb[k * per..(k + 1) * per];
            if k == 0 {
                // path start: A_r = C, weights unused
                gc[..per].copy_from_slice(g);
                continue;
            }
            let pp = dir.pixel_at(s.h, s.w, line, k - 1);
            let cost = &src[p * per..(p + 1) * per];
            let prev = &a[pp * per..(pp + 1) * per];
            for c in 0..nf {
                let wt = &wd[(p * nf + c) * SLOTS..(p * nf + c + 1) * SLOTS];
                let pmax = rec.max[pp * nf + c];
                let mut acc = [0.0; SLOTS];
                for d in 0..nd {
                    let gd = g[d * nf + c];
                    gc[k * per + d * nf + c] = gd * wt[0];
                    acc[0] += gd * cost[d * nf + c];
                    acc[1] += gd * prev[d * nf + c];
                    if d > 0 {
                        acc[2] += gd * prev[(d - 1) * nf + c];
                    }
                    if d + 1 < nd {
                        acc[3] += gd * prev[(d + 1) * nf + c];
                    }
                    acc[4] += gd * pmax;
                }
                gw[(k * nf + c) * SLOTS..(k * nf + c + 1) * SLOTS].copy_from_slice(&acc);
            }
        }
        (gc, gw)
    });

    let mut grad_c = vec![0.0; s.len()];
    let mut grad_w = vec![0.0; s.pixels() * nf * SLOTS];
    let wn = nf * SLOTS;
    for (line, (gc, gw)) in lines.into_iter().enumerate() {
        for k in 0..len {
            let p = dir.pixel_at(s.h, s.w, line, k);
            grad_c[p * per..(p + 1) * per].copy_from_slice(&gc[k * per..(k + 1) * per]);
            grad_w[p * wn..(p + 1) * wn].copy_from_slice(&gw[k * wn..(k + 1) * wn]);
        }
    }
    (grad_c, grad_w)
}

/// Forward record of one [`sga_layer`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaLayerTape {
    pub input: CostVolume,
    pub weights: SgaWeights,
    pub tape: SgaTape,
}

/// Softmax-normalise the logits, aggregate in four directions, fuse.
pub fn sga_layer(vol: &CostVolume, logits: &SgaLogits) -> Result<(CostVolume, SgaLayerTape)> {
    let weights = normalize_logits(logits)?;
    let (out, tape) = sga_forward(vol, &weights)?;
    Ok((
        out,
        SgaLayerTape {
            input: vol.clone(),
            weights,
            tape,
        },
    ))
}

/// Gradients with respect to the layer input and the logits.
pub fn sga_layer_backward(
    lt: &SgaLayerTape,
    grad_out: &CostVolume,
) -> Result<(CostVolume, SgaField)> {
    let (grad_in, grad_w) = sga_backward(&lt.tape, &lt.weights, &lt.input, grad_out)?;
    Ok((grad_in, logit_grad(&lt.weights, &grad_w)))
}

/// Pulls a weight gradient back through the per-group softmax.
pub fn logit_grad(weights: &SgaWeights, grad_w: &SgaField) -> SgaField {
    let (h, w, f) = grad_w.dims();
    let mut out = SgaField::filled(h, w, f, 0.0);
    for dir in Direction::ALL {
        let wsrc = weights.field().dir(dir);
        let gsrc = grad_w.dir(dir);
        for ((o, wt), g) in out
            .dir_mut(dir)
            .chunks_exact_mut(SLOTS)
            .zip(wsrc.chunks_exact(SLOTS))
            .zip(gsrc.chunks_exact(SLOTS))
        {
            softmax_backward(wt, g, o);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: Shape, rng: &mut ChaCha8Rng) -> CostVolume {
        CostVolume::from_vec(shape, (0..shape.len()).map(|_| rng.gen()).collect()).unwrap()
    }

    fn random_weights(shape: Shape, rng: &mut ChaCha8Rng) -> SgaWeights {
        let n = shape.pixels() * shape.f * SLOTS;
        let dirs = std::array::from_fn(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let logits =
            SgaLogits::new(SgaField::from_dirs(shape.h, shape.w, shape.f, dirs).unwrap()).unwrap();
        normalize_logits(&logits).unwrap()
    }

    /// Straight-line evaluation of the recurrence along one row, written
    /// independently of the line/scatter machinery above.
    fn row_oracle(costs: &[Vec<f64>], wts: &[[f64; 5]]) -> Vec<Vec<f64>> {
        let nd = costs[0].len();
        let mut out: Vec<Vec<f64>> = vec![costs[0].clone()];
        for x in 1..costs.len() {
            let prev = out[x - 1].clone();
            let m = prev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w = wts[x];
            let row = (0..nd)
                .map(|d| {
                    let left = if d > 0 { prev[d - 1] } else { 0.0 };
                    let right = if d + 1 < nd { prev[d + 1] } else { 0.0 };
                    w[0] * costs[x][d] + w[1] * prev[d] + w[2] * left + w[3] * right + w[4] * m
                })
                .collect();
            out.push(row);
        }
        out
    }

    #[test]
    fn softmax_closed_forms() {
        let l = SgaLogits::centered(1, 1, 1, 0.0);
        let w = normalize_logits(&l).unwrap();
        assert!(w.field().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let l = SgaLogits::centered(1, 1, 1, 2f64.ln());
        let w = normalize_logits(&l).unwrap();
        let g = w.field().at(Direction::LeftToRight, 0, 0);
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(g[1..].iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));

        let l = SgaLogits::centered(1, 1, 1, 800.0);
        let w = normalize_logits(&l).unwrap();
        assert_eq!(w.field().at(Direction::TopToBottom, 0, 0)[0], 1.0);
    }

    #[test]
    fn non_finite_logit_rejected() {
        let mut f = SgaField::filled(1, 2, 1, 0.0);
        f.dir_mut(Direction::BottomToTop)[3] = f64::NAN;
        assert!(matches!(SgaLogits::new(f.clone()), Err(Error::Numeric(_))));
        assert!(matches!(
            normalize_logits(&SgaLogits(f)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn unnormalised_weights_rejected() {
        let f = SgaField::splat(2, 2, 1, [0.5, 0.5, 0.1, 0.0, 0.0]);
        assert!(matches!(SgaWeights::new(f), Err(Error::Config(_))));
    }

    #[test]
    fn identity_weights_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(Shape::new(4, 5, 6, 2), &mut rng);
        let w = SgaWeights::identity(4, 5, 2);
        for dir in Direction::ALL {
            assert_eq!(sga_forward_dir(&v, &w, dir).unwrap().0, v);
        }
        assert_eq!(sga_forward(&v, &w).unwrap().0, v);
    }

    #[test]
    fn single_pixel_passes_through() {
        let v = CostVolume::from_vec(Shape::new(1, 1, 3, 1), vec![0.3, 0.9, 0.1]).unwrap();
        let w = SgaWeights::new(SgaField::splat(1, 1, 1, [0.2; 5])).unwrap();
        for dir in Direction::ALL {
            assert_eq!(sga_forward_dir(&v, &w, dir).unwrap().0, v);
        }
    }

    #[test]
    fn three_pixel_uniform_example() {
        let v = CostVolume::from_vec(Shape::new(1, 3, 2, 1), vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
            .unwrap();
        let w = SgaWeights::new(SgaField::splat(1, 3, 1, [0.2; 5])).unwrap();
        let (out, rec) = sga_forward_dir(&v, &w, Direction::LeftToRight).unwrap();
        let oracle = row_oracle(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            &[[0.2; 5]; 3],
        );
        let flat: Vec<f64> = oracle.concat();
        for (a, b) in out.data().iter().zip(&flat) {
            assert!((a - b).abs() < 1e-15);
        }
        // hand values: [1, 0], [0.4, 0.6], [0.52, 0.32]
        let want = [1.0, 0.0, 0.4, 0.6, 0.52, 0.32];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", out.data());
        }
        assert_eq!(rec.argmax, vec![0, 1, 0]);
    }

    #[test]
    fn constant_volume_without_shift_terms_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3 * 4 * SLOTS;
        let dirs = std::array::from_fn(|_| {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n / SLOTS {
                let a: f64 = rng.gen();
                let b: f64 = rng.gen::<f64>() * (1.0 - a);
                v.extend_from_slice(&[a, b, 0.0, 0.0, 1.0 - a - b]);
            }
            v
        });
        let w = SgaWeights::new(SgaField::from_dirs(3, 4, 1, dirs).unwrap()).unwrap();
        let v = CostVolume::new(3, 4, 5, 1, 0.75).unwrap();
        let (out, _) = sga_forward(&v, &w).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.75).abs() < 1e-15));
    }

    #[test]
    fn fuse_takes_max_and_first_on_ties() {
        let vols: [CostVolume; 4] =
            std::array::from_fn(|i| CostVolume::new(2, 2, 2, 1, i as f64).unwrap());
        let (out, win) = sga_fuse_max(&vols).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
        assert!(win.iter().all(|&r| r == 3));

        let same: [CostVolume; 4] = std::array::from_fn(|_| vols[1].clone());
        let (out, win) = sga_fuse_max(&same).unwrap();
        assert_eq!(out, vols[1]);
        assert!(win.iter().all(|&r| r == 0));
    }

    #[test]
    fn fuse_mixed_signs_match_scalar_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vols: [CostVolume; 4] = std::array::from_fn(|_| {
            let s = Shape::new(3, 3, 4, 2);
            CostVolume::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        });
        let (out, win) = sga_fuse_max(&vols).unwrap();
        for i in 0..out.data().len() {
            let vals: Vec<f64> = vols.iter().map(|v| v.data()[i]).collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out.data()[i], m);
            assert_eq!(vals[win[i] as usize], m);
        }
    }

    #[test]
    fn fuse_shape_mismatch() {
        let a = CostVolume::new(2, 2, 2, 1, 0.0).unwrap();
        let b = CostVolume::new(2, 2, 3, 1, 0.0).unwrap();
        assert!(sga_fuse_max(&[a.clone(), a.clone(), b, a]).is_err());
    }

    #[test]
    fn zero_gradient_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(3, 4, 5, 2);
        let v = random_volume(s, &mut rng);
        let w = random_weights(s, &mut rng);
        let (_, tape) = sga_forward(&v, &w).unwrap();
        let (gi, gw) = sga_backward(&tape, &w, &v, &CostVolume::zeros(s).unwrap()).unwrap();
        assert!(gi.data().iter().all(|&g| g == 0.0));
        assert!(gw.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_weights_backward_routes_through_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(3, 3, 4, 1);
        let v = random_volume(s, &mut rng);
        let w = SgaWeights::identity(3, 3, 1);
        let (_, tape) = sga_forward(&v, &w).unwrap();
        let g = random_volume(s, &mut rng);
        let (gi, gw) = sga_backward(&tape, &w, &v, &g).unwrap();
        // all directions tie, so everything goes to the first one and w0 = 1
        assert_eq!(gi, g);
        // dE/dw1 at a non-start pixel of the winning direction is Σ_d g·A(p-r,d)
        let p = 4; // (1, 1); predecessor along LeftToRight is (1, 0)
        let want: f64 = (0..4).map(|d| g.get(1, 1, d, 0) * v.get(1, 0, d, 0)).sum();
        let got = gw.at(Direction::LeftToRight, p, 0)[1];
        assert!((got - want).abs() < 1e-14);
        // losing directions receive nothing
        assert!(gw.dir(Direction::TopToBottom).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_gradient_mass_is_chain_origin_w0() {
        // with w1..w4 = 0 the aggregated value is w0·C, so a one-hot output
        // gradient returns exactly w0 at the winning direction's pixel
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Shape::new(3, 4, 3, 1);
        let v = random_volume(s, &mut rng);
        let n = s.pixels() * SLOTS;
        let dirs = std::array::from_fn(|_| {
            let mut f = vec![0.0; n];
            for p in 0..s.pixels() {
                f[p * SLOTS] = 1.0;
            }
            f
        });
        let w = SgaWeights::new(SgaField::from_dirs(3, 4, 1, dirs).unwrap()).unwrap();
        let (_, tape) = sga_forward(&v, &w).unwrap();
        for i in [0, 7, 20, 35] {
            let mut g = CostVolume::zeros(s).unwrap();
            g.data_mut()[i] = 1.0;
            let (gi, _) = sga_backward(&tape, &w, &v, &g).unwrap();
            let total: f64 = gi.data().iter().sum();
            assert_eq!(total, 1.0);
            assert_eq!(gi.data()[i], 1.0);
        }
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let s = Shape::new(2, 2, 3, 1);
        let v = CostVolume::new(2, 2, 3, 1, 0.5).unwrap();
        let w = SgaWeights::identity(2, 2, 1);
        let (_, tape) = sga_forward(&v, &w).unwrap();
        let g = CostVolume::new(2, 3, 3, 1, 1.0).unwrap();
        assert!(sga_backward(&tape, &w, &v, &g).is_err());
        assert!(sga_backward(
            &tape,
            &w,
            &CostVolume::zeros(Shape::new(2, 2, 2, 1)).unwrap(),
            &v
        )
        .is_err());
        assert!(sga_backward(&tape, &w, &v, &CostVolume::zeros(s).unwrap()).is_ok());
    }

    #[test]
    fn layer_identity_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape::new(3, 5, 4, 1);
        let v = random_volume(s, &mut rng);
        let logits = SgaLogits::centered(3, 5, 1, 60.0);
        let (once, _) = sga_layer(&v, &logits).unwrap();
        let (twice, _) = sga_layer(&once, &logits).unwrap();
        for (a, b) in twice.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rows_match_straight_line_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(2, 6, 4, 1);
            let v = random_volume(s, &mut rng);
            let w = random_weights(s, &mut rng);
            let (out, _) = sga_forward_dir(&v, &w, Direction::RightToLeft).unwrap();
            for y in 0..2 {
                // path order for RightToLeft is x = W-1 .. 0
                let xs: Vec<usize> = (0..6).rev().collect();
                let costs: Vec<Vec<f64>> = xs.iter().map(|&x| v.pixel(y, x).to_vec()).collect();
                let wts: Vec<[f64; 5]> = xs
                    .iter()
                    .map(|&x| w.field().at(Direction::RightToLeft, y * 6 + x, 0).try_into().unwrap())
                    .collect();
                let oracle = row_oracle(&costs, &wts);
                for (k, &x) in xs.iter().enumerate() {
                    for d in 0..4 {
                        prop_assert!((out.get(y, x, d, 0) - oracle[k][d]).abs() < 1e-14);
                    }
                }
            }
        }

        #[test]
        fn stays_within_candidate_hull(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(3, 5, 4, 1);
            let v = random_volume(s, &mut rng);
            let w = random_weights(s, &mut rng);
            let lo = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for dir in Direction::ALL {
                let (out, _) = sga_forward_dir(&v, &w, dir).unwrap();
                // zero-filled boundary terms may pull values toward 0, never past the max
                prop_assert!(out.data().iter().all(|&x| x <= hi + 1e-12 && x >= lo.min(0.0) - 1e-12));
            }
        }

        #[test]
        fn schedule_independent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(5, 6, 4, 2);
            let v = random_volume(s, &mut rng);
            let w = random_weights(s, &mut rng);
            let (a, ta) = sga_forward(&v, &w).unwrap();
            let (b, tb) = par::serial(|| sga_forward(&v, &w)).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let g = random_volume(s, &mut rng);
            let ga = sga_backward(&ta, &w, &v, &g).unwrap();
            let gb = par::serial(|| sga_backward(&tb, &w, &v, &g)).unwrap();
            prop_assert_eq!(ga, gb);
        }
    }
}
