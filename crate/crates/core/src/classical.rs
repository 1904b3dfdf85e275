//! Traditional aggregation baselines: the local cost filter, four-path
//! semi-global matching, and an exact 1-D energy minimiser used as an
//! oracle for SGM on single scanlines.

use crate::error::{Error, Result};
use crate::grid::{CostVolume, Direction, Image, Shape};
use crate::par;

const NORM_TOL: f64 = 1e-9;

/// Per-pixel `K×K` averaging weights `ω(p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    h: usize,
    w: usize,
    k: usize,
    weights: Vec<f64>,
}

impl FilterKernel {
    /// Wraps raw weights laid out as `(y, x, ky, kx)`; each pixel's kernel
    /// must be nonnegative and sum to one.
    pub fn new(h: usize, w: usize, k: usize, weights: Vec<f64>) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if weights.len() != h * w * k * k {
            return Err(Error::Shape(format!(
                "kernel weights: expected {} values, got {}",
                h * w * k * k,
                weights.len()
            )));
        }
        for (p, kern) in weights.chunks_exact(k * k).enumerate() {
            if kern.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!(
                    "negative or non-finite weight at pixel {p}"
                )));
            }
            let sum: f64 = kern.iter().sum();
            if (sum - 1.0).abs() > NORM_TOL {
                return Err(Error::Config(format!(
                    "kernel at pixel {p} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(FilterKernel { h, w, k, weights })
    }

    pub fn uniform(h: usize, w: usize, k: usize) -> Result<Self> {
        let v = 1.0 / (k * k) as f64;
        Self::new(h, w, k, vec![v; h * w * k * k])
    }

    /// Identity kernel: all mass on the centre tap.
    pub fn delta(h: usize, w: usize, k: usize) -> Result<Self> {
        let mut weights = vec![0.0; h * w * k * k];
        let c = (k / 2) * k + k / 2;
        for p in 0..h * w {
            weights[p * k * k + c] = 1.0;
        }
        Self::new(h, w, k, weights)
    }

    /// Bilateral weights from a guide image, normalised over in-image taps.
    pub fn bilateral(guide: &Image, k: usize, sigma_space: f64, sigma_range: f64) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        let (h, w) = (guide.height(), guide.width());
        let r = (k / 2) as isize;
        let mut weights = vec![0.0; h * w * k * k];
        for y in 0..h {
            for x in 0..w {
                let kern = &mut weights[(y * w + x) * k * k..(y * w + x + 1) * k * k];
                let center = guide.get(y, x);
                for (t, (dy, dx)) in taps(r).enumerate() {
                    let (qy, qx) = (y as isize + dy, x as isize + dx);
                    if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                        continue;
                    }
                    let ds = (dy * dy + dx * dx) as f64 / (2.0 * sigma_space * sigma_space);
                    let dr = (guide.get(qy as usize, qx as usize) - center).powi(2)
                        / (2.0 * sigma_range * sigma_range);
                    kern[t] = (-ds - dr).exp();
                }
                let sum: f64 = kern.iter().sum();
                kern.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Self::new(h, w, k, weights)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn kernel(&self, y: usize, x: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.weights[(y * self.w + x) * kk..(y * self.w + x + 1) * kk]
    }
}

/// Kernel tap offsets in row-major order.
fn taps(r: isize) -> impl Iterator<Item = (isize, isize)> {
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}

/// Filters every disparity plane with the same per-pixel weights; taps
/// outside the image contribute nothing.
pub fn cost_filter(vol: &CostVolume, kernel: &FilterKernel) -> Result<CostVolume> {
    let s = vol.shape();
    if s.f != 1 {
        return Err(Error::Config(
            "cost filter needs a single-channel volume".into(),
        ));
    }
    if (kernel.h, kernel.w) != (s.h, s.w) {
        return Err(Error::Shape(format!(
            "kernel covers {}x{}, volume is {}x{}",
            kernel.h, kernel.w, s.h, s.w
        )));
    }
    let r = (kernel.k / 2) as isize;
    let mut out = CostVolume::zeros(s)?;
    par::for_each_chunk_mut(out.data_mut(), s.w * s.d, |y, row| {
        for x in 0..s.w {
            let kern = kernel.kernel(y, x);
            let acc = &mut row[x * s.d..(x + 1) * s.d];
            for (t, (dy, dx)) in taps(r).enumerate() {
                let (qy, qx) = (y as isize + dy, x as isize + dx);
                if qy < 0 || qx < 0 || qy >= s.h as isize || qx >= s.w as isize {
                    continue;
                }
                let wgt = kern[t];
                let src = vol.pixel(qy as usize, qx as usize);
                for (a, c) in acc.iter_mut().zip(src) {
                    *a += wgt * c;
                }
            }
        }
    });
    Ok(out)
}

/// Smoothness penalties and scan directions for SGM.
#[derive(Debug, Clone, PartialEq)]
pub struct SgmParams {
    pub p1: f64,
    pub p2: f64,
    pub directions: Vec<Direction>,
}

impl SgmParams {
    pub fn new(p1: f64, p2: f64) -> Result<Self> {
        let p = SgmParams {
            p1,
            p2,
            directions: Direction::ALL.to_vec(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p1 >= 0.0) || !(self.p2 >= self.p1) || !self.p2.is_finite() {
            return Err(Error::Config(format!(
                "need 0 <= p1 <= p2 < inf, got p1={} p2={}",
                self.p1, self.p2
            )));
        }
        Ok(())
    }
}

/// One SGM path pass along `dir`:
/// `A(p,d) = C(p,d) + min{A(p-r,d), A(p-r,d±1) + P1, min_i A(p-r,i) + P2}`,
/// with `A = C` at the first pixel of each path. No running-minimum
/// subtraction is applied.
pub fn sgm_aggregate_dir(
    vol: &CostVolume,
    dir: Direction,
    params: &SgmParams,
) -> Result<CostVolume> {
    params.validate()?;
    let s = vol.shape();
    if s.f != 1 {
        return Err(Error::Config("SGM needs a single-channel volume".into()));
    }
    let (nd, len) = (s.d, dir.line_len(s.h, s.w));
    let lines = par::map_indexed(dir.line_count(s.h, s.w), |line| {
        let mut buf = vec![0.0; len * nd];
        for k in 0..len {
            let p = dir.pixel_at(s.h, s.w, line, k);
            let cost = &vol.data()[p * nd..(p + 1) * nd];
            if k == 0 {
                buf[..nd].copy_from_slice(cost);
                continue;
            }
            let (done, cur) = buf.split_at_mut(k * nd);
            let prev = &done[(k - 1) * nd..];
            let prev_min = prev.iter().copied().fold(f64::INFINITY, f64::min);
            for d in 0..nd {
                let mut best = prev[d];
                if d > 0 {
                    best = best.min(prev[d - 1] + params.p1);
                }
                if d + 1 < nd {
                    best = best.min(prev[d + 1] + params.p1);
                }
                best = best.min(prev_min + params.p2);
                cur[d] = cost[d] + best;
            }
        }
        buf
    });
    let mut out = CostVolume::zeros(s)?;
    let data = out.data_mut();
    for (line, buf) in lines.iter().enumerate() {
        for k in 0..len {
            let p = dir.pixel_at(s.h, s.w, line, k);
            data[p * nd..(p + 1) * nd].copy_from_slice(&buf[k * nd..(k + 1) * nd]);
        }
    }
    Ok(out)
}

/// Sums per-direction aggregated volumes.
pub fn sgm_fuse(volumes: &[CostVolume]) -> Result<CostVolume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Config("nothing to fuse".into()))?;
    let mut out = first.clone();
    for v in &volumes[1..] {
        v.ensure_shape(first.shape(), "sgm_fuse")?;
        for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += x;
        }
    }
    Ok(out)
}

/// Full SGM: aggregate along each configured direction and sum.
pub fn sgm(vol: &CostVolume, params: &SgmParams) -> Result<CostVolume> {
    let per_dir = params
        .directions
        .iter()
        .map(|&d| sgm_aggregate_dir(vol, d, params))
        .collect::<Result<Vec<_>>>()?;
    sgm_fuse(&per_dir)
}

/// Costs along one scanline, `X` positions by `D` disparities.
#[derive(Debug, Clone, PartialEq)]
pub struct Scanline {
    pub len: usize,
    pub d: usize,
    pub costs: Vec<f64>,
}

impl Scanline {
    pub fn new(len: usize, d: usize, costs: Vec<f64>) -> Result<Self> {
        if len == 0 || d == 0 || costs.len() != len * d {
            return Err(Error::Shape(format!(
                "scanline {len}x{d} with {} costs",
                costs.len()
            )));
        }
        Ok(Scanline { len, d, costs })
    }

    /// Row `y` of a single-channel volume.
    pub fn from_row(vol: &CostVolume, y: usize) -> Result<Self> {
        let s = vol.shape();
        if s.f != 1 || y >= s.h {
            return Err(Error::Config(
                "row must exist in a single-channel volume".into(),
            ));
        }
        let n = s.w * s.d;
        Self::new(s.w, s.d, vol.data()[y * n..(y + 1) * n].to_vec())
    }

    #[inline]
    fn cost(&self, x: usize, d: usize) -> f64 {
        self.costs[x * self.d + d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Enumerates all `D^X` labelings; limited to `X <= 12`.
    Exhaustive,
    /// Dynamic programming over the chain.
    Viterbi,
}

pub const EXHAUSTIVE_MAX_LEN: usize = 12;

#[inline]
fn pairwise(a: usize, b: usize, params: &SgmParams) -> f64 {
    match a.abs_diff(b) {
        0 => 0.0,
        1 => params.p1,
        _ => params.p2,
    }
}

/// Energy of a labeling restricted to one scanline:
/// data costs plus `P1` for unit jumps and `P2` for larger ones.
pub fn scanline_energy(line: &Scanline, labels: &[usize], params: &SgmParams) -> f64 {
    let mut e = 0.0;
    for (x, &d) in labels.iter().enumerate() {
        e += line.cost(x, d);
        if x > 0 {
            e += pairwise(labels[x - 1], d, params);
        }
    }
    e
}

/// Minimises the scanline energy. Among optimal labelings the
/// lexicographically smallest is returned, in both modes.
pub fn scanline_energy_min(
    line: &Scanline,
    params: &SgmParams,
    mode: SearchMode,
) -> Result<(Vec<usize>, f64)> {
    params.validate()?;
    let labels = match mode {
        SearchMode::Exhaustive => {
            if line.len > EXHAUSTIVE_MAX_LEN {
                return Err(Error::Config(format!(
                    "exhaustive search limited to {EXHAUSTIVE_MAX_LEN} positions, got {}",
                    line.len
                )));
            }
            exhaustive(line, params)
        }
        SearchMode::Viterbi => viterbi(line, params),
    };
    let energy = scanline_energy(line, &labels, params);
    Ok((labels, energy))
}

/// Depth-first enumeration in lexicographic order; a labeling replaces the
/// incumbent only when strictly better.
fn exhaustive(line: &Scanline, params: &SgmParams) -> Vec<usize> {
    let (n, nd) = (line.len, line.d);
    let mut labels = vec![0usize; n];
    // prefix[x] = energy of labels[..x]
    let mut prefix = vec![0.0; n + 1];
    let mut best = (f64::INFINITY, labels.clone());
    let mut x = 0;
    let mut next = vec![0usize; n];
    loop {
        if next[x] == nd {
            if x == 0 {
                break;
            }
            next[x] = 0;
            x -= 1;
            continue;
        }
        let d = next[x];
        next[x] += 1;
        labels[x] = d;
        let mut e = prefix[x] + line.cost(x, d);
        if x > 0 {
            e += pairwise(labels[x - 1], d, params);
        }
        prefix[x + 1] = e;
        if x + 1 == n {
            // re-evaluate in one pass so the comparison matches scanline_energy bitwise
            let total = scanline_energy(line, &labels, params);
            if total < best.0 {
                best = (total, labels.clone());
            }
        } else {
            x += 1;
        }
    }
    best.1
}

/// Backward cost-to-go, then a forward pass choosing the lowest label that
/// stays optimal at each position.
fn viterbi(line: &Scanline, params: &SgmParams) -> Vec<usize> {
    let (n, nd) = (line.len, line.d);
    let mut togo = vec![0.0; n * nd];
    for d in 0..nd {
        togo[(n - 1) * nd + d] = line.cost(n - 1, d);
    }
    for x in (0..n - 1).rev() {
        for d in 0..nd {
            let best = (0..nd)
                .map(|e| pairwise(d, e, params) + togo[(x + 1) * nd + e])
                .fold(f64::INFINITY, f64::min);
            togo[x * nd + d] = line.cost(x, d) + best;
        }
    }
    let mut labels = Vec::with_capacity(n);
    let first = argmin((0..nd).map(|d| togo[d]));
    labels.push(first);
    for x in 1..n {
        let prev = labels[x - 1];
        labels.push(argmin(
            (0..nd).map(|e| pairwise(prev, e, params) + togo[x * nd + e]),
        ));
    }
    labels
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            },
        )
        .0
}

/// Shape check shared by callers that build SGM inputs by hand.
pub fn scanline_volume(line: &Scanline) -> Result<CostVolume> {
    CostVolume::from_vec(Shape::new(1, line.len, line.d, 1), line.costs.clone())
}
