//! Central finite-difference checks for every hand-written backward pass.
//!
//! Numeric derivatives here are built from forward passes only. The SGA
//! forward is piecewise linear: its argmax records switch at kinks. An entry
//! whose `±step` probes land on different sides of a kink has no derivative
//! there, so it is counted as skipped rather than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{CostVolume, Shape};
use crate::head::{disparity_regress, regress_backward};
use crate::lga::{self, LgaField, LgaLogits, LgaWeights};
use crate::sga::{self, SgaField, SgaLogits, SgaTape, SLOTS};

pub const STEP: f64 = 1e-5;

/// Agreement rule: an entry passes when its absolute error is within `abs`
/// or its relative error is within `rel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const LAYER: Tolerance = Tolerance {
        rel: 1e-4,
        abs: 1e-7,
    };
    pub const HEAD: Tolerance = Tolerance {
        rel: 1e-6,
        abs: 1e-10,
    };

    fn judge(&self, analytic: f64, numeric: f64) -> (bool, f64) {
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        let reported = if scale > self.abs { rel } else { 0.0 };
        (err <= self.abs || rel <= self.rel, reported)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    /// Largest relative error among entries whose gradient magnitude exceeds
    /// the absolute floor.
    pub max_rel: f64,
    pub max_abs: f64,
}

impl CheckReport {
    fn new(name: impl Into<String>) -> Self {
        CheckReport {
            name: name.into(),
            checked: 0,
            skipped: 0,
            failures: 0,
            max_rel: 0.0,
            max_abs: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, tol: Tolerance, analytic: f64, numeric: f64) {
        let (ok, rel) = tol.judge(analytic, numeric);
        self.checked += 1;
        self.max_rel = self.max_rel.max(rel);
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
        if !ok {
            self.failures += 1;
        }
    }

    fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures += other.failures;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
    }
}

/// Deliberate corruption of analytic gradients, for exercising the failure
/// path of the checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    ScaleAnalytic,
}

impl Fault {
    fn apply(self, g: f64) -> f64 {
        match self {
            Fault::None => g,
            Fault::ScaleAnalytic => g * 1.01 + 1e-3,
        }
    }
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn shape_salt(s: Shape) -> u64 {
    ((s.h as u64) << 48) ^ ((s.w as u64) << 32) ^ ((s.d as u64) << 16) ^ s.f as u64
}

fn random_field(s: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> SgaField {
    let n = s.pixels() * s.f * SLOTS;
    let dirs = std::array::from_fn(|_| (0..n).map(|_| rng.gen_range(lo..hi)).collect());
    SgaField::from_dirs(s.h, s.w, s.f, dirs).expect("sized to shape")
}

fn random_volume(s: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> CostVolume {
    CostVolume::from_vec(s, (0..s.len()).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("sized to shape")
}

fn same_branches(a: &SgaTape, b: &SgaTape) -> bool {
    a.winners() == b.winners()
        && crate::grid::Direction::ALL
            .iter()
            .all(|&d| a.record(d).argmax == b.record(d).argmax)
}

/// SGA gradients of `Σ C^A` with respect to the input volume and the five
/// raw weights of every direction, over `seeds` random instances per shape.
pub fn check_sga(shapes: &[Shape], seeds: u64, fault: Fault) -> Result<CheckReport> {
    let mut report = CheckReport::new("sga");
    for &s in shapes {
        for seed in 0..seeds {
            report.merge(check_sga_instance(s, seed, fault)?);
        }
    }
    Ok(report)
}

fn check_sga_instance(s: Shape, seed: u64, fault: Fault) -> Result<CheckReport> {
    let tol = Tolerance::LAYER;
    let mut rng = seeded(seed, shape_salt(s));
    let vol = random_volume(s, &mut rng, 0.0, 1.0);
    let weights = sga::normalize_logits(&SgaLogits::new(random_field(s, &mut rng, -2.0, 2.0))?)?;
    let (_, tape) = sga::sga_forward(&vol, &weights)?;
    let ones = CostVolume::new(s.h, s.w, s.d, s.f, 1.0)?;
    let (g_in, g_w) = sga::sga_backward(&tape, &weights, &vol, &ones)?;

    let loss = |v: &CostVolume, w: &SgaField| {
        let (out, tape) = sga::forward_all(v, w);
        (out.data().iter().sum::<f64>(), tape)
    };

    let mut report = CheckReport::new("sga");
    for i in 0..s.len() {
        let mut plus = vol.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = vol.clone();
        minus.data_mut()[i] -= STEP;
        let (lp, tp) = loss(&plus, weights.field());
        let (lm, tm) = loss(&minus, weights.field());
        if !same_branches(&tp, &tape) || !same_branches(&tm, &tape) {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        report.record(tol, fault.apply(g_in.data()[i]), numeric);
    }
    for dir in crate::grid::Direction::ALL {
        for i in 0..weights.field().dir(dir).len() {
            let mut plus = weights.field().clone();
            plus.dir_mut(dir)[i] += STEP;
            let mut minus = weights.field().clone();
            minus.dir_mut(dir)[i] -= STEP;
            let (lp, tp) = loss(&vol, &plus);
            let (lm, tm) = loss(&vol, &minus);
            if !same_branches(&tp, &tape) || !same_branches(&tm, &tape) {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            report.record(tol, fault.apply(g_w.dir(dir)[i]), numeric);
        }
    }
    Ok(report)
}

/// SGA layer gradients with respect to the logits (softmax included), for a
/// random linear functional of the output.
pub fn check_sga_logits(shapes: &[Shape], seeds: u64, fault: Fault) -> Result<CheckReport> {
    let tol = Tolerance::LAYER;
    let mut report = CheckReport::new("sga_logits");
    for &s in shapes {
        for seed in 0..seeds {
            let mut rng = seeded(seed, shape_salt(s) ^ 0x10);
            let vol = random_volume(s, &mut rng, 0.0, 1.0);
            let logits = SgaLogits::new(random_field(s, &mut rng, -1.5, 1.5))?;
            let probe = random_volume(s, &mut rng, -1.0, 1.0);
            let (_, lt) = sga::sga_layer(&vol, &logits)?;
            let (_, g_l) = sga::sga_layer_backward(&lt, &probe)?;
            let loss = |l: &SgaField| -> Result<(f64, SgaTape)> {
                let (out, t) = sga::sga_layer(&vol, &SgaLogits::new(l.clone())?)?;
                let v = out
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, b)| a * b)
                    .sum();
                Ok((v, t.tape))
            };
            for dir in crate::grid::Direction::ALL {
                for i in 0..logits.field().dir(dir).len() {
                    let mut plus = logits.field().clone();
                    plus.dir_mut(dir)[i] += STEP;
                    let mut minus = logits.field().clone();
                    minus.dir_mut(dir)[i] -= STEP;
                    let (lp, tp) = loss(&plus)?;
                    let (lm, tm) = loss(&minus)?;
                    if !same_branches(&tp, &lt.tape) || !same_branches(&tm, &lt.tape) {
                        report.skipped += 1;
                        continue;
                    }
                    let numeric = (lp - lm) / (2.0 * STEP);
                    report.record(tol, fault.apply(g_l.dir(dir)[i]), numeric);
                }
            }
        }
    }
    Ok(report)
}

/// LGA gradients (input and raw weights) of a random linear functional of
/// the output after `repeats` applications.
pub fn check_lga(
    shape: Shape,
    k: usize,
    repeats: usize,
    seeds: u64,
    fault: Fault,
) -> Result<CheckReport> {
    let tol = Tolerance::LAYER;
    let mut report = CheckReport::new(format!("lga_k{k}_x{repeats}"));
    for seed in 0..seeds {
        let mut rng = seeded(seed, shape_salt(shape) ^ 0x20);
        let vol = random_volume(shape, &mut rng, -1.0, 1.0);
        let n = shape.pixels() * shape.f * 3 * k * k;
        let logits = LgaLogits::new(LgaField::from_vec(
            shape.h,
            shape.w,
            shape.f,
            k,
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )?)?;
        let weights = lga::lga_normalize(&logits)?;
        let probe = random_volume(shape, &mut rng, -1.0, 1.0);
        let (_, tape) = lga::lga_forward(&vol, &weights, repeats)?;
        let (g_in, g_w) = lga::lga_backward(&tape, &weights, &probe)?;

        let loss = |v: &CostVolume, w: &LgaField| {
            let (out, _) = lga::lga_forward(v, &LgaWeights::new_unchecked(w.clone()), repeats)
                .expect("shapes fixed");
            out.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..shape.len() {
            let mut plus = vol.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = vol.clone();
            minus.data_mut()[i] -= STEP;
            let numeric =
                (loss(&plus, weights.field()) - loss(&minus, weights.field())) / (2.0 * STEP);
            report.record(tol, fault.apply(g_in.data()[i]), numeric);
        }
        for i in 0..n {
            let mut plus = weights.field().clone();
            plus.data_mut()[i] += STEP;
            let mut minus = weights.field().clone();
            minus.data_mut()[i] -= STEP;
            let numeric = (loss(&vol, &plus) - loss(&vol, &minus)) / (2.0 * STEP);
            report.record(tol, fault.apply(g_w.data()[i]), numeric);
        }
    }
    Ok(report)
}

/// Regression-head gradient of `Σ_p g_p·d̂_p` with respect to the costs.
pub fn check_regression(shape: Shape, seeds: u64, fault: Fault) -> Result<CheckReport> {
    let tol = Tolerance::HEAD;
    let mut report = CheckReport::new("regression");
    for seed in 0..seeds {
        let mut rng = seeded(seed, shape_salt(shape) ^ 0x30);
        let vol = random_volume(shape, &mut rng, 0.0, 3.0);
        let probe: Vec<f64> = (0..shape.pixels())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let (_, prob) = disparity_regress(&vol)?;
        let g = regress_backward(&probe, &prob)?;
        let loss = |v: &CostVolume| -> Result<f64> {
            let (m, _) = disparity_regress(v)?;
            Ok(m.values().iter().zip(&probe).map(|(a, b)| a * b).sum())
        };
        for i in 0..shape.len() {
            let mut plus = vol.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = vol.clone();
            minus.data_mut()[i] -= STEP;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * STEP);
            report.record(tol, fault.apply(g.data()[i]), numeric);
        }
    }
    Ok(report)
}

/// Shapes the SGA gradient check covers.
pub const SGA_SHAPES: [(usize, usize, usize, usize); 3] =
    [(2, 2, 3, 1), (4, 4, 6, 2), (3, 5, 8, 1)];

pub fn sga_shapes() -> Vec<Shape> {
    SGA_SHAPES
        .iter()
        .map(|&(h, w, d, f)| Shape::new(h, w, d, f))
        .collect()
}

/// The full suite run by the `gradcheck` subcommand.
pub fn run_all(seeds: u64, fault: Fault) -> Result<Vec<CheckReport>> {
    let shapes = sga_shapes();
    Ok(vec![
        check_sga(&shapes, seeds, fault)?,
        check_sga_logits(&shapes[..2], seeds.min(5), fault)?,
        check_lga(Shape::new(5, 5, 4, 1), 3, 1, seeds, fault)?,
        check_lga(Shape::new(4, 4, 3, 2), 3, 2, seeds.min(5), fault)?,
        check_regression(Shape::new(2, 3, 6, 1), seeds, fault)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_rule() {
        let t = Tolerance::LAYER;
        assert!(t.judge(1.0, 1.00005).0);
        assert!(!t.judge(1.0, 1.001).0);
        assert!(t.judge(1e-9, 5e-8).0);
    }

    #[test]
    fn small_suite_passes() {
        let r = check_sga(&[Shape::new(2, 3, 3, 1)], 3, Fault::None).unwrap();
        assert!(r.passed(), "{r:?}");
        let r = check_lga(Shape::new(3, 3, 3, 1), 3, 2, 2, Fault::None).unwrap();
        assert!(r.passed(), "{r:?}");
        let r = check_regression(Shape::new(1, 2, 4, 1), 2, Fault::None).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let r = check_sga(&[Shape::new(2, 2, 3, 1)], 1, Fault::ScaleAnalytic).unwrap();
        assert!(!r.passed());
        let r = check_regression(Shape::new(1, 2, 4, 1), 1, Fault::ScaleAnalytic).unwrap();
        assert!(!r.passed());
    }
}
