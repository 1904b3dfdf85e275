//! Soft-argmin disparity regression, smooth-L1 loss and error metrics.

use crate::error::{Error, Result};
use crate::grid::{CostVolume, DisparityMap, Shape};
use crate::par;

/// `softmax_d(-C(p, d))` for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl ProbabilityVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.d..(p + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Expected disparity `Σ_d d·prob(p, d)` at pixel `p`.
    pub fn expectation(&self, p: usize) -> f64 {
        expectation(self.pixel(p))
    }
}

fn expectation(prob: &[f64]) -> f64 {
    let hi = (prob.len() - 1) as f64;
    prob.iter()
        .enumerate()
        .map(|(d, &q)| d as f64 * q)
        .sum::<f64>()
        .clamp(0.0, hi)
}

/// Turns aggregated costs into a sub-pixel disparity map.
pub fn disparity_regress(vol: &CostVolume) -> Result<(DisparityMap, ProbabilityVolume)> {
    let s = vol.shape();
    if s.f != 1 {
        return Err(Error::Config(format!(
            "regression needs a single feature channel, got {}; reduce first",
            s.f
        )));
    }
    vol.ensure_finite()?;
    let nd = s.d;
    let mut prob = vol.data().to_vec();
    par::for_each_chunk_mut(&mut prob, nd, |_, px| {
        let m = px.iter().map(|c| -c).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in px.iter_mut() {
            *v = (-*v - m).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    });
    let values = prob.chunks_exact(nd).map(expectation).collect();
    let map = DisparityMap::dense(s.h, s.w, values)?;
    Ok((
        map,
        ProbabilityVolume {
            h: s.h,
            w: s.w,
            d: nd,
            data: prob,
        },
    ))
}

/// Cost gradient from a per-pixel gradient on the regressed disparity:
/// `∂d̂/∂C(p,d) = -prob(p,d)·(d - d̂(p))`.
pub fn regress_backward(grad_disp: &[f64], prob: &ProbabilityVolume) -> Result<CostVolume> {
    let (h, w, nd) = prob.dims();
    if grad_disp.len() != h * w {
        return Err(Error::Shape(format!(
            "disparity gradient has {} entries for a {h}x{w} map",
            grad_disp.len()
        )));
    }
    let mut out = vec![0.0; h * w * nd];
    par::for_each_chunk_mut(&mut out, nd, |p, px| {
        let pr = prob.pixel(p);
        let mean = expectation(pr);
        let g = grad_disp[p];
        for (d, o) in px.iter_mut().enumerate() {
            *o = -g * pr[d] * (d as f64 - mean);
        }
    });
    CostVolume::from_vec(Shape::new(h, w, nd, 1), out)
}

/// Smooth-L1 loss per pixel: `x²/2` below one, `x - 1/2` above.
pub fn smooth_l1_value(err: f64) -> f64 {
    let x = err.abs();
    if x < 1.0 {
        0.5 * x * x
    } else {
        x - 0.5
    }
}

fn smooth_l1_slope(err: f64) -> f64 {
    err.signum() * err.abs().min(1.0)
}

fn check_pair(pred: &DisparityMap, gt: &DisparityMap) -> Result<usize> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if gt.mask().iter().zip(pred.mask()).any(|(&g, &p)| g && !p) {
        return Err(Error::Shape(
            "prediction is missing pixels that have ground truth".into(),
        ));
    }
    match gt.valid_count() {
        0 => Err(Error::EmptyGroundTruth),
        n => Ok(n),
    }
}

/// Mean smooth-L1 over pixels with ground truth, and its gradient with
/// respect to every predicted disparity (zero where ground truth is absent).
pub fn smooth_l1(pred: &DisparityMap, gt: &DisparityMap) -> Result<(f64, Vec<f64>)> {
    let n = check_pair(pred, gt)? as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.values().len()];
    for (i, ((&p, &g), &m)) in pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(gt.mask())
        .enumerate()
    {
        if m {
            loss += smooth_l1_value(p - g);
            grad[i] = smooth_l1_slope(p - g) / n;
        }
    }
    Ok((loss / n, grad))
}

/// End-point error and threshold error rates over valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub epe: f64,
    pub valid: usize,
    /// `(t, fraction of pixels with |error| > t)`.
    pub rates: Vec<(f64, f64)>,
}

impl Metrics {
    pub fn rate(&self, t: f64) -> Option<f64> {
        self.rates.iter().find(|(k, _)| *k == t).map(|(_, r)| *r)
    }
}

pub fn evaluate(pred: &DisparityMap, gt: &DisparityMap, thresholds: &[f64]) -> Result<Metrics> {
    let n = check_pair(pred, gt)?;
    let errors: Vec<f64> = pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(gt.mask())
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p - g).abs())
        .collect();
    let epe = errors.iter().sum::<f64>() / n as f64;
    let rates = thresholds
        .iter()
        .map(|&t| {
            let bad = errors.iter().filter(|&&e| e > t).count();
            (t, bad as f64 / n as f64)
        })
        .collect();
    Ok(Metrics {
        epe,
        valid: n,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(d: usize, costs: &[f64]) -> CostVolume {
        CostVolume::from_vec(Shape::new(1, costs.len() / d, d, 1), costs.to_vec()).unwrap()
    }

    #[test]
    fn uniform_costs_regress_to_middle() {
        let (m, p) = disparity_regress(&CostVolume::new(3, 2, 4, 1, 0.7).unwrap()).unwrap();
        assert!(m.values().iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dominant_cost_wins() {
        let (m, _) = disparity_regress(&vol(4, &[0.0, 0.0, -1000.0, 0.0])).unwrap();
        assert!((m.values()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn closed_form_two_candidates() {
        let (m, p) = disparity_regress(&vol(2, &[0.0, 3f64.ln()])).unwrap();
        assert!((p.pixel(0)[0] - 0.75).abs() < 1e-15);
        assert!((p.pixel(0)[1] - 0.25).abs() < 1e-15);
        assert!((m.values()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn multichannel_rejected() {
        let v = CostVolume::new(1, 1, 3, 2, 0.0).unwrap();
        assert!(matches!(disparity_regress(&v), Err(Error::Config(_))));
    }

    #[test]
    fn backward_closed_forms() {
        let (_, p) = disparity_regress(&vol(2, &[0.4, 0.4])).unwrap();
        let g = regress_backward(&[1.0], &p).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-15);
        assert!((g.data()[1] + 0.25).abs() < 1e-15);

        let (_, p) = disparity_regress(&vol(3, &[0.0, -800.0, 0.0])).unwrap();
        let g = regress_backward(&[1.0], &p).unwrap();
        assert!(g.data().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn backward_shape_mismatch() {
        let (_, p) = disparity_regress(&vol(2, &[0.0, 1.0])).unwrap();
        assert!(regress_backward(&[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1_value(0.5), 0.125);
        assert_eq!(smooth_l1_value(-1.0), 0.5);
        assert_eq!(smooth_l1_value(2.0), 1.5);
        // both branches meet at 1 in value and slope
        let below = 1.0 - 1e-9;
        assert!((smooth_l1_value(below) - 0.5).abs() < 1e-8);
        assert!((smooth_l1_slope(below) - 1.0).abs() < 1e-8);
        assert_eq!(smooth_l1_slope(1.0), 1.0);
    }

    #[test]
    fn smooth_l1_mean_and_grad() {
        let pred = DisparityMap::dense(1, 3, vec![1.5, 3.0, 0.0]).unwrap();
        let gt = DisparityMap::new(1, 3, vec![1.0, 1.0, 9.0], vec![true, true, false]).unwrap();
        let (loss, grad) = smooth_l1(&pred, &gt).unwrap();
        assert_eq!(loss, (0.125 + 1.5) / 2.0);
        assert_eq!(grad, vec![0.25, 0.5, 0.0]);
    }

    #[test]
    fn empty_ground_truth() {
        let pred = DisparityMap::dense(1, 2, vec![0.0, 0.0]).unwrap();
        let gt = DisparityMap::new(1, 2, vec![0.0, 0.0], vec![false, false]).unwrap();
        assert!(matches!(
            smooth_l1(&pred, &gt),
            Err(Error::EmptyGroundTruth)
        ));
        assert!(matches!(
            evaluate(&pred, &gt, &[3.0]),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn metrics_examples() {
        let gt = DisparityMap::dense(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = evaluate(&gt, &gt, &[1.0, 3.0]).unwrap();
        assert_eq!(m.epe, 0.0);
        assert_eq!(m.rate(1.0), Some(0.0));

        let off = DisparityMap::dense(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = evaluate(&off, &gt, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.epe, 2.0);
        assert_eq!(m.rate(3.0), Some(0.0));
        assert_eq!(m.rate(2.0), Some(0.0));
        assert_eq!(m.rate(1.0), Some(1.0));
    }

    proptest! {
        #[test]
        fn shift_invariant(seed in any::<u64>(), k in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..5.0)).collect();
            let (a, _) = disparity_regress(&vol(6, &c)).unwrap();
            let shifted: Vec<f64> = c.iter().map(|v| v + k).collect();
            let (b, _) = disparity_regress(&vol(6, &shifted)).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn probabilities_are_distributions(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..40).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let (m, p) = disparity_regress(&vol(8, &c)).unwrap();
            for px in 0..5 {
                let s: f64 = p.pixel(px).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(p.pixel(px).iter().all(|&q| q >= 0.0));
            }
            prop_assert!(m.validate_range(8).is_ok());
        }
    }
}
