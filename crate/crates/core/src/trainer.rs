//! Synthetic stereo scenes and a gradient-descent trainer for the guidance
//! logits of a stack of SGA layers and an optional LGA stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{CostVolume, DisparityMap, Image};
use crate::head::{disparity_regress, evaluate, regress_backward, smooth_l1, Metrics};
use crate::lga::{self, LgaLogits, LgaTape, LgaWeights};
use crate::matching::{build_cost_volume, MatchConfig};
use crate::sga::{self, SgaLayerTape, SgaLogits};

pub const SCENE_DMAX: usize = 16;
pub const MAX_SGA_LAYERS: usize = 4;
/// Census costs live in `[0, 1]`; this factor sharpens the regression
/// softmax so a clear minimum dominates the expectation.
pub const DEFAULT_COST_SCALE: f64 = 20.0;
/// Intensity of the textureless band.
const BAND_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisparityLayout {
    /// Horizontal stripes of random height, each with its own disparity in
    /// `[2, d_max/2]`.
    Stripes,
    /// One disparity everywhere.
    Constant(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_max: usize,
    pub band_width: usize,
    pub seed: u64,
    pub layout: DisparityLayout,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, band_width: usize, seed: u64) -> Self {
        SceneConfig {
            height,
            width,
            d_max: SCENE_DMAX,
            band_width,
            seed,
            layout: DisparityLayout::Stripes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub left: Image,
    pub right: Image,
    pub gt: DisparityMap,
    /// True inside the textureless band.
    pub ambiguous_mask: Vec<bool>,
    pub d_max: usize,
}

impl SyntheticScene {
    /// Column range of the textureless band in the left image.
    pub fn band_columns(width: usize, band_width: usize) -> std::ops::Range<usize> {
        let start = (width - band_width) / 2;
        start..start + band_width
    }
}

/// Random-texture stripes scene with a centred vertical textureless band.
pub fn make_scene(h: usize, w: usize, seed: u64, band_width: usize) -> Result<SyntheticScene> {
    generate_scene(&SceneConfig::new(h, w, band_width, seed))
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    let (h, w) = (cfg.height, cfg.width);
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("scene size {h}x{w}")));
    }
    if 2 * cfg.band_width >= w {
        return Err(Error::Config(format!(
            "band width {} must be below half the width {w}",
            cfg.band_width
        )));
    }
    if cfg.d_max < 4 {
        return Err(Error::Config(format!(
            "scene d_max must be at least 4, got {}",
            cfg.d_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hi = cfg.d_max / 2;
    let row_disp: Vec<usize> = match cfg.layout {
        DisparityLayout::Constant(d) => {
            if d >= cfg.d_max {
                return Err(Error::Config(format!(
                    "disparity {d} outside [0, {})",
                    cfg.d_max
                )));
            }
            vec![d; h]
        }
        DisparityLayout::Stripes => {
            let mut v = Vec::with_capacity(h);
            while v.len() < h {
                let run = rng.gen_range(8..=16);
                let d = rng.gen_range(2..=hi);
                v.extend(std::iter::repeat_n(d, run));
            }
            v.truncate(h);
            v
        }
    };

    let band = SyntheticScene::band_columns(w, cfg.band_width);
    let mut left = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            left[y * w + x] = if band.contains(&x) {
                BAND_LEVEL
            } else {
                rng.gen::<f64>()
            };
        }
    }
    let mut right = vec![0.0; h * w];
    for y in 0..h {
        let d = row_disp[y];
        for x in 0..w {
            right[y * w + x] = if x + d < w {
                left[y * w + x + d]
            } else {
                rng.gen::<f64>()
            };
        }
    }
    let mask = (0..h * w).map(|i| band.contains(&(i % w))).collect();
    let gt = (0..h * w).map(|i| row_disp[i / w] as f64).collect();
    Ok(SyntheticScene {
        left: Image::gray(h, w, left)?,
        right: Image::gray(h, w, right)?,
        gt: DisparityMap::dense(h, w, gt)?,
        ambiguous_mask: mask,
        d_max: cfg.d_max,
    })
}

/// Learnable aggregation stack: SGA layers in order, then an optional LGA
/// stage applied [`lga::DEFAULT_REPEATS`] times.
#[derive(Debug, Clone, PartialEq)]
pub struct GaModel {
    pub height: usize,
    pub width: usize,
    pub sga: Vec<SgaLogits>,
    pub lga: Option<LgaLogits>,
    pub cost_scale: f64,
}

/// Initial logit on the cost term of each SGA group.
pub const SGA_INIT_W0: f64 = 1.0;
/// Initial logit on the centre tap of the LGA `ω0` kernel.
pub const LGA_INIT_CENTRE: f64 = 6.0;

impl GaModel {
    pub fn init(height: usize, width: usize, sga_layers: usize, use_lga: bool) -> Result<Self> {
        if sga_layers > MAX_SGA_LAYERS {
            return Err(Error::Config(format!(
                "at most {MAX_SGA_LAYERS} SGA layers, got {sga_layers}"
            )));
        }
        let sga = (0..sga_layers)
            .map(|_| SgaLogits::centered(height, width, 1, SGA_INIT_W0))
            .collect();
        let lga = if use_lga {
            Some(LgaLogits::centered(
                height,
                width,
                1,
                lga::DEFAULT_KERNEL,
                LGA_INIT_CENTRE,
            )?)
        } else {
            None
        };
        Ok(GaModel {
            height,
            width,
            sga,
            lga,
            cost_scale: DEFAULT_COST_SCALE,
        })
    }

    fn check_volume(&self, vol: &CostVolume) -> Result<()> {
        let s = vol.shape();
        if (s.h, s.w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "model trained for {}x{}, volume is {}x{}",
                self.height, self.width, s.h, s.w
            )));
        }
        Ok(())
    }

    /// Aggregates a raw single-channel cost volume and regresses disparity.
    pub fn infer(&self, raw: &CostVolume) -> Result<DisparityMap> {
        Ok(self.forward(raw)?.disparity)
    }

    pub fn forward(&self, raw: &CostVolume) -> Result<Forward> {
        self.check_volume(raw)?;
        let mut vol = raw.scaled(self.cost_scale);
        let mut sga_tapes = Vec::with_capacity(self.sga.len());
        for logits in &self.sga {
            let (out, tape) = sga::sga_layer(&vol, logits)?;
            sga_tapes.push(tape);
            vol = out;
        }
        let lga_tape = match &self.lga {
            Some(logits) => {
                let weights = lga::lga_normalize(logits)?;
                let (out, tape) = lga::lga_forward(&vol, &weights, lga::DEFAULT_REPEATS)?;
                vol = out;
                Some((weights, tape))
            }
            None => None,
        };
        let (disparity, prob) = disparity_regress(&vol)?;
        Ok(Forward {
            disparity,
            prob,
            sga_tapes,
            lga_tape,
        })
    }

    /// Logit gradients for a gradient on the regressed disparity.
    pub fn backward(&self, fwd: &Forward, grad_disp: &[f64]) -> Result<Gradients> {
        let mut g = regress_backward(grad_disp, &fwd.prob)?;
        let lga = match &fwd.lga_tape {
            Some((weights, tape)) => {
                let (gi, gw) = lga::lga_backward(tape, weights, &g)?;
                g = gi;
                Some(lga::lga_logit_grad(weights, &gw))
            }
            None => None,
        };
        let mut sga = Vec::with_capacity(fwd.sga_tapes.len());
        for tape in fwd.sga_tapes.iter().rev() {
            let (gi, gl) = sga::sga_layer_backward(tape, &g)?;
            g = gi;
            sga.push(gl);
        }
        sga.reverse();
        Ok(Gradients { sga, lga })
    }

    fn step(&mut self, grads: &Gradients, lr: f64) {
        for (logits, g) in self.sga.iter_mut().zip(&grads.sga) {
            for (l, d) in logits.field_mut().iter_mut().zip(g.iter()) {
                *l -= lr * d;
            }
        }
        if let (Some(logits), Some(g)) = (self.lga.as_mut(), grads.lga.as_ref()) {
            for (l, d) in logits.field_mut().data_mut().iter_mut().zip(g.data()) {
                *l -= lr * d;
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.sga.iter().map(|l| l.field().len()).sum::<usize>()
            + self.lga.as_ref().map_or(0, |l| l.field().data().len())
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Forward {
    pub disparity: DisparityMap,
    prob: crate::head::ProbabilityVolume,
    sga_tapes: Vec<SgaLayerTape>,
    lga_tape: Option<(LgaWeights, LgaTape)>,
}

pub struct Gradients {
    pub sga: Vec<crate::sga::SgaField>,
    pub lga: Option<crate::lga::LgaField>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub sga_layers: usize,
    pub use_lga: bool,
    pub steps: usize,
    pub lr: f64,
    /// Seed of the scene the CLI generates; the optimisation itself draws no
    /// random numbers.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sga_layers: 3,
            use_lga: false,
            steps: 200,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

pub const DEFAULT_LR: f64 = 2000.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sga_layers > MAX_SGA_LAYERS {
            return Err(Error::Config(format!(
                "sga_layers must be in 0..={MAX_SGA_LAYERS}, got {}",
                self.sga_layers
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Metrics measured at one step, before that step's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub epe: f64,
    pub rate3: f64,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} loss={:.9} epe={:.6} rate3={:.6}",
            self.step, self.loss, self.epe, self.rate3
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GaModel,
    pub history: Vec<StepRecord>,
    /// Metrics of the final model over all pixels.
    pub metrics: Metrics,
    /// End-point error of the final model inside the textureless band.
    pub ambiguous_epe: f64,
}

pub fn train(scene: &SyntheticScene, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (h, w) = (scene.gt.height(), scene.gt.width());
    let raw = build_cost_volume(&scene.left, &scene.right, &MatchConfig::census(scene.d_max))?;
    let mut model = GaModel::init(h, w, cfg.sga_layers, cfg.use_lga)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let fwd = model.forward(&raw)?;
        let (loss, grad) = smooth_l1(&fwd.disparity, &scene.gt)?;
        guard(step, loss)?;
        let m = evaluate(&fwd.disparity, &scene.gt, &[3.0])?;
        history.push(StepRecord {
            step,
            loss,
            epe: m.epe,
            rate3: m.rates[0].1,
        });
        if model.parameter_count() == 0 || cfg.lr == 0.0 {
            continue;
        }
        let grads = model.backward(&fwd, &grad)?;
        model.step(&grads, cfg.lr);
        let finite = model
            .sga
            .iter()
            .all(|l| l.field().iter().all(|v| v.is_finite()))
            && model
                .lga
                .as_ref()
                .is_none_or(|l| l.field().data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
    }
    let pred = model.infer(&raw)?;
    let metrics = evaluate(&pred, &scene.gt, &[1.0, 3.0])?;
    let ambiguous_epe = region_epe(&pred, &scene.gt, &scene.ambiguous_mask)?;
    Ok(TrainOutcome {
        model,
        history,
        metrics,
        ambiguous_epe,
    })
}

fn guard(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// End-point error restricted to pixels where `keep` is set.
pub fn region_epe(pred: &DisparityMap, gt: &DisparityMap, keep: &[bool]) -> Result<f64> {
    Ok(evaluate(pred, &gt.restricted(keep)?, &[])?.epe)
}

/// Fraction of 50-step windows `[t, t+49]` whose last loss is not above its
/// first.
pub fn monotone_window_fraction(history: &[StepRecord], window: usize) -> f64 {
    if history.len() < window || window < 2 {
        return 1.0;
    }
    let n = history.len() + 1 - window;
    let good = (0..n)
        .filter(|&t| history[t + window - 1].loss <= history[t].loss)
        .count();
    good as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::winner_take_all;

    #[test]
    fn scene_is_deterministic() {
        assert_eq!(
            make_scene(16, 40, 3, 6).unwrap(),
            make_scene(16, 40, 3, 6).unwrap()
        );
        assert_ne!(
            make_scene(16, 40, 3, 6).unwrap(),
            make_scene(16, 40, 4, 6).unwrap()
        );
    }

    #[test]
    fn zero_band_has_no_ambiguity() {
        let s = make_scene(8, 20, 1, 0).unwrap();
        assert!(s.ambiguous_mask.iter().all(|&m| !m));
    }

    #[test]
    fn wide_band_rejected() {
        assert!(matches!(make_scene(8, 20, 1, 10), Err(Error::Config(_))));
    }

    #[test]
    fn right_view_is_warped_left() {
        let s = make_scene(24, 48, 5, 8).unwrap();
        for y in 0..24 {
            let d = s.gt.get(y, 0).unwrap() as usize;
            assert!((2..=SCENE_DMAX / 2).contains(&d));
            for x in 0..48 - d {
                assert_eq!(s.right.get(y, x), s.left.get(y, x + d));
            }
        }
    }

    #[test]
    fn band_defeats_winner_take_all() {
        let s = make_scene(64, 96, 7, 16).unwrap();
        let vol = build_cost_volume(&s.left, &s.right, &MatchConfig::census(SCENE_DMAX)).unwrap();
        let wta = winner_take_all(&vol);
        let (mut wrong, mut total) = (0, 0);
        for (i, &d) in wta.iter().enumerate() {
            if s.ambiguous_mask[i] {
                total += 1;
                if d as f64 != s.gt.values()[i] {
                    wrong += 1;
                }
            }
        }
        assert!(wrong * 2 > total, "{wrong}/{total}");
    }

    #[test]
    fn zero_lr_keeps_baseline() {
        let s = make_scene(12, 32, 2, 6).unwrap();
        let cfg = TrainConfig {
            sga_layers: 2,
            steps: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&s, &cfg).unwrap();
        assert_eq!(out.model, GaModel::init(12, 32, 2, false).unwrap());
        assert_eq!(out.history[0].epe, out.metrics.epe);
    }

    #[test]
    fn no_layers_is_raw_regression() {
        let s = make_scene(12, 32, 2, 6).unwrap();
        let out = train(
            &s,
            &TrainConfig {
                sga_layers: 0,
                steps: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let raw = build_cost_volume(&s.left, &s.right, &MatchConfig::census(SCENE_DMAX)).unwrap();
        let (pred, _) = disparity_regress(&raw.scaled(DEFAULT_COST_SCALE)).unwrap();
        let base = evaluate(&pred, &s.gt, &[]).unwrap().epe;
        assert_eq!(out.metrics.epe, base);
        assert!(out.history.iter().all(|r| r.epe == base));
    }

    #[test]
    fn one_step_moves_logits() {
        let s = make_scene(12, 32, 2, 6).unwrap();
        let cfg = TrainConfig {
            sga_layers: 1,
            use_lga: true,
            steps: 1,
            ..TrainConfig::default()
        };
        let out = train(&s, &cfg).unwrap();
        let init = GaModel::init(12, 32, 1, true).unwrap();
        assert_ne!(out.model.sga, init.sga);
        assert_ne!(out.model.lga, init.lga);
    }

    #[test]
    fn training_is_deterministic() {
        let s = make_scene(12, 32, 4, 6).unwrap();
        let cfg = TrainConfig {
            sga_layers: 2,
            steps: 4,
            ..TrainConfig::default()
        };
        let a = train(&s, &cfg).unwrap();
        let b = crate::par::serial(|| train(&s, &cfg)).unwrap();
        let bits = |h: &[StepRecord]| h.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_is_reported() {
        assert!(guard(3, 0.5).is_ok());
        assert!(matches!(
            guard(7, f64::NAN),
            Err(Error::Divergence { step: 7, .. })
        ));
        assert!(matches!(
            guard(2, f64::INFINITY),
            Err(Error::Divergence { step: 2, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            sga_layers: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
