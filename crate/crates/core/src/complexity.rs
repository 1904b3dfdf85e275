//! FLOP accounting for aggregation layers against a 3D convolution, and
//! wall-clock timing of the kernels.
//!
//! One multiply-add counts as two FLOPs everywhere.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classical::{sgm, SgmParams};
use crate::error::{Error, Result};
use crate::grid::{CostVolume, Direction, Shape};
use crate::lga::{self, LgaLogits};
use crate::par;
use crate::sga::{self, SgaLogits, SgaWeights, SLOTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopModel {
    /// `k×k×k` kernel over `c` input channels, `n` output elements.
    Conv3d { k: u64, c: u64, n: u64 },
    /// Five weight slots per element and direction.
    Sga { n: u64, directions: u64 },
    /// Three `k×k` kernels, applied `repeats` times.
    Lga { k: u64, n: u64, repeats: u64 },
}

impl FlopModel {
    pub fn flops(&self) -> Result<u128> {
        let (parts, what): (&[u64], &str) = match self {
            FlopModel::Conv3d { k, c, n } => (&[*k, *c, *n], "conv3d"),
            FlopModel::Sga { n, directions } => (&[*n, *directions], "sga"),
            FlopModel::Lga { k, n, repeats } => (&[*k, *n, *repeats], "lga"),
        };
        if parts.contains(&0) {
            return Err(Error::Config(format!(
                "{what} FLOP model has a zero parameter"
            )));
        }
        let factors: Vec<u128> = match *self {
            FlopModel::Conv3d { k, c, n } => {
                vec![2, k as u128, k as u128, k as u128, c as u128, n as u128]
            }
            FlopModel::Sga { n, directions } => {
                vec![directions as u128, 2, SLOTS as u128, n as u128]
            }
            FlopModel::Lga { k, n, repeats } => {
                vec![repeats as u128, 2, 3, k as u128, k as u128, n as u128]
            }
        };
        factors
            .into_iter()
            .try_fold(1u128, u128::checked_mul)
            .ok_or_else(|| Error::Config(format!("{what} FLOP count overflows 128 bits")))
    }
}

/// SGA against a `3×3×3` convolution at one output element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioRow {
    pub channels: u64,
    pub sga: u128,
    pub conv: u128,
    pub ratio: f64,
    pub below_hundredth: bool,
}

pub const RATIO_CHANNELS: [u64; 3] = [32, 64, 128];

pub fn ratio_table() -> Result<Vec<RatioRow>> {
    let sga = FlopModel::Sga {
        n: 1,
        directions: 4,
    }
    .flops()?;
    RATIO_CHANNELS
        .iter()
        .map(|&c| {
            let conv = FlopModel::Conv3d { k: 3, c, n: 1 }.flops()?;
            Ok(RatioRow {
                channels: c,
                sga,
                conv,
                ratio: sga as f64 / conv as f64,
                below_hundredth: sga * 100 < conv,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    SgaForward,
    SgaBackward,
    /// Dense reference that rescans the predecessor for every disparity.
    SgaNaive,
    Lga,
    Sgm,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::SgaForward,
        KernelKind::SgaBackward,
        KernelKind::SgaNaive,
        KernelKind::Lga,
        KernelKind::Sgm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::SgaForward => "sga_forward",
            KernelKind::SgaBackward => "sga_backward",
            KernelKind::SgaNaive => "sga_naive",
            KernelKind::Lga => "lga",
            KernelKind::Sgm => "sgm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub kind: KernelKind,
    pub shape: Shape,
    pub repetitions: usize,
    pub median_ns: u64,
    pub p90_ns: u64,
}

/// Seeded inputs shared by timing runs and benches.
pub fn bench_inputs(shape: Shape, seed: u64) -> Result<(CostVolume, SgaWeights)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol = CostVolume::from_vec(shape, (0..shape.len()).map(|_| rng.gen()).collect())?;
    let mut logits = SgaLogits::centered(shape.h, shape.w, shape.f, 0.0);
    for v in logits.field_mut().iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    Ok((vol, sga::normalize_logits(&logits)?))
}

/// Times one kernel `repetitions` times after an untimed warm-up run, on a
/// single thread.
pub fn time_kernel(kind: KernelKind, shape: Shape, repetitions: usize) -> Result<Timing> {
    if repetitions < 3 {
        return Err(Error::Config(format!(
            "need at least 3 repetitions, got {repetitions}"
        )));
    }
    let (vol, weights) = bench_inputs(shape, 0)?;
    let single = CostVolume::from_vec(
        Shape::new(shape.h, shape.w, shape.d, 1),
        vol.mean_features().into_data(),
    )?;
    let lga_w = lga::lga_normalize(&LgaLogits::centered(
        shape.h,
        shape.w,
        shape.f,
        lga::DEFAULT_KERNEL,
        2.0,
    )?)?;
    let sgm_params = SgmParams::new(0.1, 0.5)?;
    let (_, tape) = sga::sga_forward(&vol, &weights)?;
    let ones = CostVolume::new(shape.h, shape.w, shape.d, shape.f, 1.0)?;

    let run = || -> Result<()> {
        match kind {
            KernelKind::SgaForward => {
                std::hint::black_box(sga::sga_forward(&vol, &weights)?);
            }
            KernelKind::SgaBackward => {
                std::hint::black_box(sga::sga_backward(&tape, &weights, &vol, &ones)?);
            }
            KernelKind::SgaNaive => {
                std::hint::black_box(naive_sga_forward(&vol, &weights)?);
            }
            KernelKind::Lga => {
                std::hint::black_box(lga::lga_forward(&vol, &lga_w, lga::DEFAULT_REPEATS)?);
            }
            KernelKind::Sgm => {
                std::hint::black_box(sgm(&single, &sgm_params)?);
            }
        }
        Ok(())
    };

    par::serial(|| {
        run()?;
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            run()?;
            samples.push(t.elapsed().as_nanos().max(1) as u64);
        }
        samples.sort_unstable();
        let p90 = (repetitions * 9).div_ceil(10) - 1;
        Ok(Timing {
            kind,
            shape,
            repetitions,
            median_ns: samples[repetitions / 2],
            p90_ns: samples[p90],
        })
    })
}

/// Straightforward SGA forward: for every disparity it rescans the
/// predecessor's disparities to find the maximum, and uses explicit bounds
/// checks for the neighbouring terms.
pub fn naive_sga_forward(vol: &CostVolume, weights: &SgaWeights) -> Result<CostVolume> {
    let s = vol.shape();
    let mut per_dir = Vec::with_capacity(4);
    for dir in Direction::ALL {
        let (dy, dx) = dir.vector();
        let mut a = CostVolume::zeros(s)?;
        let lines = dir.line_count(s.h, s.w);
        let len = dir.line_len(s.h, s.w);
        for line in 0..lines {
            for k in 0..len {
                let p = dir.pixel_at(s.h, s.w, line, k);
                let (y, x) = (p / s.w, p % s.w);
                for c in 0..s.f {
                    let wt = weights.field().at(dir, p, c);
                    for d in 0..s.d {
                        let cost = vol.get(y, x, d, c);
                        let v = if k == 0 {
                            cost
                        } else {
                            let py = (y as isize - dy) as usize;
                            let px = (x as isize - dx) as usize;
                            let prev = |i: usize| a.get(py, px, i, c);
                            let mut m = f64::NEG_INFINITY;
                            for i in 0..s.d {
                                m = m.max(prev(i));
                            }
                            let lo = if d > 0 { prev(d - 1) } else { 0.0 };
                            let hi = if d + 1 < s.d { prev(d + 1) } else { 0.0 };
                            wt[0] * cost + wt[1] * prev(d) + wt[2] * lo + wt[3] * hi + wt[4] * m
                        };
                        a.set(y, x, d, c, v);
                    }
                }
            }
        }
        per_dir.push(a);
    }
    let mut out = per_dir[0].clone();
    for a in &per_dir[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(a.data()) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Aligned text table followed by one `#METRIC` line per record.
pub fn render_report(rows: &[RatioRow], timings: &[Timing]) -> Result<String> {
    let mut t = String::new();
    let conv = FlopModel::Conv3d { k: 3, c: 32, n: 1 }.flops()?;
    let sga = FlopModel::Sga {
        n: 1,
        directions: 4,
    }
    .flops()?;
    let lga = FlopModel::Lga {
        k: lga::DEFAULT_KERNEL as u64,
        n: 1,
        repeats: lga::DEFAULT_REPEATS as u64,
    }
    .flops()?;
    let _ = writeln!(t, "FLOPs per output element");
    let _ = writeln!(t, "  {:<28} {:>8}", "conv3d k=3 c=32", conv);
    let _ = writeln!(t, "  {:<28} {:>8}", "sga 4 directions", sga);
    let _ = writeln!(t, "  {:<28} {:>8}", "lga k=5 x2", lga);
    let _ = writeln!(t);
    let _ = writeln!(
        t,
        "{:>6} {:>8} {:>8} {:>10}  < 1/100",
        "C", "sga", "conv3d", "ratio"
    );
    for r in rows {
        let _ = writeln!(
            t,
            "{:>6} {:>8} {:>8} {:>10.6}  {}",
            r.channels,
            r.sga,
            r.conv,
            r.ratio,
            if r.below_hundredth { "yes" } else { "no" }
        );
    }
    if !timings.is_empty() {
        let _ = writeln!(t);
        let _ = writeln!(
            t,
            "{:<14} {:>16} {:>5} {:>14} {:>14}",
            "kernel", "shape", "reps", "median ns", "p90 ns"
        );
        for tm in timings {
            let _ = writeln!(
                t,
                "{:<14} {:>16} {:>5} {:>14} {:>14}",
                tm.kind.name(),
                tm.shape.to_string(),
                tm.repetitions,
                tm.median_ns,
                tm.p90_ns
            );
        }
    }
    let _ = writeln!(t, "#METRIC flops kind=conv3d k=3 c=32 n=1 value={conv}");
    let _ = writeln!(t, "#METRIC flops kind=sga directions=4 n=1 value={sga}");
    let _ = writeln!(t, "#METRIC flops kind=lga k=5 repeats=2 n=1 value={lga}");
    for r in rows {
        let _ = writeln!(
            t,
            "#METRIC ratio c={} sga={} conv3d={} value={:.9} below_hundredth={}",
            r.channels, r.sga, r.conv, r.ratio, r.below_hundredth
        );
    }
    for tm in timings {
        let _ = writeln!(
            t,
            "#METRIC timing kernel={} h={} w={} d={} f={} reps={} median_ns={} p90_ns={}",
            tm.kind.name(),
            tm.shape.h,
            tm.shape.w,
            tm.shape.d,
            tm.shape.f,
            tm.repetitions,
            tm.median_ns,
            tm.p90_ns
        );
    }
    Ok(t)
}
