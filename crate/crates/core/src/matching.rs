//! Initial matching costs from a rectified grayscale pair.

use crate::error::{Error, Result};
use crate::grid::{CostVolume, Image, Shape};
use crate::par;

/// Per-pixel feature used to compare left and right pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Census descriptor over an odd `window × window` neighbourhood.
    Census { window: usize },
    /// Absolute intensity difference.
    AbsDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchConfig {
    pub d_max: usize,
    pub feature: Feature,
}

impl MatchConfig {
    pub const DEFAULT_CENSUS_WINDOW: usize = 5;

    pub fn census(d_max: usize) -> Self {
        MatchConfig {
            d_max,
            feature: Feature::Census {
                window: Self::DEFAULT_CENSUS_WINDOW,
            },
        }
    }

    pub fn absdiff(d_max: usize) -> Self {
        MatchConfig {
            d_max,
            feature: Feature::AbsDiff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max < 2 {
            return Err(Error::Config(format!(
                "d_max must be at least 2, got {}",
                self.d_max
            )));
        }
        if let Feature::Census { window } = self.feature {
            check_window(window)?;
        }
        Ok(())
    }
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "census window must be odd and at least 3, got {window}"
        )));
    }
    Ok(())
}

/// Census descriptors for every pixel, `window² - 1` bits each, packed
/// little-endian into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusGrid {
    height: usize,
    width: usize,
    bits: usize,
    words: usize,
    data: Vec<u64>,
}

impl CensusGrid {
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn descriptor(&self, y: usize, x: usize) -> &[u64] {
        let start = (y * self.width + x) * self.words;
        &self.data[start..start + self.words]
    }

    /// Bit `k` of the descriptor at `(y, x)`; neighbours are numbered in
    /// row-major order with the centre skipped.
    pub fn bit(&self, y: usize, x: usize, k: usize) -> bool {
        self.descriptor(y, x)[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn hamming(&self, a: (usize, usize), other: &CensusGrid, b: (usize, usize)) -> u32 {
        self.descriptor(a.0, a.1)
            .iter()
            .zip(other.descriptor(b.0, b.1))
            .map(|(p, q)| (p ^ q).count_ones())
            .sum()
    }
}

pub fn census_transform(img: &Image, window: usize) -> Result<CensusGrid> {
    check_window(window)?;
    if !img.is_gray() {
        return Err(Error::Config(
            "census transform needs a grayscale image".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let bits = window * window - 1;
    let words = bits.div_ceil(64);
    let r = (window / 2) as isize;

    let mut data = vec![0u64; h * w * words];
    par::for_each_chunk_mut(&mut data, w * words, |y, row| {
        for x in 0..w {
            let center = img.get(y, x);
            let desc = &mut row[x * words..(x + 1) * words];
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    let inside = ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w;
                    let neighbour = if inside {
                        img.get(ny as usize, nx as usize)
                    } else {
                        0.0
                    };
                    if neighbour > center {
                        desc[k / 64] |= 1 << (k % 64);
                    }
                    k += 1;
                }
            }
        }
    });

    Ok(CensusGrid {
        height: h,
        width: w,
        bits,
        words,
        data,
    })
}

/// Builds the single-channel cost volume `C(y, x, d)` comparing left pixel
/// `(y, x)` with right pixel `(y, x - d)`. Candidates that fall off the left
/// edge of the right image cost 1.
pub fn build_cost_volume(left: &Image, right: &Image, cfg: &MatchConfig) -> Result<CostVolume> {
    cfg.validate()?;
    if !left.is_gray() || !right.is_gray() {
        return Err(Error::Config("matching needs grayscale images".into()));
    }
    if (left.height(), left.width()) != (right.height(), right.width()) {
        return Err(Error::Config(format!(
            "stereo pair shapes differ: {}x{} vs {}x{}",
            left.height(),
            left.width(),
            right.height(),
            right.width()
        )));
    }
    let (h, w, dm) = (left.height(), left.width(), cfg.d_max);
    let shape = Shape::new(h, w, dm, 1);
    let mut vol = CostVolume::zeros(shape)?;

    match cfg.feature {
        Feature::Census { window } => {
            let cl = census_transform(left, window)?;
            let cr = census_transform(right, window)?;
            let norm = 1.0 / cl.bits() as f64;
            par::for_each_chunk_mut(vol.data_mut(), w * dm, |y, row| {
                for x in 0..w {
                    for d in 0..dm {
                        row[x * dm + d] = if x >= d {
                            cl.hamming((y, x), &cr, (y, x - d)) as f64 * norm
                        } else {
                            1.0
                        };
                    }
                }
            });
        }
        Feature::AbsDiff => {
            par::for_each_chunk_mut(vol.data_mut(), w * dm, |y, row| {
                for x in 0..w {
                    for d in 0..dm {
                        row[x * dm + d] = if x >= d {
                            (left.get(y, x) - right.get(y, x - d)).abs().min(1.0)
                        } else {
                            1.0
                        };
                    }
                }
            });
        }
    }
    Ok(vol)
}

/// Lowest-cost disparity per pixel for a single-channel volume; ties go to
/// the smaller disparity.
pub fn winner_take_all(vol: &CostVolume) -> Vec<usize> {
    let s = vol.shape();
    (0..s.pixels())
        .map(|p| {
            let px = &vol.data()[p * s.per_pixel()..(p + 1) * s.per_pixel()];
            (0..s.d)
                .fold((0, f64::INFINITY), |(bi, bv), d| {
                    let v = px[d * s.f];
                    if v < bv {
                        (d, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
