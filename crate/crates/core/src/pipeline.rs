//! End-to-end matching: cost volume, aggregation by the chosen method, and
//! disparity regression.

use std::fmt;
use std::str::FromStr;

use crate::classical::{cost_filter, sgm, FilterKernel, SgmParams};
use crate::error::{Error, Result};
use crate::grid::{DisparityMap, Image};
use crate::head::disparity_regress;
use crate::matching::{build_cost_volume, MatchConfig};
use crate::trainer::{GaModel, DEFAULT_COST_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgm,
    Ga,
    Filter,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgm" => Ok(Method::Sgm),
            "ga" => Ok(Method::Ga),
            "filter" => Ok(Method::Filter),
            other => Err(Error::Config(format!(
                "unknown method '{other}', expected sgm, ga or filter"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sgm => "sgm",
            Method::Ga => "ga",
            Method::Filter => "filter",
        })
    }
}

pub const DEFAULT_P1: f64 = 0.1;
pub const DEFAULT_P2: f64 = 0.4;
pub const FILTER_KERNEL: usize = 7;
const FILTER_SIGMA_SPACE: f64 = 3.0;
const FILTER_SIGMA_RANGE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct MatchOptions {
    pub d_max: usize,
    pub method: Method,
    pub p1: f64,
    pub p2: f64,
    /// Aggregation stack for [`Method::Ga`]; built untrained from the image
    /// size when absent.
    pub model: Option<GaModel>,
    pub sga_layers: usize,
    pub use_lga: bool,
}

impl MatchOptions {
    pub fn new(d_max: usize, method: Method) -> Self {
        MatchOptions {
            d_max,
            method,
            p1: DEFAULT_P1,
            p2: DEFAULT_P2,
            model: None,
            sga_layers: 3,
            use_lga: false,
        }
    }
}

/// Census matching followed by the selected aggregation. Regression runs
/// on the aggregated costs; SGA and filter outputs are sharpened by the
/// cost scale first, SGM sums are already on a steep scale.
pub fn match_pair(left: &Image, right: &Image, opts: &MatchOptions) -> Result<DisparityMap> {
    let raw = build_cost_volume(left, right, &MatchConfig::census(opts.d_max))?;
    let map = match opts.method {
        Method::Sgm => {
            let params = SgmParams::new(opts.p1, opts.p2)?;
            disparity_regress(&sgm(&raw, &params)?)?.0
        }
        Method::Filter => {
            let kernel = FilterKernel::bilateral(
                left,
                FILTER_KERNEL,
                FILTER_SIGMA_SPACE,
                FILTER_SIGMA_RANGE,
            )?;
            disparity_regress(&cost_filter(&raw, &kernel)?.scaled(DEFAULT_COST_SCALE))?.0
        }
        Method::Ga => {
            let fresh;
            let model = match &opts.model {
                Some(m) => m,
                None => {
                    fresh =
                        GaModel::init(left.height(), left.width(), opts.sga_layers, opts.use_lga)?;
                    &fresh
                }
            };
            model.infer(&raw)?
        }
    };
    Ok(map)
}
