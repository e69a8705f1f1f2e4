//! Rotary position encoding with selectable position precision, per-pair
//! wavelength analysis, and theta-base planning against the empirical
//! lower bound `0.0424 * L^1.628`.
//!
//! Pairs are laid out interleaved: pair `i` rotates dimensions `(2i, 2i + 1)`.

use crate::softnum::{round_to_reduced16, PrecisionMode, Reduced16};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

pub const BOUND_COEFFICIENT: f64 = 0.0424;
pub const BOUND_EXPONENT: f64 = 1.628;

/// Candidates whose bound ratio is at least this are treated as matching the
/// bound. The two published (context, theta) pairs sit at ratios 0.89 and 0.86.
pub const DEFAULT_IN_BAND_RATIO: f64 = 0.85;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RopeError {
    #[error("head_dim must be a positive even number, got {0}")]
    InvalidHeadDim(usize),
    #[error("theta_base must be finite and greater than 1, got {0}")]
    InvalidTheta(f64),
    #[error("max_position must be at least 1")]
    ZeroMaxPosition,
    #[error("vector has {got} dimensions, config expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("position {position} is outside the configured range [0, {max_position})")]
    PositionOutOfRange { position: u64, max_position: u64 },
    #[error("context length must be at least 1")]
    ZeroContextLength,
    #[error("no theta candidates supplied")]
    EmptyCandidates,
    #[error("in-band ratio must be in (0, 1], got {0}")]
    InvalidBand(f64),
}

/// Where 16-bit rounding is injected when the config runs in
/// [`PrecisionMode::Reduced16`]. Ignored under `Full32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingSite {
    /// Round the integer position before the angle product.
    #[default]
    PositionIndex,
    /// Round the angle `position * inv_freq` after the product.
    AngleProduct,
    /// Round both.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    theta_base: f64,
    head_dim: usize,
    max_position: u64,
    precision: PrecisionMode,
    rounding_site: RoundingSite,
}

impl RopeConfig {
    pub fn new(theta_base: f64, head_dim: usize, max_position: u64) -> Result<Self, RopeError> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(RopeError::InvalidHeadDim(head_dim));
        }
        if !theta_base.is_finite() || theta_base <= 1.0 {
            return Err(RopeError::InvalidTheta(theta_base));
        }
        if max_position == 0 {
            return Err(RopeError::ZeroMaxPosition);
        }
        Ok(Self {
            theta_base,
            head_dim,
            max_position,
            precision: PrecisionMode::Full32,
            rounding_site: RoundingSite::PositionIndex,
        })
    }

    pub fn with_precision(mut self, precision: PrecisionMode) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_rounding_site(mut self, site: RoundingSite) -> Self {
        self.rounding_site = site;
        self
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_position(&self) -> u64 {
        self.max_position
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    pub fn rounding_site(&self) -> RoundingSite {
        self.rounding_site
    }

    pub fn pair_count(&self) -> usize {
        self.head_dim / 2
    }

    /// The position value that actually enters the angle product.
    pub fn effective_position(&self, position: u64) -> f64 {
        match (self.precision, self.rounding_site) {
            (PrecisionMode::Reduced16, RoundingSite::PositionIndex | RoundingSite::Both) => {
                f64::from(Reduced16::from_u64(position).to_f32())
            }
            // Exact below 2^24, same as a 32-bit position buffer.
            _ => f64::from(position as f32),
        }
    }

    fn effective_angle(&self, angle: f64) -> f64 {
        match (self.precision, self.rounding_site) {
            (PrecisionMode::Reduced16, RoundingSite::AngleProduct | RoundingSite::Both) => {
                f64::from(round_to_reduced16(angle as f32).to_f32())
            }
            _ => angle,
        }
    }
}

/// `theta_base^(-2i/d)` for `i` in `0..d/2`.
pub fn inverse_frequencies(cfg: &RopeConfig) -> Vec<f64> {
    let d = cfg.head_dim as f64;
    (0..cfg.pair_count())
        .map(|i| cfg.theta_base.powf(-2.0 * i as f64 / d))
        .collect()
}

/// Rotates each interleaved pair of `vector` by `position * inv_freq(i)`.
pub fn rotate(vector: &[f64], position: u64, cfg: &RopeConfig) -> Result<Vec<f64>, RopeError> {
    if vector.len() != cfg.head_dim {
        return Err(RopeError::DimensionMismatch {
            expected: cfg.head_dim,
            got: vector.len(),
        });
    }
    if position >= cfg.max_position {
        return Err(RopeError::PositionOutOfRange {
            position,
            max_position: cfg.max_position,
        });
    }
    let pos = cfg.effective_position(position);
    let mut out = vec![0.0; vector.len()];
    for (i, freq) in inverse_frequencies(cfg).into_iter().enumerate() {
        let (sin, cos) = cfg.effective_angle(pos * freq).sin_cos();
        let (x, y) = (vector[2 * i], vector[2 * i + 1]);
        out[2 * i] = x * cos - y * sin;
        out[2 * i + 1] = x * sin + y * cos;
    }
    Ok(out)
}

/// Dot product of `q` rotated to position `m` with `k` rotated to `n`.
pub fn relative_score(q: &[f64], k: &[f64], m: u64, n: u64, cfg: &RopeConfig) -> Result<f64, RopeError> {
    let q = rotate(q, m, cfg)?;
    let k = rotate(k, n, cfg)?;
    Ok(q.iter().zip(&k).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRotation {
    pub pair_index: usize,
    pub inv_freq: f64,
    /// Tokens per full 2π turn.
    pub wavelength: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRotationReport {
    pub theta_base: f64,
    pub head_dim: usize,
    pub max_position: u64,
    pub pairs: Vec<DimRotation>,
    pub complete_pairs: usize,
    pub complete_fraction: f64,
}

impl DimRotationReport {
    pub fn incomplete_fraction(&self) -> f64 {
        1.0 - self.complete_fraction
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_index,inv_freq,wavelength,complete\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{:e},{:e},{}\n",
                p.pair_index, p.inv_freq, p.wavelength, p.complete
            ));
        }
        out
    }
}

pub fn rotation_report(cfg: &RopeConfig) -> DimRotationReport {
    let d = cfg.head_dim as f64;
    let limit = cfg.max_position as f64;
    let pairs: Vec<_> = inverse_frequencies(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, inv_freq)| {
            let wavelength = TAU * cfg.theta_base.powf(2.0 * i as f64 / d);
            DimRotation {
                pair_index: i,
                inv_freq,
                wavelength,
                complete: wavelength <= limit,
            }
        })
        .collect();
    let complete_pairs = pairs.iter().filter(|p| p.complete).count();
    DimRotationReport {
        theta_base: cfg.theta_base,
        head_dim: cfg.head_dim,
        max_position: cfg.max_position,
        complete_fraction: complete_pairs as f64 / pairs.len() as f64,
        complete_pairs,
        pairs,
    }
}

/// Empirical lower bound on the theta base for a target context length.
pub fn theta_lower_bound(context_len: u64) -> f64 {
    BOUND_COEFFICIENT * (context_len as f64).powf(BOUND_EXPONENT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaClass {
    BelowBound,
    InBand,
    FarAboveBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCandidate {
    pub theta_base: f64,
    pub bound_ratio: f64,
    pub class: ThetaClass,
    pub complete_fraction: f64,
    pub incomplete_pairs: usize,
    pub recommended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPlan {
    pub context_len: u64,
    pub head_dim: usize,
    pub lower_bound: f64,
    pub in_band_ratio: f64,
    pub candidates: Vec<ThetaCandidate>,
    pub recommended: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub head_dim: usize,
    pub in_band_ratio: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            head_dim: 128,
            in_band_ratio: DEFAULT_IN_BAND_RATIO,
        }
    }
}

/// Classifies theta candidates against the bound for `context_len`.
///
/// The smallest candidate whose ratio reaches `in_band_ratio` is recommended.
/// Larger candidates are flagged far-above when strictly more of their pairs
/// fail to finish a full turn within the context than the recommended one.
pub fn plan_theta(context_len: u64, candidates: &[f64], opts: &PlanOptions) -> Result<ThetaPlan, RopeError> {
    if context_len == 0 {
        return Err(RopeError::ZeroContextLength);
    }
    if candidates.is_empty() {
        return Err(RopeError::EmptyCandidates);
    }
    if !(opts.in_band_ratio > 0.0 && opts.in_band_ratio <= 1.0) {
        return Err(RopeError::InvalidBand(opts.in_band_ratio));
    }
    let bound = theta_lower_bound(context_len);
    let reports = candidates
        .iter()
        .map(|&theta| RopeConfig::new(theta, opts.head_dim, context_len).map(|cfg| rotation_report(&cfg)))
        .collect::<Result<Vec<_>, _>>()?;

    let recommended = candidates
        .iter()
        .copied()
        .filter(|theta| theta / bound >= opts.in_band_ratio)
        .min_by(f64::total_cmp);
    let recommended_incomplete = recommended.map(|theta| {
        let idx = candidates.iter().position(|c| *c == theta).unwrap();
        reports[idx].incomplete_fraction()
    });

    let candidates = candidates
        .iter()
        .zip(&reports)
        .map(|(&theta, report)| {
            let ratio = theta / bound;
            let far_above = match (recommended, recommended_incomplete) {
                (Some(best), Some(best_incomplete)) => {
                    theta > best && report.incomplete_fraction() > best_incomplete
                }
                _ => false,
            };
            let class = if ratio < opts.in_band_ratio {
                ThetaClass::BelowBound
            } else if far_above {
                ThetaClass::FarAboveBound
            } else {
                ThetaClass::InBand
            };
            ThetaCandidate {
                theta_base: theta,
                bound_ratio: ratio,
                class,
                complete_fraction: report.complete_fraction,
                incomplete_pairs: report.pairs.len() - report.complete_pairs,
                recommended: Some(theta) == recommended,
            }
        })
        .collect();

    Ok(ThetaPlan {
        context_len,
        head_dim: opts.head_dim,
        lower_bound: bound,
        in_band_ratio: opts.in_band_ratio,
        candidates,
        recommended,
    })
}
