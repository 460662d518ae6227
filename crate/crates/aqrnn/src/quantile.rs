//! Quantile-level subranges, cross-predictor blending, and training-time
//! level sampling.
//!
//! The level axis (0,1) is carved into overlapping subranges around a set of
//! knots; a dedicated predictor team owns each subrange. Inside an overlap
//! `(k−ov, k+ov]` the two neighbouring predictors are blended linearly, which
//! keeps the combined forecast continuous in the level. Training levels are
//! drawn from a symmetric Beta rescaled to the subrange, so mass piles up
//! near the subrange edges where quantile estimation is hardest.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::{Error, Result};

/// Partition of (0,1) into overlapping subranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SubrangeSpec {
    knots: Vec<f64>,
    half_overlap: f64,
    ranges: Vec<(f64, f64)>,
}

impl SubrangeSpec {
    /// Builds subranges from interior knots and a half-overlap radius.
    ///
    /// Knots `[0.2, 0.6]` with radius `0.1` produce `(0, 0.3)`, `(0.1, 0.7)`,
    /// `(0.5, 1.0)`.
    pub fn new(knots: &[f64], half_overlap: f64) -> Result<Self> {
        if half_overlap < 0.0 {
            return Err(Error::Config(format!("half-overlap must be >= 0, got {half_overlap}")));
        }
        for (i, &k) in knots.iter().enumerate() {
            if !(0.0 < k && k < 1.0) {
                return Err(Error::Config(format!("subrange knot {k} outside (0,1)")));
            }
            if k - half_overlap <= 0.0 || k + half_overlap >= 1.0 {
                return Err(Error::Config(format!(
                    "knot {k} with half-overlap {half_overlap} reaches the (0,1) boundary"
                )));
            }
            if i > 0 {
                let prev = knots[i - 1];
                if k <= prev {
                    return Err(Error::Config("subrange knots must be strictly increasing".into()));
                }
                if prev + half_overlap >= k - half_overlap {
                    return Err(Error::Config(format!(
                        "overlap regions around knots {prev} and {k} intersect; reduce half-overlap"
                    )));
                }
            }
        }
        let mut ranges = Vec::with_capacity(knots.len() + 1);
        let mut lo = 0.0;
        for &k in knots {
            ranges.push((lo, snap(k + half_overlap)));
            lo = snap(k - half_overlap);
        }
        ranges.push((lo, 1.0));
        Ok(SubrangeSpec { knots: knots.to_vec(), half_overlap, ranges })
    }

    /// The trivial spec with a single subrange covering all of (0,1).
    pub fn single() -> Self {
        SubrangeSpec { knots: Vec::new(), half_overlap: 0.0, ranges: vec![(0.0, 1.0)] }
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Blend weights for level `q`: at most two `(subrange index, weight)`
    /// entries with weights summing to 1 and zero-weight entries dropped.
    ///
    /// Outside overlaps exactly one subrange owns the level. Inside the
    /// overlap `(k−ov, k+ov]` the lower subrange gets
    /// `a = (q_u − q)/(q_u − q_l)` and the upper one `1 − a`, so the default
    /// overlaps evaluate to `a = −5q + 1.5` on (0.1, 0.3] and
    /// `b = −5q + 3.5` on (0.5, 0.7].
    pub fn weights(&self, q: f64) -> Result<Vec<(usize, f64)>> {
        if !(0.0 < q && q < 1.0) || !q.is_finite() {
            return Err(Error::Domain(format!("quantile level {q} outside (0,1)")));
        }
        for (i, &k) in self.knots.iter().enumerate() {
            let (lo, hi) = (snap(k - self.half_overlap), snap(k + self.half_overlap));
            if q > lo && q <= hi {
                let a = (hi - q) / (hi - lo);
                let mut out = Vec::with_capacity(2);
                if a > 0.0 {
                    out.push((i, a));
                }
                if a < 1.0 {
                    out.push((i + 1, 1.0 - a));
                }
                return Ok(out);
            }
        }
        // exclusive region: the first subrange whose upper knot bound exceeds q
        let mut idx = self.knots.len();
        for (i, &k) in self.knots.iter().enumerate() {
            if q <= snap(k - self.half_overlap) {
                idx = i;
                break;
            }
        }
        Ok(vec![(idx, 1.0)])
    }
}

/// Rounds a derived subrange bound onto a 1e-12 grid so that decimal knot
/// configurations produce the decimal bounds they name (0.2 + 0.1 is not
/// 0.3 in binary; the partition's edge cases must not depend on that).
fn snap(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Combines per-subrange forecasts: `Σ wᵢ·ŷᵢ` elementwise.
pub fn blend(parts: &[(f64, &[f64])]) -> Vec<f64> {
    debug_assert!(!parts.is_empty());
    let n = parts[0].1.len();
    let mut out = vec![0.0; n];
    for (w, f) in parts {
        debug_assert_eq!(f.len(), n);
        for (o, v) in out.iter_mut().zip(*f) {
            *o += w * v;
        }
    }
    out
}

/// Draws a training level inside `range` from a rescaled symmetric
/// Beta(α, α). Shapes below 1 put extra mass near the subrange edges.
pub fn sample_train_level(rng: &mut impl Rng, alpha: f64, range: (f64, f64)) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("beta shape must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("beta distribution rejected shape {alpha}: {e}")))?;
    let b: f64 = beta.sample(rng);
    // keep the draw strictly inside the open interval
    let b = b.clamp(1e-12, 1.0 - 1e-12);
    Ok(range.0 + b * (range.1 - range.0))
}

/// The evaluation grid Π: 0.001, 0.01..0.99 in steps of 0.01, 0.999.
pub fn test_grid() -> Vec<f64> {
    let mut g = Vec::with_capacity(101);
    g.push(0.001);
    for i in 1..=99 {
        g.push(i as f64 / 100.0);
    }
    g.push(0.999);
    g
}
