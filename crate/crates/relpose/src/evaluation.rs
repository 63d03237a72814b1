//! Benchmark bookkeeping for batches of evaluated image pairs.
//!
//! Each pair contributes a solver confidence and, when the solver produced
//! an estimate, its error triple ([`PairErrors`]). Aggregation follows the
//! usual single-frame protocol: precision is the fraction of pairs whose
//! reprojection error beats a pixel threshold (pairs without an estimate
//! count as misses), and the area under the precision curve sweeps a
//! confidence-ranked prefix over the batch, so a solver is rewarded for
//! knowing which of its answers to trust.

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_deg, Intrinsics, Pose};
use crate::objective::{vcre, VirtualGrid};

/// Default acceptance threshold on reprojection error, in pixels.
pub const DEFAULT_PRECISION_THRESHOLD: f64 = 90.0;

/// Error triple for one estimated pose against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairErrors {
    /// Reprojection error of the virtual correspondences, in pixels.
    pub vcre: f64,
    /// Geodesic rotation error, in degrees.
    pub rotation_deg: f64,
    /// Euclidean translation error, in meters.
    pub translation: f64,
}

/// Outcome for one evaluated image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResult {
    /// Stable identifier; breaks confidence ties so rankings are total.
    pub id: u64,
    /// The solver's belief in its own answer (higher = more trusted).
    pub confidence: f64,
    /// `None` when the solver declined or failed to produce an estimate.
    pub errors: Option<PairErrors>,
}

/// Compare `estimate` against `truth` on the virtual grid.
pub fn pair_errors(
    estimate: &Pose,
    truth: &Pose,
    k: &Intrinsics,
    grid: &VirtualGrid,
) -> Result<PairErrors> {
    let v = vcre(estimate, truth, k, grid)?;
    let relative = truth.rotation() * estimate.rotation().transpose();
    Ok(PairErrors {
        vcre: v.pixels,
        rotation_deg: rotation_angle_deg(&relative),
        translation: (truth.translation() - estimate.translation()).norm(),
    })
}

fn hit(result: &PairResult, threshold: f64) -> bool {
    result.errors.map_or(false, |e| e.vcre < threshold)
}

/// Fraction of pairs whose estimate lands under `threshold` pixels.
///
/// Pairs without an estimate are counted in the denominator and never in
/// the numerator: declining is a miss, not an exemption.
pub fn precision(results: &[PairResult], threshold: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let hits = results.iter().filter(|r| hit(r, threshold)).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Rank used by the precision curve: estimates ordered by descending
/// confidence, ties by ascending id; pairs without an estimate go last so
/// abstaining on a hard pair never beats attempting it with low confidence.
fn ranked(results: &[PairResult]) -> Vec<&PairResult> {
    let mut order: Vec<&PairResult> = results.iter().collect();
    order.sort_by(|a, b| {
        b.errors
            .is_some()
            .cmp(&a.errors.is_some())
            .then(b.confidence.partial_cmp(&a.confidence).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.id.cmp(&b.id))
    });
    order
}

/// The precision-vs-ratio curve at `threshold` pixels: point `k` (1-based)
/// is `(k / N, precision of the top-k prefix)` under the [`ranked`] order.
pub fn precision_curve(results: &[PairResult], threshold: f64) -> Result<Vec<(f64, f64)>> {
    if results.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let order = ranked(results);
    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (k, result) in order.iter().enumerate() {
        if hit(result, threshold) {
            hits += 1;
        }
        curve.push(((k + 1) as f64 / order.len() as f64, hits as f64 / (k + 1) as f64));
    }
    Ok(curve)
}

/// Area under the precision-vs-rank curve at `threshold` pixels.
///
/// With pairs ranked as in [`ranked`], this is the mean over `k` of the
/// precision of the top-`k` prefix — the discrete integral of
/// [`precision_curve`].
pub fn precision_auc(results: &[PairResult], threshold: f64) -> Result<f64> {
    let curve = precision_curve(results, threshold)?;
    Ok(curve.iter().map(|(_, p)| p).sum::<f64>() / curve.len() as f64)
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite error values"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        Some(values[mid])
    } else {
        Some(0.5 * (values[mid - 1] + values[mid]))
    }
}

/// Batch summary at a fixed precision threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub estimates: usize,
    /// Fraction of pairs with an estimate.
    pub estimate_rate: f64,
    pub precision: f64,
    pub auc: f64,
    /// Medians over pairs *with* estimates; `None` when there are none.
    pub median_vcre: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    pub median_translation: Option<f64>,
}

/// Aggregate a batch of pair results at `threshold` pixels.
pub fn report(results: &[PairResult], threshold: f64) -> Result<EvalReport> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Domain(format!("precision threshold must be > 0, got {threshold}")));
    }
    let estimates = results.iter().filter(|r| r.errors.is_some()).count();
    let mut vcres: Vec<f64> = results.iter().flat_map(|r| r.errors).map(|e| e.vcre).collect();
    let mut rots: Vec<f64> =
        results.iter().flat_map(|r| r.errors).map(|e| e.rotation_deg).collect();
    let mut trans: Vec<f64> =
        results.iter().flat_map(|r| r.errors).map(|e| e.translation).collect();
    Ok(EvalReport {
        pairs: results.len(),
        estimates,
        estimate_rate: estimates as f64 / results.len() as f64,
        precision: precision(results, threshold)?,
        auc: precision_auc(results, threshold)?,
        median_vcre: median(&mut vcres),
        median_rotation_deg: median(&mut rots),
        median_translation: median(&mut trans),
    })
}
