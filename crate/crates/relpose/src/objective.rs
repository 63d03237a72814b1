//! Training objective: virtual correspondence reprojection error, expected
//! loss over scored hypotheses, score-function gradient assembly, and
//! curriculum batch selection.
//!
//! The virtual correspondence reprojection error (VCRE) measures a pose
//! estimate `h` against the reference `h_hat` by pushing a fixed grid of 3D
//! points through `h * h_hat^{-1}` and averaging the pixel displacement of
//! their projections. It folds rotation and translation quality into one
//! pixel-valued number, so no rotation/translation balancing weight is
//! needed.
//!
//! Hypothesis losses are combined into an expectation under the softmax of
//! the soft-inlier scores. A null hypothesis with fixed score and fixed
//! worst-case loss joins the softmax as an anchor: when every real
//! hypothesis is poor, the null term absorbs the probability mass and damps
//! all score gradients instead of letting the softmax amplify noise.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

/// Benchmark cube dimensions in meters (x, y, z).
pub const BENCHMARK_CUBE: [f64; 3] = [2.1, 1.2, 2.1];
/// Requested lattice separation for the benchmark grid, meters.
pub const BENCHMARK_SPACING: f64 = 0.3;
/// Distance from the camera to the near face of the benchmark grid, meters.
pub const BENCHMARK_MIN_DEPTH: f64 = 0.3;
/// Depth floor applied before projecting a transformed virtual point.
pub const PROJECTION_DEPTH_FLOOR: f64 = 1e-6;

/// Fixed 3D points, in the query camera frame, used as virtual
/// correspondences.
#[derive(Debug, Clone)]
pub struct VirtualGrid {
    pub points: Vec<Vector3<f64>>,
}

impl VirtualGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn axis_samples(dim: f64, spacing: f64) -> usize {
    ((dim / spacing).round() as usize).max(2)
}

/// Axis-aligned uniform lattice spanning a cube centered at the origin.
///
/// Each axis gets `max(2, round(dim / spacing))` samples from `-dim/2` to
/// `dim/2` inclusive, so the effective per-axis separation is derived from
/// the cube dimension rather than taken verbatim.
pub fn virtual_grid(cube_dims: [f64; 3], spacing: f64) -> Result<VirtualGrid> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::Domain(format!("grid spacing must be positive, got {spacing}")));
    }
    for dim in cube_dims {
        if !(dim.is_finite() && dim > 0.0) {
            return Err(Error::Domain(format!("cube dimensions must be positive, got {dim}")));
        }
        if spacing > dim {
            return Err(Error::Domain(format!(
                "grid spacing {spacing} exceeds cube dimension {dim}"
            )));
        }
    }
    let counts = [
        axis_samples(cube_dims[0], spacing),
        axis_samples(cube_dims[1], spacing),
        axis_samples(cube_dims[2], spacing),
    ];
    let coords = |axis: usize| -> Vec<f64> {
        let n = counts[axis];
        let half = cube_dims[axis] / 2.0;
        (0..n).map(|i| -half + cube_dims[axis] * i as f64 / (n - 1) as f64).collect()
    };
    let (xs, ys, zs) = (coords(0), coords(1), coords(2));
    let mut points = Vec::with_capacity(counts.iter().product());
    for z in &zs {
        for y in &ys {
            for x in &xs {
                points.push(Vector3::new(*x, *y, *z));
            }
        }
    }
    Ok(VirtualGrid { points })
}

/// The 196-point benchmark grid: the standard cube lattice, centered in x
/// and y, with the z axis shifted so the whole grid sits in front of the
/// query camera (depths from [`BENCHMARK_MIN_DEPTH`] to
/// `BENCHMARK_MIN_DEPTH + 2.1`). The shift keeps every virtual point at
/// positive depth, which the reprojection term requires of a sane
/// reference projection.
pub fn benchmark_virtual_grid() -> VirtualGrid {
    let mut grid = virtual_grid(BENCHMARK_CUBE, BENCHMARK_SPACING).expect("benchmark constants are valid");
    let shift = BENCHMARK_CUBE[2] / 2.0 + BENCHMARK_MIN_DEPTH;
    for p in &mut grid.points {
        p.z += shift;
    }
    grid
}

/// A VCRE evaluation: mean reprojection displacement plus how many
/// transformed points needed the depth floor.
#[derive(Debug, Clone, Copy)]
pub struct Vcre {
    pub pixels: f64,
    /// Projections (on either side) that hit [`PROJECTION_DEPTH_FLOOR`];
    /// a nonzero count marks the estimate as unusable-high-error rather
    /// than producing an infinite or undefined loss.
    pub clamped_points: usize,
}

fn project_clamped(k: &Intrinsics, p: &Vector3<f64>, clamped: &mut usize) -> (f64, f64) {
    let z = if p.z < PROJECTION_DEPTH_FLOOR {
        *clamped += 1;
        PROJECTION_DEPTH_FLOOR
    } else {
        p.z
    };
    (p.x / z * k.fx + k.cx, p.y / z * k.fy + k.cy)
}

/// VCRE of `estimate` against `ground_truth` in the query camera frame:
/// `mean_v | pi(v) - pi(estimate * ground_truth^{-1} * v) |`.
///
/// Only the relative transform `estimate * ground_truth^{-1}` matters, so
/// the value is invariant under composing both poses with the same rigid
/// motion on the right.
pub fn vcre(estimate: &Pose, ground_truth: &Pose, k: &Intrinsics, grid: &VirtualGrid) -> Result<Vcre> {
    vcre_ambient(estimate.rotation(), estimate.translation(), ground_truth, k, grid)
}

/// VCRE with the estimate given as raw rotation and translation entries.
///
/// The rotation is used as-is (no orthonormality requirement), which makes
/// the function a smooth map on all nine entries — the form the gradient
/// checks differentiate.
pub fn vcre_ambient(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    ground_truth: &Pose,
    k: &Intrinsics,
    grid: &VirtualGrid,
) -> Result<Vcre> {
    if grid.is_empty() {
        return Err(Error::Domain("virtual grid is empty".into()));
    }
    let gt_inverse = ground_truth.inverse();
    let mut clamped = 0usize;
    let mut total = 0.0;
    for v in &grid.points {
        let reference = project_clamped(k, v, &mut clamped);
        let u = gt_inverse.transform_vec(v);
        let q = rotation * u + translation;
        let moved = project_clamped(k, &q, &mut clamped);
        total += ((reference.0 - moved.0).powi(2) + (reference.1 - moved.1).powi(2)).sqrt();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("virtual correspondence reprojection error".into()));
    }
    Ok(Vcre { pixels: total / grid.len() as f64, clamped_points: clamped })
}

/// Gradient of a scalar multiple of the VCRE value with respect to the
/// estimate's raw rotation entries and translation.
#[derive(Debug, Clone)]
pub struct VcreGradients {
    pub d_rotation: Matrix3<f64>,
    pub d_translation: Vector3<f64>,
}

/// VJP of `d_value * vcre_ambient(...).pixels`.
///
/// Clamped depths contribute no z-gradient (the floor is flat), and a point
/// with exactly zero displacement contributes nothing (the norm's kink).
pub fn vcre_vjp(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    ground_truth: &Pose,
    k: &Intrinsics,
    grid: &VirtualGrid,
    d_value: f64,
) -> Result<VcreGradients> {
    if grid.is_empty() {
        return Err(Error::Domain("virtual grid is empty".into()));
    }
    let gt_inverse = ground_truth.inverse();
    let scale = d_value / grid.len() as f64;
    let mut d_rotation = Matrix3::zeros();
    let mut d_translation = Vector3::zeros();
    let mut ignored = 0usize;
    for v in &grid.points {
        let reference = project_clamped(k, v, &mut ignored);
        let u = gt_inverse.transform_vec(v);
        let q = rotation * u + translation;
        let z_clamped = q.z < PROJECTION_DEPTH_FLOOR;
        let z = if z_clamped { PROJECTION_DEPTH_FLOOR } else { q.z };
        let moved = (q.x / z * k.fx + k.cx, q.y / z * k.fy + k.cy);
        let ex = reference.0 - moved.0;
        let ey = reference.1 - moved.1;
        let norm = (ex * ex + ey * ey).sqrt();
        if norm < 1e-15 {
            continue;
        }
        // d |e| / d moved = -e / |e|; chain through the projection.
        let d_mx = -ex / norm * scale;
        let d_my = -ey / norm * scale;
        let mut d_q = Vector3::new(
            d_mx * k.fx / z,
            d_my * k.fy / z,
            -(d_mx * k.fx * q.x + d_my * k.fy * q.y) / (z * z),
        );
        if z_clamped {
            d_q.z = 0.0;
        }
        d_rotation += d_q * u.transpose();
        d_translation += d_q;
    }
    Ok(VcreGradients { d_rotation, d_translation })
}

/// Fixed-score, fixed-loss anchor hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct NullHypothesisConfig {
    /// Score in soft-inlier units.
    pub score: f64,
    /// Loss assigned to the null hypothesis, pixels.
    pub vcre_max: f64,
}

/// Fraction of the correspondence-set size used as the null score.
pub const NULL_SCORE_FRACTION: f64 = 0.30;
/// Null-hypothesis loss in pixels.
pub const NULL_VCRE_MAX: f64 = 120.0;

impl NullHypothesisConfig {
    /// Standard configuration for a set of `set_size` correspondences: the
    /// null scores like 30% of the set being inliers and loses
    /// [`NULL_VCRE_MAX`] pixels.
    pub fn for_set_size(set_size: usize) -> Self {
        NullHypothesisConfig {
            score: NULL_SCORE_FRACTION * set_size as f64,
            vcre_max: NULL_VCRE_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score.is_finite() && self.score > 0.0) {
            return Err(Error::Domain(format!("null score must be positive, got {}", self.score)));
        }
        if !(self.vcre_max.is_finite() && self.vcre_max > 0.0) {
            return Err(Error::Domain(format!(
                "null hypothesis loss must be positive, got {}",
                self.vcre_max
            )));
        }
        Ok(())
    }
}

fn softmax_weights(scores: &[f64], null: Option<&NullHypothesisConfig>) -> (Vec<f64>, f64) {
    let mut hi = null.map_or(f64::NEG_INFINITY, |n| n.score);
    for s in scores {
        hi = hi.max(*s);
    }
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - hi).exp()).collect();
    let null_weight = null.map_or(0.0, |n| (n.score - hi).exp());
    let total: f64 = weights.iter().sum::<f64>() + null_weight;
    for w in &mut weights {
        *w /= total;
    }
    (weights, null_weight / total)
}

/// Exact expectation of the per-hypothesis losses under the softmax of
/// their scores, optionally extended with the null hypothesis.
pub fn expected_set_loss(
    scores: &[f64],
    losses: &[f64],
    null: Option<&NullHypothesisConfig>,
) -> Result<f64> {
    Ok(expected_set_loss_vjp(scores, losses, null)?.0)
}

/// Gradients of the expected loss with respect to scores and losses.
#[derive(Debug, Clone)]
pub struct ExpectedLossGradients {
    pub d_scores: Vec<f64>,
    pub d_losses: Vec<f64>,
}

/// Expected loss together with its VJP: `d E / d loss_k = w_k` and
/// `d E / d score_k = w_k (loss_k - E)`. The null hypothesis carries no
/// parameters, but its softmax mass shrinks every other weight, which is
/// exactly the damping effect it exists for.
pub fn expected_set_loss_vjp(
    scores: &[f64],
    losses: &[f64],
    null: Option<&NullHypothesisConfig>,
) -> Result<(f64, ExpectedLossGradients)> {
    if scores.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if scores.len() != losses.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} losses",
            scores.len(),
            losses.len()
        )));
    }
    if let Some(n) = null {
        n.validate()?;
    }
    for (v, name) in scores.iter().zip(std::iter::repeat("score")).chain(losses.iter().zip(std::iter::repeat("loss"))) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("hypothesis {name}")));
        }
    }
    let (weights, null_weight) = softmax_weights(scores, null);
    let mut expectation = null.map_or(0.0, |n| null_weight * n.vcre_max);
    for (w, l) in weights.iter().zip(losses) {
        expectation += w * l;
    }
    let d_scores = weights
        .iter()
        .zip(losses)
        .map(|(w, l)| w * (l - expectation))
        .collect();
    Ok((expectation, ExpectedLossGradients { d_scores, d_losses: weights }))
}

/// Flat-vector arithmetic required of a parameter-gradient container.
pub trait GradientVector: Clone {
    fn zeros_like(&self) -> Self;
    /// `self += alpha * other`.
    fn axpy(&mut self, alpha: f64, other: &Self);
    fn scale(&mut self, alpha: f64);
}

impl GradientVector for Vec<f64> {
    fn zeros_like(&self) -> Self {
        vec![0.0; self.len()]
    }

    fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.len(), other.len(), "gradient lengths disagree");
        for (a, b) in self.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    fn scale(&mut self, alpha: f64) {
        for a in self.iter_mut() {
            *a *= alpha;
        }
    }
}

/// One Monte-Carlo draw for the score-function estimator: the sampled
/// set's loss, the gradient of its log sampling probability (confidence,
/// descriptor, and dustbin parameters), and the pathwise loss gradient
/// (offset and depth parameters).
#[derive(Debug, Clone)]
pub struct ReinforceSample<G: GradientVector> {
    pub loss: f64,
    pub log_prob_gradient: G,
    pub pathwise_gradient: G,
}

/// Combine Q sampled sets into one parameter gradient:
/// `(1/Q) * sum_q [ (loss_q - baseline) * d log P(set_q) + d loss_q ]`
/// with the in-batch mean loss as the baseline. The score-function term
/// reaches the sampling distribution's parameters, the pathwise term the
/// geometry parameters; each sample carries them pre-separated.
pub fn reinforce_gradients<G: GradientVector>(samples: &[ReinforceSample<G>]) -> Result<G> {
    if samples.len() < 2 {
        return Err(Error::Domain(format!(
            "score-function baseline needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let baseline = samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64;
    let mut acc = samples[0].log_prob_gradient.zeros_like();
    for sample in samples {
        acc.axpy(sample.loss - baseline, &sample.log_prob_gradient);
        acc.axpy(1.0, &sample.pathwise_gradient);
    }
    acc.scale(1.0 / samples.len() as f64);
    Ok(acc)
}

/// Curriculum over a training batch: how many of the easiest pairs to keep
/// at a given iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub b_min: usize,
    pub b_max: usize,
    pub start_fraction: f64,
    pub increment_fraction: f64,
    pub increment_interval: u64,
    pub warmup_end: u64,
}

/// Standard ramp: 30% of the batch, +10% every 4k iterations, frozen after
/// 20k.
pub const CURRICULUM_START_FRACTION: f64 = 0.30;
pub const CURRICULUM_INCREMENT_FRACTION: f64 = 0.10;
pub const CURRICULUM_INCREMENT_INTERVAL: u64 = 4_000;
pub const CURRICULUM_WARMUP_END: u64 = 20_000;

impl CurriculumSchedule {
    /// Standard schedule for a batch of `batch_size` pairs; the bounds are
    /// the floor of the start and end fractions of the batch.
    pub fn for_batch(batch_size: usize) -> Self {
        let end_fraction = CURRICULUM_START_FRACTION
            + CURRICULUM_INCREMENT_FRACTION * (CURRICULUM_WARMUP_END / CURRICULUM_INCREMENT_INTERVAL) as f64;
        CurriculumSchedule {
            b_min: ((CURRICULUM_START_FRACTION * batch_size as f64).floor() as usize).max(1),
            b_max: ((end_fraction * batch_size as f64).floor() as usize).clamp(1, batch_size),
            start_fraction: CURRICULUM_START_FRACTION,
            increment_fraction: CURRICULUM_INCREMENT_FRACTION,
            increment_interval: CURRICULUM_INCREMENT_INTERVAL,
            warmup_end: CURRICULUM_WARMUP_END,
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.b_min == 0 || self.b_min > self.b_max || self.b_max > batch_size {
            return Err(Error::Domain(format!(
                "curriculum bounds ({}, {}) invalid for batch size {batch_size}",
                self.b_min, self.b_max
            )));
        }
        if self.increment_interval == 0 {
            return Err(Error::Domain("curriculum increment interval must be positive".into()));
        }
        Ok(())
    }

    /// Pairs kept at `iteration` for a batch of `batch_size`.
    pub fn size_at(&self, iteration: u64, batch_size: usize) -> usize {
        let steps = iteration.min(self.warmup_end) / self.increment_interval;
        let fraction = self.start_fraction + self.increment_fraction * steps as f64;
        ((fraction * batch_size as f64).floor() as usize).clamp(self.b_min, self.b_max)
    }
}

/// Indices of the lowest-loss pairs to train on at this iteration, ties
/// broken toward lower index, returned in ascending index order.
pub fn curriculum_select(losses: &[f64], iteration: u64, schedule: &CurriculumSchedule) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    schedule.validate(losses.len())?;
    let keep = schedule.size_at(iteration, losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(keep).collect();
    selected.sort_unstable();
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_deg;
    use crate::kabsch::{kabsch, kabsch_vjp, AlignmentProblem};
    use crate::streams::substream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn query_intrinsics() -> Intrinsics {
        Intrinsics::new(520.0, 520.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    fn random_pose(seed: u64, angle: f64, shift: f64) -> Pose {
        let mut rng = substream(seed, &[55]);
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle * rng.gen::<f64>());
        let t = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * shift;
        Pose::new(*r.matrix(), t).unwrap()
    }

    #[test]
    fn benchmark_grid_has_196_points_in_front_of_the_camera() {
        let grid = benchmark_virtual_grid();
        assert_eq!(grid.len(), 196);
        for p in &grid.points {
            assert!(p.x.abs() <= 1.05 + 1e-12);
            assert!(p.y.abs() <= 0.6 + 1e-12);
            assert!(p.z >= BENCHMARK_MIN_DEPTH - 1e-12);
            assert!(p.z <= BENCHMARK_MIN_DEPTH + BENCHMARK_CUBE[2] + 1e-12);
        }
    }

    #[test]
    fn default_cube_lattice_is_7_by_4_by_7() {
        let grid = virtual_grid(BENCHMARK_CUBE, BENCHMARK_SPACING).unwrap();
        assert_eq!(grid.len(), 196);
        let mut xs: Vec<f64> = grid.points.iter().map(|p| p.x).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(xs.len(), 7);
        let mut ys: Vec<f64> = grid.points.iter().map(|p| p.y).collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ys.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(ys.len(), 4);
        assert_relative_eq!(ys[0], -0.6, epsilon = 1e-12);
        assert_relative_eq!(ys[3], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn tiny_cube_collapses_to_its_corners() {
        let grid = virtual_grid([0.3, 0.3, 0.3], 0.3).unwrap();
        assert_eq!(grid.len(), 8);
        for p in &grid.points {
            assert_relative_eq!(p.x.abs(), 0.15, epsilon = 1e-12);
            assert_relative_eq!(p.y.abs(), 0.15, epsilon = 1e-12);
            assert_relative_eq!(p.z.abs(), 0.15, epsilon = 1e-12);
        }
    }

    #[test]
    fn oversized_spacing_is_rejected() {
        assert!(matches!(virtual_grid([2.1, 1.2, 2.1], 1.3), Err(Error::Domain(_))));
        assert!(matches!(virtual_grid([1.0, 1.0, 1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(virtual_grid([1.0, -1.0, 1.0], 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn perfect_estimate_has_zero_error() {
        let grid = benchmark_virtual_grid();
        let k = query_intrinsics();
        let gt = random_pose(1, 0.4, 0.5);
        let v = vcre(&gt, &gt, &k, &grid).unwrap();
        // The inverse-then-compose round trip costs a few ulps.
        assert!(v.pixels < 1e-10, "vcre at the ground truth: {}", v.pixels);
        assert_eq!(v.clamped_points, 0);

        let identity = vcre(&Pose::identity(), &Pose::identity(), &k, &grid).unwrap();
        assert_eq!(identity.pixels, 0.0);
    }

    #[test]
    fn pure_translation_matches_per_point_parallax() {
        let grid = benchmark_virtual_grid();
        let k = query_intrinsics();
        let gt = random_pose(2, 0.3, 0.4);
        let offset = Vector3::new(0.3, 0.0, 0.0);
        let estimate = Pose::new(*gt.rotation(), gt.translation() + offset).unwrap();
        // h * gt^{-1} * v = v + offset, so each point shifts in x by
        // fx * 0.3 / z.
        let expected: f64 = grid
            .points
            .iter()
            .map(|p| (k.fx * offset.x / p.z - k.fx * 0.0).abs())
            .sum::<f64>()
            / grid.len() as f64;
        let v = vcre(&estimate, &gt, &k, &grid).unwrap();
        let direct: f64 = grid
            .points
            .iter()
            .map(|p| {
                let shifted = p + offset;
                let a = (p.x / p.z * k.fx + k.cx, p.y / p.z * k.fy + k.cy);
                let b = (shifted.x / shifted.z * k.fx + k.cx, shifted.y / shifted.z * k.fy + k.cy);
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
            })
            .sum::<f64>()
            / grid.len() as f64;
        assert_relative_eq!(v.pixels, direct, epsilon = 1e-12);
        assert_relative_eq!(v.pixels, expected, epsilon = 1e-12);
    }

    #[test]
    fn error_depends_only_on_the_relative_transform() {
        let grid = benchmark_virtual_grid();
        let k = query_intrinsics();
        let gt = random_pose(3, 0.5, 0.6);
        let estimate = random_pose(4, 0.5, 0.6);
        let change = random_pose(5, 0.8, 1.0);
        let base = vcre(&estimate, &gt, &k, &grid).unwrap();
        let moved = vcre(&estimate.compose(&change), &gt.compose(&change), &k, &grid).unwrap();
        assert_relative_eq!(base.pixels, moved.pixels, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_points_are_clamped_and_flagged() {
        let grid = benchmark_virtual_grid();
        let k = query_intrinsics();
        let gt = Pose::identity();
        // Push everything far behind the camera.
        let estimate = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -10.0)).unwrap();
        let v = vcre(&estimate, &gt, &k, &grid).unwrap();
        assert!(v.clamped_points > 0);
        assert!(v.pixels.is_finite());
        assert!(v.pixels > NULL_VCRE_MAX);
    }

    #[test]
    fn vcre_gradient_matches_finite_differences() {
        let grid = benchmark_virtual_grid();
        let k = query_intrinsics();
        let gt = random_pose(6, 0.4, 0.5);
        let estimate = random_pose(7, 0.4, 0.5);
        let r0 = *estimate.rotation();
        let t0 = *estimate.translation();
        let grads = vcre_vjp(&r0, &t0, &gt, &k, &grid, 1.0).unwrap();
        let step = 1e-6;
        for row in 0..3 {
            for col in 0..3 {
                let mut hi = r0;
                hi[(row, col)] += step;
                let mut lo = r0;
                lo[(row, col)] -= step;
                let num = (vcre_ambient(&hi, &t0, &gt, &k, &grid).unwrap().pixels
                    - vcre_ambient(&lo, &t0, &gt, &k, &grid).unwrap().pixels)
                    / (2.0 * step);
                assert_relative_eq!(grads.d_rotation[(row, col)], num, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
        for axis in 0..3 {
            let mut hi = t0;
            hi[axis] += step;
            let mut lo = t0;
            lo[axis] -= step;
            let num = (vcre_ambient(&r0, &hi, &gt, &k, &grid).unwrap().pixels
                - vcre_ambient(&r0, &lo, &gt, &k, &grid).unwrap().pixels)
                / (2.0 * step);
            assert_relative_eq!(grads.d_translation[axis], num, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn vcre_gradient_chains_through_kabsch_to_points() {
        let grid = benchmark_virtual_grid();
        let k = query_intrinsics();
        let gt = random_pose(8, 0.5, 0.4);
        let mut rng = substream(9, &[3]);
        let source: Vec<Vector3<f64>> = (0..6)
            .map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() + 1.0))
            .collect();
        let target: Vec<Vector3<f64>> = source
            .iter()
            .map(|p| gt.transform_vec(p) + Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 0.05)
            .collect();

        let loss_of = |source: &[Vector3<f64>], target: &[Vector3<f64>]| {
            let problem = AlignmentProblem::new(source.to_vec(), target.to_vec()).unwrap();
            let pose = kabsch(&problem).unwrap();
            vcre(&pose, &gt, &k, &grid).unwrap().pixels
        };

        let problem = AlignmentProblem::new(source.clone(), target.clone()).unwrap();
        let pose = kabsch(&problem).unwrap();
        let vg = vcre_vjp(&pose.rotation(), &pose.translation(), &gt, &k, &grid, 1.0).unwrap();
        let kg = kabsch_vjp(&problem, &vg.d_rotation, &vg.d_translation).unwrap();

        let step = 1e-6;
        for idx in 0..source.len() {
            for axis in 0..3 {
                let mut hi = source.clone();
                hi[idx][axis] += step;
                let mut lo = source.clone();
                lo[idx][axis] -= step;
                let num = (loss_of(&hi, &target) - loss_of(&lo, &target)) / (2.0 * step);
                assert_relative_eq!(kg.d_source[idx][axis], num, max_relative = 1e-4, epsilon = 1e-8);

                let mut hi = target.clone();
                hi[idx][axis] += step;
                let mut lo = target.clone();
                lo[idx][axis] -= step;
                let num = (loss_of(&source, &hi) - loss_of(&source, &lo)) / (2.0 * step);
                assert_relative_eq!(kg.d_target[idx][axis], num, max_relative = 1e-4, epsilon = 1e-8);
            }
        }
        let _ = rotation_angle_deg(&pose.rotation());
    }

    #[test]
    fn expected_loss_trivial_cases() {
        assert_relative_eq!(expected_set_loss(&[3.0], &[42.0], None).unwrap(), 42.0, epsilon = 1e-12);
        assert_relative_eq!(
            expected_set_loss(&[2.0, 2.0], &[10.0, 30.0], None).unwrap(),
            20.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn expected_loss_with_null_matches_two_term_softmax() {
        let null = NullHypothesisConfig { score: 30.0, vcre_max: 120.0 };
        let value = expected_set_loss(&[10.0], &[200.0], Some(&null)).unwrap();
        let e20 = (20.0f64).exp();
        let expected = (200.0 + 120.0 * e20) / (1.0 + e20);
        assert_relative_eq!(value, expected, epsilon = 1e-12);
        assert!((value - 120.0).abs() < 1e-6);
    }

    #[test]
    fn expected_loss_matches_brute_force_on_random_inputs() {
        let mut rng = substream(10, &[4]);
        for trial in 0..50 {
            let n = 1 + (trial % 7);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
            let losses: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 150.0).collect();
            let null = NullHypothesisConfig::for_set_size(100);
            let value = expected_set_loss(&scores, &losses, Some(&null)).unwrap();
            let mut total = (null.score).exp();
            let mut acc = (null.score).exp() * null.vcre_max;
            for (s, l) in scores.iter().zip(&losses) {
                total += s.exp();
                acc += s.exp() * l;
            }
            assert_relative_eq!(value, acc / total, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn expected_loss_is_shift_invariant_in_scores() {
        // Without the null term (whose score is an absolute anchor),
        // shifting all scores by a constant must not move the softmax.
        let scores = [1.0, 3.5, -2.0, 0.7];
        let losses = [50.0, 20.0, 90.0, 10.0];
        let base = expected_set_loss(&scores, &losses, None).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let moved = expected_set_loss(&shifted, &losses, None).unwrap();
        assert_relative_eq!(base, moved, epsilon = 1e-12);
    }

    #[test]
    fn expected_loss_gradients_match_finite_differences() {
        let scores = [1.0, 2.5, 0.3];
        let losses = [40.0, 15.0, 80.0];
        let null = NullHypothesisConfig::for_set_size(10);
        let (_, grads) = expected_set_loss_vjp(&scores, &losses, Some(&null)).unwrap();
        let step = 1e-6;
        for k in 0..3 {
            let mut hi = scores;
            hi[k] += step;
            let mut lo = scores;
            lo[k] -= step;
            let num = (expected_set_loss(&hi, &losses, Some(&null)).unwrap()
                - expected_set_loss(&lo, &losses, Some(&null)).unwrap())
                / (2.0 * step);
            assert_relative_eq!(grads.d_scores[k], num, max_relative = 1e-6, epsilon = 1e-9);

            let mut hi = losses;
            hi[k] += step;
            let mut lo = losses;
            lo[k] -= step;
            let num = (expected_set_loss(&scores, &hi, Some(&null)).unwrap()
                - expected_set_loss(&scores, &lo, Some(&null)).unwrap())
                / (2.0 * step);
            assert_relative_eq!(grads.d_losses[k], num, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn null_hypothesis_absorbs_mass_and_damps_score_gradients() {
        let null = NullHypothesisConfig::for_set_size(100);
        // Every hypothesis at least 5 soft-inlier units below the null.
        let scores = [null.score - 5.0, null.score - 7.0, null.score - 11.0];
        let losses = [95.0, 110.0, 60.0];
        let (_, with_null) = expected_set_loss_vjp(&scores, &losses, Some(&null)).unwrap();
        let (_, without) = expected_set_loss_vjp(&scores, &losses, None).unwrap();
        let null_mass = 1.0 - with_null.d_losses.iter().sum::<f64>();
        assert!(null_mass > 0.99, "null mass {null_mass}");
        for k in 0..scores.len() {
            assert!(
                with_null.d_scores[k].abs() < without.d_scores[k].abs(),
                "score gradient {k} not damped: {} vs {}",
                with_null.d_scores[k],
                without.d_scores[k]
            );
        }
    }

    #[test]
    fn reinforce_requires_at_least_two_samples() {
        let sample = ReinforceSample { loss: 1.0, log_prob_gradient: vec![0.0], pathwise_gradient: vec![0.0] };
        assert!(matches!(reinforce_gradients(&[sample]), Err(Error::Domain(_))));
    }

    #[test]
    fn equal_losses_cancel_the_score_function_term() {
        let samples: Vec<ReinforceSample<Vec<f64>>> = (0..4)
            .map(|q| ReinforceSample {
                loss: 7.5,
                log_prob_gradient: vec![q as f64, -(q as f64), 1.0],
                pathwise_gradient: vec![0.5, 0.0, -0.25],
            })
            .collect();
        let grad = reinforce_gradients(&samples).unwrap();
        assert_relative_eq!(grad[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(grad[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(grad[2], -0.25, epsilon = 1e-12);
    }

    #[test]
    fn two_armed_bandit_gradient_prefers_the_cheap_arm() {
        // Uniform two-way categorical in logit space; arm 0 costs 0, arm 1
        // costs 1. d log P(arm) / d logits = indicator - P.
        let samples = vec![
            ReinforceSample {
                loss: 0.0,
                log_prob_gradient: vec![0.5, -0.5],
                pathwise_gradient: vec![0.0, 0.0],
            },
            ReinforceSample {
                loss: 1.0,
                log_prob_gradient: vec![-0.5, 0.5],
                pathwise_gradient: vec![0.0, 0.0],
            },
        ];
        let grad = reinforce_gradients(&samples).unwrap();
        // Descending along -grad raises arm 0's logit and lowers arm 1's.
        assert!(grad[0] < 0.0 && grad[1] > 0.0);
        assert_relative_eq!(grad[0], -0.25, epsilon = 1e-12);
        assert_relative_eq!(grad[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn curriculum_sizes_match_the_published_ramp() {
        let schedule = CurriculumSchedule::for_batch(48);
        assert_eq!(schedule.b_min, 14);
        assert_eq!(schedule.b_max, 38);
        assert_eq!(schedule.size_at(0, 48), 14);
        assert_eq!(schedule.size_at(3_999, 48), 14);
        assert_eq!(schedule.size_at(4_000, 48), 19);
        assert_eq!(schedule.size_at(20_000, 48), 38);
        assert_eq!(schedule.size_at(1_000_000, 48), 38);
        let mut last = 0;
        for iter in (0..40_000).step_by(500) {
            let size = schedule.size_at(iter, 48);
            assert!(size >= last, "curriculum shrank at {iter}");
            last = size;
        }
    }

    #[test]
    fn tiny_batches_keep_at_least_one_pair() {
        let schedule = CurriculumSchedule::for_batch(4);
        assert_eq!(schedule.b_min, 1);
        assert_eq!(schedule.size_at(0, 4), 1);
        assert_eq!(schedule.size_at(30_000, 4), 3);
    }

    #[test]
    fn selection_keeps_the_lowest_losses() {
        let schedule = CurriculumSchedule::for_batch(48);
        let losses: Vec<f64> = (0..48).map(|i| i as f64).collect();
        let selected = curriculum_select(&losses, 0, &schedule).unwrap();
        assert_eq!(selected, (0..14).collect::<Vec<_>>());

        let mut reversed = losses.clone();
        reversed.reverse();
        let selected = curriculum_select(&reversed, 0, &schedule).unwrap();
        assert_eq!(selected, (34..48).collect::<Vec<_>>());

        let tied = vec![1.0; 48];
        let selected = curriculum_select(&tied, 0, &schedule).unwrap();
        assert_eq!(selected, (0..14).collect::<Vec<_>>());
    }
}
