//! Finite-difference verification of the analytic gradients.
//!
//! Each check draws seeded random instances, picks a random direction in the
//! input space, and compares the analytic directional derivative against a
//! central difference. Rotations are perturbed along the manifold
//! (`R · exp(eps * skew(w))`) where the function requires an orthonormal
//! input, and in raw matrix coordinates where it does not.
//!
//! The same rows back the `gradcheck` command and the test suite, so a
//! regression in any backward pass shows up identically in both.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraPoint3D, Intrinsics, Pose};
use crate::kabsch::{kabsch, kabsch_vjp, AlignmentProblem};
use crate::matching::{Correspondence, CorrespondenceSet};
use crate::objective::{
    benchmark_virtual_grid, expected_set_loss, expected_set_loss_vjp, vcre_ambient, vcre_vjp,
    NullHypothesisConfig,
};
use crate::ransac::{soft_inlier_count, soft_inlier_vjp, RansacConfig};
use crate::streams::{substream, tags};
use crate::toy::scene::SceneConfig;
use crate::toy::train::{
    evaluate_scene, replay_expected_loss, scene_pathwise_gradient, toy_run, FrozenSample,
    TrainConfig,
};

pub const DEFAULT_INSTANCES: usize = 100;
/// Tolerance for single-operation checks.
pub const DEFAULT_UNIT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the sample-solve-score chain, which stacks several solves.
pub const DEFAULT_CHAIN_TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-5;
/// Base step for the sample-solve-score chain. Minimal-set solves can put
/// third derivatives many orders above the gradient, so the chain check
/// differences at a finer step and Richardson-extrapolates the h^2 term away.
const CHAIN_STEP: f64 = 1e-6;
/// Instances whose construction degenerates (no samplings survive, a solve
/// gradient is skipped, the gradient vanishes) are redrawn up to this often.
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub seed: u64,
    /// Random instances per row.
    pub instances: usize,
    pub tolerance_unit: f64,
    pub tolerance_chain: f64,
    /// Bias the fixture row's analytic value so it must fail; proves the
    /// harness actually rejects wrong gradients.
    pub inject_bug: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            tolerance_unit: DEFAULT_UNIT_TOLERANCE,
            tolerance_chain: DEFAULT_CHAIN_TOLERANCE,
            inject_bug: false,
        }
    }
}

impl CheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Validation("need at least one instance per check".into()));
        }
        for (name, t) in [("unit", self.tolerance_unit), ("chain", self.tolerance_chain)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Validation(format!(
                    "{name} tolerance must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one check row.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Run every row. A return of `Ok` means the harness ran; inspect
/// [`CheckRow::passed`] (or [`all_passed`]) for the verdict.
pub fn run_checks(cfg: &CheckConfig) -> Result<Vec<CheckRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(6);
    rows.push(row(cfg, "harness_fixture", 0, cfg.tolerance_unit, |rng| {
        fixture_instance(rng, cfg.inject_bug)
    })?);
    rows.push(row(cfg, "kabsch_vjp", 1, cfg.tolerance_unit, kabsch_instance)?);
    rows.push(row(cfg, "soft_inlier_count", 2, cfg.tolerance_unit, soft_inlier_instance)?);
    let grid = benchmark_virtual_grid();
    rows.push(row(cfg, "vcre", 3, cfg.tolerance_unit, |rng| vcre_instance(rng, &grid))?);
    rows.push(row(cfg, "expected_set_loss", 4, cfg.tolerance_unit, expected_loss_instance)?);
    rows.push(row(cfg, "pathwise_chain", 5, cfg.tolerance_chain, |rng| {
        pathwise_instance(rng, &grid)
    })?);
    Ok(rows)
}

pub fn all_passed(rows: &[CheckRow]) -> bool {
    rows.iter().all(|r| r.passed)
}

/// Fixed-width table with one line per row, `pass`/`FAIL` in the last column.
pub fn render_table(rows: &[CheckRow]) -> String {
    let mut out = String::from(
        "check                 instances   max rel err     tolerance  status\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>10} {:>13.3e} {:>13.3e}  {}\n",
            r.name,
            r.instances,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

fn row(
    cfg: &CheckConfig,
    name: &'static str,
    tag: u64,
    tolerance: f64,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<CheckRow> {
    let mut max_rel_err: f64 = 0.0;
    for i in 0..cfg.instances {
        let mut rng = substream(cfg.seed, &[tags::GRADCHECK, tag, i as u64]);
        max_rel_err = max_rel_err.max(instance(&mut rng)?);
    }
    Ok(CheckRow { name, instances: cfg.instances, max_rel_err, tolerance, passed: max_rel_err <= tolerance })
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12)
}

fn central(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(STEP)? - f(-STEP)?) / (2.0 * STEP))
}

/// Central differences at `h` and `h/2`, extrapolated to cancel the leading
/// quadratic truncation term.
fn richardson(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let full = (f(h)? - f(-h)?) / (2.0 * h);
    let half = (f(h / 2.0)? - f(-h / 2.0)?) / h;
    Ok((4.0 * half - full) / 3.0)
}

fn unit_interval(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * rng.gen::<f64>() - 1.0
}

fn random_vec(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(unit_interval(rng), unit_interval(rng), unit_interval(rng))
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    Matrix3::from_fn(|_, _| unit_interval(rng))
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = random_vec(rng);
        if v.norm() > 1e-3 {
            break v.normalize();
        }
    };
    *Rotation3::from_scaled_axis(axis * (max_angle * rng.gen::<f64>())).matrix()
}

/// `d/deps [ R exp(eps skew(w)) ] = R skew(w)` at `eps = 0`.
fn rotation_tangent(r: &Matrix3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    r * w.cross_matrix()
}

fn retract(r: &Matrix3<f64>, w: &Vector3<f64>, eps: f64) -> Matrix3<f64> {
    r * *Rotation3::from_scaled_axis(w * eps).matrix()
}

/// Known derivative of a cubic; biased when the bug injection is on, which
/// the comparison must then flag.
fn fixture_instance(rng: &mut ChaCha8Rng, inject: bool) -> Result<f64> {
    let x: f64 = rng.gen_range(0.5..2.0);
    let mut analytic = 3.0 * x * x;
    if inject {
        analytic += 1e-3 * (1.0 + analytic.abs());
    }
    let fd = central(|eps| Ok((x + eps).powi(3)))?;
    Ok(rel_err(analytic, fd))
}

fn kabsch_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    for _ in 0..MAX_REDRAWS {
        let n = rng.gen_range(4..=12);
        let rotation = random_rotation(rng, std::f64::consts::PI * 0.9);
        let translation = random_vec(rng);
        let source: Vec<Vector3<f64>> = (0..n).map(|_| random_vec(rng)).collect();
        let target: Vec<Vector3<f64>> = source
            .iter()
            .map(|s| rotation * s + translation + random_vec(rng) * 0.02)
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.8)).collect();
        let d_rotation = random_matrix(rng);
        let d_translation = random_vec(rng);

        let problem =
            AlignmentProblem::with_weights(source.clone(), target.clone(), weights.clone())?;
        let grads = match kabsch_vjp(&problem, &d_rotation, &d_translation) {
            Ok(g) => g,
            Err(Error::IllConditionedGradient { .. }) => continue,
            Err(e) => return Err(e),
        };

        let v_source: Vec<Vector3<f64>> = (0..n).map(|_| random_vec(rng)).collect();
        let v_target: Vec<Vector3<f64>> = (0..n).map(|_| random_vec(rng)).collect();
        let v_weights: Vec<f64> = (0..n).map(|_| unit_interval(rng)).collect();

        let analytic: f64 = (0..n)
            .map(|i| {
                grads.d_source[i].dot(&v_source[i])
                    + grads.d_target[i].dot(&v_target[i])
                    + grads.d_weights[i] * v_weights[i]
            })
            .sum();

        let fd = central(|eps| {
            let src: Vec<_> = (0..n).map(|i| source[i] + v_source[i] * eps).collect();
            let tgt: Vec<_> = (0..n).map(|i| target[i] + v_target[i] * eps).collect();
            let w: Vec<_> = (0..n).map(|i| weights[i] + v_weights[i] * eps).collect();
            let pose = kabsch(&AlignmentProblem::with_weights(src, tgt, w)?)?;
            Ok(d_rotation.dot(pose.rotation()) + d_translation.dot(pose.translation()))
        })?;
        return Ok(rel_err(analytic, fd));
    }
    Err(Error::Generation("could not draw a well-conditioned alignment problem".into()))
}

fn soft_inlier_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let tau = 0.15;
    let beta = 5.0 / tau;
    let n = rng.gen_range(5..=20);
    let rotation = random_rotation(rng, 0.5);
    let translation = random_vec(rng) * 0.5;
    let pose = Pose::new(rotation, translation)?;

    let items: Vec<Correspondence> = (0..n)
        .map(|i| {
            let a = random_vec(rng) + Vector3::new(0.0, 0.0, 2.0);
            // Spread residuals across the sigmoid: some well inside the
            // threshold, some far outside, none at the zero-distance kink.
            let noise = loop {
                let v = random_vec(rng);
                if v.norm() > 1e-2 {
                    break v.normalize() * rng.gen_range(0.02..0.35);
                }
            };
            let b = rotation * a + translation + noise;
            Correspondence {
                cell_a: i,
                cell_b: i,
                point_a: CameraPoint3D::from_vector(a),
                point_b: CameraPoint3D::from_vector(b),
                probability: 1.0 / n as f64,
            }
        })
        .collect();
    let set = CorrespondenceSet { items };

    let d_score = rng.gen_range(0.5..2.0);
    let grads = soft_inlier_vjp(&pose, &set, tau, beta, d_score);

    let w = random_vec(rng);
    let v_t = random_vec(rng);
    let v_a: Vec<Vector3<f64>> = (0..n).map(|_| random_vec(rng)).collect();
    let v_b: Vec<Vector3<f64>> = (0..n).map(|_| random_vec(rng)).collect();

    let analytic = grads.d_rotation.dot(&rotation_tangent(&rotation, &w))
        + grads.d_translation.dot(&v_t)
        + (0..n)
            .map(|i| grads.d_points_a[i].dot(&v_a[i]) + grads.d_points_b[i].dot(&v_b[i]))
            .sum::<f64>();

    let fd = central(|eps| {
        let pose_eps = Pose::new(retract(&rotation, &w, eps), translation + v_t * eps)?;
        let items: Vec<Correspondence> = set
            .items
            .iter()
            .enumerate()
            .map(|(i, c)| Correspondence {
                point_a: CameraPoint3D::from_vector(c.point_a.to_vector() + v_a[i] * eps),
                point_b: CameraPoint3D::from_vector(c.point_b.to_vector() + v_b[i] * eps),
                ..c.clone()
            })
            .collect();
        Ok(d_score * soft_inlier_count(&pose_eps, &CorrespondenceSet { items }, tau, beta))
    })?;
    Ok(rel_err(analytic, fd))
}

fn vcre_instance(rng: &mut ChaCha8Rng, grid: &crate::objective::VirtualGrid) -> Result<f64> {
    let k = Intrinsics::new(520.0, 520.0, 320.0, 240.0, 640.0, 480.0)?;
    let gt = Pose::new(random_rotation(rng, 0.6), random_vec(rng) * 0.5)?;
    // A nearby estimate keeps every grid point away from the depth clamp,
    // where the objective is smooth.
    let rotation = retract(gt.rotation(), &random_vec(rng), 0.15 * rng.gen::<f64>());
    let translation = gt.translation() + random_vec(rng) * 0.15;
    let d_value = rng.gen_range(0.5..2.0);

    let grads = vcre_vjp(&rotation, &translation, &gt, &k, grid, d_value)?;

    let v_r = random_matrix(rng);
    let v_t = random_vec(rng);
    let analytic = grads.d_rotation.dot(&v_r) + grads.d_translation.dot(&v_t);

    let fd = central(|eps| {
        let value = vcre_ambient(&(rotation + v_r * eps), &(translation + v_t * eps), &gt, &k, grid)?;
        Ok(d_value * value.pixels)
    })?;
    Ok(rel_err(analytic, fd))
}

fn expected_loss_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.gen_range(2..=12);
    let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..8.0)).collect();
    let losses: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..200.0)).collect();
    let null = NullHypothesisConfig { score: rng.gen_range(1.0..6.0), vcre_max: 120.0 };

    let (_, grads) = expected_set_loss_vjp(&scores, &losses, Some(&null))?;

    let v_s: Vec<f64> = (0..m).map(|_| unit_interval(rng)).collect();
    let v_l: Vec<f64> = (0..m).map(|_| unit_interval(rng)).collect();
    let analytic: f64 =
        (0..m).map(|i| grads.d_scores[i] * v_s[i] + grads.d_losses[i] * v_l[i]).sum();

    let fd = central(|eps| {
        let s: Vec<f64> = (0..m).map(|i| scores[i] + v_s[i] * eps).collect();
        let l: Vec<f64> = (0..m).map(|i| losses[i] + v_l[i] * eps).collect();
        expected_set_loss(&s, &l, Some(&null))
    })?;
    Ok(rel_err(analytic, fd))
}

/// End-to-end check through sample, solve, score, and expectation: freeze one
/// scene evaluation's sampling structure, take the analytic map-space
/// gradient, chain it onto one log-depth parameter, and difference the
/// replayed loss against a nudge of that parameter.
fn pathwise_instance(rng: &mut ChaCha8Rng, grid: &crate::objective::VirtualGrid) -> Result<f64> {
    let scene_config = SceneConfig {
        points: 20,
        grid_width: 6,
        grid_height: 6,
        descriptor_dim: 16,
        ..SceneConfig::default()
    };
    let train_config = TrainConfig {
        samplings: 3,
        set_size: 12,
        ransac: RansacConfig { hypotheses: 6, minimal_set_size: 3, ..RansacConfig::train() },
        ..TrainConfig::default()
    };

    for _ in 0..MAX_REDRAWS {
        let instance_seed = rng.gen::<u64>();
        let cfg = TrainConfig { seed: instance_seed, ..train_config.clone() };
        let (scenes, backbone) = match toy_run(&scene_config, instance_seed, 1) {
            Ok(pair) => pair,
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        };
        let scene = &scenes[0];
        let eval = evaluate_scene(&backbone, scene, 0, 0, &cfg, grid)?;
        if eval.forward.samples.is_empty() {
            continue;
        }
        let (grads, skips) = scene_pathwise_gradient(&eval, scene, &cfg, grid)?;
        if skips.ill_conditioned > 0 {
            // A skipped solve gradient makes the analytic value deliberately
            // partial; differencing it would test the skip, not the chain.
            continue;
        }

        // The steepest log-depth coordinate keeps the comparison away from
        // vanishing denominators.
        let mut best: Option<(usize, usize, f64)> = None;
        for (image, d_depths, maps) in [
            (0usize, &grads.d_depths_a, &eval.maps_a),
            (1usize, &grads.d_depths_b, &eval.maps_b),
        ] {
            for cell in 0..maps.cells() {
                let chained = d_depths[cell] * maps.depth(cell);
                if best.is_none() || chained.abs() > best.unwrap().2.abs() {
                    best = Some((image, cell, chained));
                }
            }
        }
        let (image, cell, analytic) = best.unwrap();
        if analytic.abs() < 1e-4 {
            continue;
        }

        let frozen: Vec<FrozenSample> =
            eval.forward.samples.iter().map(FrozenSample::from_forward).collect();
        let gt = scene.gt_relative();
        let fd = richardson(CHAIN_STEP, |eps| {
            let mut nudged = backbone.clone();
            nudged.images[image].log_depths[cell] += eps;
            let maps_a = nudged.forward(0)?;
            let maps_b = nudged.forward(1)?;
            replay_expected_loss(&frozen, &maps_a, &maps_b, &scene.intrinsics, &gt, grid, &cfg)
        })?;
        return Ok(rel_err(analytic, fd));
    }
    Err(Error::Generation("could not draw a clean sample-solve-score instance".into()))
}
