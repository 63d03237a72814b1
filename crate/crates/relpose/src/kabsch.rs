//! Weighted Kabsch solver for rigid 3D-3D alignment, with an exact
//! vector-Jacobian product through the SVD.
//!
//! Given weighted pairs `(x_i, x'_i)` the solver returns the pose
//! minimizing `sum_i w_i * |R x_i + t - x'_i|^2`. The rotation comes from
//! the SVD of the weighted, centered cross-covariance; a sign correction on
//! the smallest singular direction keeps `det(R) = +1` even when the
//! unconstrained optimum would be a reflection.
//!
//! [`kabsch_vjp`] backpropagates an upstream gradient on `(R, t)` to all
//! inputs (both point sets and the weights). The derivation treats `R` as a
//! function of the cross-covariance through its SVD with the reflection
//! sign frozen, which is the correct Jacobian everywhere away from
//! singular-value crossings; near a crossing the problem is genuinely
//! ill-conditioned and the function fails loudly instead of returning
//! garbage.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Minimum relative gap between singular values of the cross-covariance for
/// the gradient to be considered well-conditioned.
pub const MIN_SINGULAR_GAP: f64 = 1e-8;

/// Relative threshold on the second singular value under which the point
/// configuration is treated as rank-deficient (collinear or coincident).
const RANK_TOL: f64 = 1e-12;

/// A weighted point-set alignment problem. Weights default to uniform.
#[derive(Debug, Clone)]
pub struct AlignmentProblem {
    source: Vec<Vector3<f64>>,
    target: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

impl AlignmentProblem {
    pub fn new(source: Vec<Vector3<f64>>, target: Vec<Vector3<f64>>) -> Result<Self> {
        let weights = vec![1.0; source.len()];
        Self::with_weights(source, target, weights)
    }

    pub fn with_weights(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if source.len() != target.len() || source.len() != weights.len() {
            return Err(Error::Shape(format!(
                "alignment inputs disagree: {} source, {} target, {} weights",
                source.len(),
                target.len(),
                weights.len()
            )));
        }
        if source.len() < 3 {
            return Err(Error::InsufficientData { needed: 3, got: source.len() });
        }
        for w in &weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Domain(format!("weights must be non-negative, got {w}")));
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("weights sum to zero".into()));
        }
        if source
            .iter()
            .chain(target.iter())
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("alignment points".into()));
        }
        Ok(AlignmentProblem { source, target, weights })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Vector3<f64>] {
        &self.source
    }

    pub fn target(&self) -> &[Vector3<f64>] {
        &self.target
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean squared residual of a pose on this problem.
    pub fn residual(&self, pose: &Pose) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let mut acc = 0.0;
        for ((s, t), w) in self.source.iter().zip(&self.target).zip(&self.weights) {
            acc += w * (pose.rotation() * s + pose.translation() - t).norm_squared();
        }
        acc / total
    }
}

/// Sorted SVD of the weighted centered cross-covariance, plus everything
/// the solve and its VJP share.
struct Decomposition {
    centroid_source: Vector3<f64>,
    centroid_target: Vector3<f64>,
    total_weight: f64,
    u: Matrix3<f64>,
    v_t: Matrix3<f64>,
    sigma: [f64; 3],
    /// Sign applied to the smallest singular direction: +1 or -1.
    sign: f64,
    rotation: Matrix3<f64>,
}

fn decompose(problem: &AlignmentProblem) -> Result<Decomposition> {
    let total_weight: f64 = problem.weights.iter().sum();
    let mut centroid_source = Vector3::zeros();
    let mut centroid_target = Vector3::zeros();
    for ((s, t), w) in problem.source.iter().zip(&problem.target).zip(&problem.weights) {
        centroid_source += *w * s;
        centroid_target += *w * t;
    }
    centroid_source /= total_weight;
    centroid_target /= total_weight;

    let mut cross = Matrix3::zeros();
    for ((s, t), w) in problem.source.iter().zip(&problem.target).zip(&problem.weights) {
        cross += *w * (t - centroid_target) * (s - centroid_source).transpose();
    }

    let svd = cross.svd(true, true);
    let mut u = svd.u.expect("3x3 svd yields u");
    let mut v_t = svd.v_t.expect("3x3 svd yields v_t");
    let mut sigma = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];

    // Sort singular values descending, permuting U columns / V^T rows to
    // match, so "smallest direction" below is well-defined.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).expect("singular values are finite"));
    if order != [0, 1, 2] {
        let su = u;
        let sv = v_t;
        let ss = sigma;
        for (dst, &src) in order.iter().enumerate() {
            u.set_column(dst, &su.column(src));
            v_t.set_row(dst, &sv.row(src));
            sigma[dst] = ss[src];
        }
    }

    if !(sigma[1] > sigma[0] * RANK_TOL) {
        return Err(Error::DegenerateConfiguration(format!(
            "cross-covariance is rank-deficient (singular values {:.3e}, {:.3e}, {:.3e})",
            sigma[0], sigma[1], sigma[2]
        )));
    }

    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let mut d = Matrix3::identity();
    d[(2, 2)] = sign;
    let rotation = u * d * v_t;

    Ok(Decomposition {
        centroid_source,
        centroid_target,
        total_weight,
        u,
        v_t,
        sigma,
        sign,
        rotation,
    })
}

/// Solve the weighted alignment problem for the pose with `x' ~= R x + t`.
pub fn kabsch(problem: &AlignmentProblem) -> Result<Pose> {
    let dec = decompose(problem)?;
    let translation = dec.centroid_target - dec.rotation * dec.centroid_source;
    Pose::new(dec.rotation, translation)
}

/// Gradients of a scalar loss with respect to every input of [`kabsch`].
#[derive(Debug, Clone)]
pub struct KabschGradients {
    pub d_source: Vec<Vector3<f64>>,
    pub d_target: Vec<Vector3<f64>>,
    pub d_weights: Vec<f64>,
}

/// Backpropagate upstream gradients `d_rotation` (on the 3x3 rotation, in
/// ambient matrix coordinates) and `d_translation` through the solve.
///
/// Fails with [`Error::IllConditionedGradient`] when the singular values of
/// the cross-covariance are closer than [`MIN_SINGULAR_GAP`] relative to the
/// largest one; the reflection sign is frozen at its forward value during
/// differentiation, which is exactly where the Jacobian stops existing.
pub fn kabsch_vjp(
    problem: &AlignmentProblem,
    d_rotation: &Matrix3<f64>,
    d_translation: &Vector3<f64>,
) -> Result<KabschGradients> {
    let dec = decompose(problem)?;
    let [s0, s1, s2] = dec.sigma;
    let gap = (s0 - s1).min(s1 - s2) / s0.max(f64::MIN_POSITIVE);
    if gap < MIN_SINGULAR_GAP {
        return Err(Error::IllConditionedGradient { gap, min_gap: MIN_SINGULAR_GAP });
    }

    // t = c' - R c couples the translation gradient into the rotation.
    let g_eff = d_rotation - d_translation * dec.centroid_source.transpose();

    // R = U D V^T with D = diag(1, 1, sign). Writing dU = U w_U and
    // dV = V w_V with antisymmetric w_U, w_V, and P = U^T dH V, the SVD
    // differential gives for i != j
    //   w_U[ij] = (s_j P_ij + s_i P_ji) / (s_j^2 - s_i^2)
    //   w_V[ij] = (s_i P_ij + s_j P_ji) / (s_j^2 - s_i^2)
    // and dR = U (w_U D - D w_V) V^T. Collecting coefficients of P yields
    // the adjoint Q below; stable forms split by whether the pair of axes
    // shares the same sign in D (anti-symmetric part over s_i + s_j) or not
    // (symmetric part over s_j - s_i).
    let g_tilde = dec.u.transpose() * g_eff * dec.v_t.transpose();
    let d = [1.0, 1.0, dec.sign];
    let mut q = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            q[(i, j)] = if d[i] * d[j] > 0.0 {
                d[i] * (g_tilde[(i, j)] - g_tilde[(j, i)]) / (dec.sigma[i] + dec.sigma[j])
            } else {
                -d[i] * (g_tilde[(i, j)] + g_tilde[(j, i)]) / (dec.sigma[j] - dec.sigma[i])
            };
        }
    }
    let d_cross = dec.u * q * dec.v_t;

    let n = problem.len();
    let w_total = dec.total_weight;
    let mut d_source = vec![Vector3::zeros(); n];
    let mut d_target = vec![Vector3::zeros(); n];
    let mut d_weights = vec![0.0; n];

    // H = sum_i w_i b_i a_i^T with a = x - c, b = x' - c'.
    let d_cross_t = d_cross.transpose();
    let mut sum_da = Vector3::zeros();
    let mut sum_db = Vector3::zeros();
    for i in 0..n {
        let a = problem.source[i] - dec.centroid_source;
        let b = problem.target[i] - dec.centroid_target;
        let da = problem.weights[i] * (d_cross_t * b);
        let db = problem.weights[i] * (d_cross * a);
        sum_da += da;
        sum_db += db;
        d_source[i] = da;
        d_target[i] = db;
        d_weights[i] = b.dot(&(d_cross * a));
    }

    // Centroid contributions: each c-sensitivity spreads back across the
    // points with weight w_i / W, plus the direct c terms from t.
    let d_centroid_source = -sum_da - dec.rotation.transpose() * d_translation;
    let d_centroid_target = -sum_db + d_translation;
    for i in 0..n {
        let frac = problem.weights[i] / w_total;
        d_source[i] += frac * d_centroid_source;
        d_target[i] += frac * d_centroid_target;
        let a = problem.source[i] - dec.centroid_source;
        let b = problem.target[i] - dec.centroid_target;
        d_weights[i] += (d_centroid_source.dot(&a) + d_centroid_target.dot(&b)) / w_total;
    }

    Ok(KabschGradients { d_source, d_target, d_weights })
}
