//! Hypothesize-and-verify pose estimation over sampled correspondences.
//!
//! Minimal subsets are drawn from a correspondence set with probabilities
//! as weights (guided sampling), solved with Kabsch, scored by a soft
//! inlier count, and refined by alternating hard-inlier selection with
//! re-solving. The soft score keeps verification differentiable; the
//! refinement gradient contract is to differentiate only the final Kabsch
//! solve, holding its inlier set fixed, which [`Hypothesis::solve_set`]
//! records for that purpose.
//!
//! Training and test time run the same machinery with different settings:
//! training uses few hypotheses over larger minimal sets and refines all of
//! them, test time uses many hypotheses over true minimal sets and refines
//! only the winner, aggregated over several independently sampled sets.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::kabsch::{kabsch, AlignmentProblem};
use crate::maps::KeypointMaps;
use crate::matching::{
    correspondence_probability, keypoint_distribution, match_distribution, sample_correspondences,
    similarity_matrix, weighted_sample_indices, CorrespondenceSet, SamplingMode,
    MIN_SAMPLEABLE_PROB,
};
use crate::streams::{substream, tags};

/// Inlier threshold in meters.
pub const DEFAULT_INLIER_THRESHOLD: f64 = 0.15;

/// Sigmoid sharpness rule tied to the threshold.
pub fn default_beta(inlier_threshold: f64) -> f64 {
    5.0 / inlier_threshold
}

/// Resampling attempts granted to a hypothesis slot whose minimal sets keep
/// turning out degenerate, after the initial draw.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RansacMode {
    /// Refine and re-score every hypothesis.
    Train,
    /// Score hypotheses once, refine only the selected winner.
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    /// Hypothesis count per sampled set.
    pub hypotheses: usize,
    /// Correspondences per minimal set.
    pub minimal_set_size: usize,
    /// Inlier threshold in meters.
    pub inlier_threshold: f64,
    /// Soft-inlier sigmoid sharpness.
    pub beta: f64,
    /// Refinement iteration cap.
    pub max_refinements: usize,
    pub mode: RansacMode,
}

impl RansacConfig {
    pub fn train() -> Self {
        RansacConfig {
            hypotheses: 20,
            minimal_set_size: 5,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            beta: default_beta(DEFAULT_INLIER_THRESHOLD),
            max_refinements: 4,
            mode: RansacMode::Train,
        }
    }

    pub fn test() -> Self {
        RansacConfig {
            hypotheses: 100,
            minimal_set_size: 3,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            beta: default_beta(DEFAULT_INLIER_THRESHOLD),
            max_refinements: 4,
            mode: RansacMode::Test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hypotheses == 0 {
            return Err(Error::Domain("hypothesis count must be at least 1".into()));
        }
        if self.minimal_set_size < 3 {
            return Err(Error::Domain(format!(
                "minimal set size must be at least 3, got {}",
                self.minimal_set_size
            )));
        }
        if !(self.inlier_threshold.is_finite() && self.inlier_threshold > 0.0) {
            return Err(Error::Domain(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// One pose hypothesis with its provenance inside the correspondence set.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub pose: Pose,
    /// Soft inlier count over the full set.
    pub score: f64,
    /// Indices the pose was originally solved from.
    pub minimal_set: Vec<usize>,
    /// Indices of the Kabsch solve that produced `pose` (the minimal set
    /// until refinement replaces it); gradients flow through this solve
    /// with the index set held fixed.
    pub solve_set: Vec<usize>,
    /// Hard inliers of `pose`.
    pub inlier_indices: Vec<usize>,
    pub refined: bool,
}

/// Euclidean distance between the mapped first point and the second point.
pub fn pair_residual(pose: &Pose, point_a: &Vector3<f64>, point_b: &Vector3<f64>) -> f64 {
    (point_b - pose.transform_vec(point_a)).norm()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft inlier count: `sum_y sigmoid(beta * (tau - r(y, pose)))`.
pub fn soft_inlier_count(pose: &Pose, set: &CorrespondenceSet, tau: f64, beta: f64) -> f64 {
    set.items
        .iter()
        .map(|c| stable_sigmoid(beta * (tau - pair_residual(pose, &c.point_a.to_vector(), &c.point_b.to_vector()))))
        .sum()
}

/// Gradients of a scalar multiple of the soft inlier count.
#[derive(Debug, Clone)]
pub struct SoftInlierGradients {
    pub d_rotation: Matrix3<f64>,
    pub d_translation: Vector3<f64>,
    pub d_points_a: Vec<Vector3<f64>>,
    pub d_points_b: Vec<Vector3<f64>>,
}

/// VJP of `d_score * soft_inlier_count(pose, set, tau, beta)` with respect
/// to the pose entries and every 3D point in the set.
///
/// With `q = point_b - (R point_a + t)` and `r = |q|`, each pair
/// contributes `-beta * s * (1 - s) * q / r` through `q`; a pair sitting
/// exactly on its match (`r = 0`) has no defined direction and contributes
/// zero (the score is at its plateau there).
pub fn soft_inlier_vjp(
    pose: &Pose,
    set: &CorrespondenceSet,
    tau: f64,
    beta: f64,
    d_score: f64,
) -> SoftInlierGradients {
    let r_mat = pose.rotation();
    let mut grads = SoftInlierGradients {
        d_rotation: Matrix3::zeros(),
        d_translation: Vector3::zeros(),
        d_points_a: vec![Vector3::zeros(); set.len()],
        d_points_b: vec![Vector3::zeros(); set.len()],
    };
    for (idx, c) in set.items.iter().enumerate() {
        let a = c.point_a.to_vector();
        let b = c.point_b.to_vector();
        let q = b - pose.transform_vec(&a);
        let r = q.norm();
        if r < 1e-15 {
            continue;
        }
        let s = stable_sigmoid(beta * (tau - r));
        let d_q = q * (d_score * (-beta) * s * (1.0 - s) / r);
        grads.d_points_b[idx] += d_q;
        grads.d_points_a[idx] -= r_mat.transpose() * d_q;
        grads.d_translation -= d_q;
        grads.d_rotation -= d_q * a.transpose();
    }
    grads
}

/// Indices with residual strictly below the threshold.
pub fn hard_inliers(pose: &Pose, set: &CorrespondenceSet, tau: f64) -> Vec<usize> {
    set.items
        .iter()
        .enumerate()
        .filter(|(_, c)| pair_residual(pose, &c.point_a.to_vector(), &c.point_b.to_vector()) < tau)
        .map(|(idx, _)| idx)
        .collect()
}

/// Uniformly weighted alignment problem over a subset of the set.
pub fn alignment_problem(set: &CorrespondenceSet, indices: &[usize]) -> Result<AlignmentProblem> {
    let mut source = Vec::with_capacity(indices.len());
    let mut target = Vec::with_capacity(indices.len());
    for &idx in indices {
        let c = set
            .items
            .get(idx)
            .ok_or_else(|| Error::Shape(format!("correspondence index {idx} out of range")))?;
        source.push(c.point_a.to_vector());
        target.push(c.point_b.to_vector());
    }
    AlignmentProblem::new(source, target)
}

/// Guided hypothesis generation: each slot draws a minimal set without
/// replacement, weighted by correspondence probability, from its own RNG
/// substream `(seed, path.., slot)`, and retries a few times if Kabsch
/// reports a degenerate configuration.
pub fn generate_hypotheses(
    set: &CorrespondenceSet,
    cfg: &RansacConfig,
    seed: u64,
    path: &[u64],
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if set.len() < cfg.minimal_set_size {
        return Err(Error::InsufficientData { needed: cfg.minimal_set_size, got: set.len() });
    }
    let weights: Vec<f64> = set.items.iter().map(|c| c.probability).collect();
    let mut hypotheses = Vec::with_capacity(cfg.hypotheses);
    let mut slot_path: Vec<u64> = path.to_vec();
    slot_path.push(tags::HYPOTHESIS);
    slot_path.push(0);
    for slot in 0..cfg.hypotheses {
        *slot_path.last_mut().expect("path is nonempty") = slot as u64;
        let mut rng = substream(seed, &slot_path);
        for _attempt in 0..=MAX_RESAMPLE_ATTEMPTS {
            let minimal_set = weighted_sample_indices(
                &weights,
                MIN_SAMPLEABLE_PROB,
                cfg.minimal_set_size,
                SamplingMode::WithoutReplacement,
                &mut rng,
            )?;
            let pose = match kabsch(&alignment_problem(set, &minimal_set)?) {
                Ok(pose) => pose,
                Err(Error::DegenerateConfiguration(_)) => continue,
                Err(e) => return Err(e),
            };
            let score = soft_inlier_count(&pose, set, cfg.inlier_threshold, cfg.beta);
            let inlier_indices = hard_inliers(&pose, set, cfg.inlier_threshold);
            hypotheses.push(Hypothesis {
                pose,
                score,
                solve_set: minimal_set.clone(),
                minimal_set,
                inlier_indices,
                refined: false,
            });
            break;
        }
    }
    if hypotheses.is_empty() {
        return Err(Error::NoHypothesis);
    }
    Ok(hypotheses)
}

/// Alternate hard-inlier selection and Kabsch re-solving, then re-score.
///
/// Stops after `max_refinements` iterations or as soon as the inlier count
/// stops growing; a degenerate solve or an inlier set smaller than the
/// minimal set keeps the last valid state. With `max_refinements = 0` the
/// input comes back verbatim.
pub fn refine(hypothesis: &Hypothesis, set: &CorrespondenceSet, cfg: &RansacConfig) -> Hypothesis {
    let mut current = hypothesis.clone();
    let mut iterated = false;
    for _ in 0..cfg.max_refinements {
        let support = current.inlier_indices.clone();
        if support.len() < cfg.minimal_set_size {
            break;
        }
        let problem = match alignment_problem(set, &support) {
            Ok(p) => p,
            Err(_) => break,
        };
        let pose = match kabsch(&problem) {
            Ok(p) => p,
            Err(_) => break,
        };
        let inlier_indices = hard_inliers(&pose, set, cfg.inlier_threshold);
        let grew = inlier_indices.len() > support.len();
        current.pose = pose;
        current.solve_set = support;
        current.inlier_indices = inlier_indices;
        iterated = true;
        if !grew {
            break;
        }
    }
    if iterated {
        current.score = soft_inlier_count(&current.pose, set, cfg.inlier_threshold, cfg.beta);
        current.refined = true;
    }
    current
}

/// Index of the highest-scoring hypothesis; ties go to the lowest index.
pub fn select_best(hypotheses: &[Hypothesis]) -> Result<usize> {
    if hypotheses.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut best = 0;
    for (idx, h) in hypotheses.iter().enumerate().skip(1) {
        if h.score > hypotheses[best].score {
            best = idx;
        }
    }
    Ok(best)
}

/// A finished pose estimate with its supporting evidence.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: Pose,
    /// Soft inlier score of the returned pose over its set.
    pub confidence: f64,
    /// Hard inlier indices into [`Estimate::set`].
    pub inliers: Vec<usize>,
    /// The correspondence set the winning hypothesis was estimated from.
    pub set: CorrespondenceSet,
}

/// Run generation, selection, and refinement on one already-sampled set.
///
/// Train mode refines every hypothesis before selecting; test mode selects
/// first and refines only the winner.
pub fn estimate_from_set(
    set: &CorrespondenceSet,
    cfg: &RansacConfig,
    seed: u64,
    path: &[u64],
) -> Result<Estimate> {
    let mut hypotheses = generate_hypotheses(set, cfg, seed, path)?;
    let winner = match cfg.mode {
        RansacMode::Train => {
            for h in &mut hypotheses {
                *h = refine(h, set, cfg);
            }
            hypotheses.swap_remove(select_best(&hypotheses)?)
        }
        RansacMode::Test => {
            let best = select_best(&hypotheses)?;
            refine(&hypotheses[best], set, cfg)
        }
    };
    Ok(Estimate {
        pose: winner.pose,
        confidence: winner.score,
        inliers: winner.inlier_indices,
        set: set.clone(),
    })
}

/// Full test-time estimation from a pair of keypoint maps.
///
/// Draws `samplings` independent correspondence sets of size `set_size`,
/// generates and scores hypotheses for each, selects the best hypothesis
/// overall, and refines only that winner. Set samplings that fail (support
/// exhausted, all slots degenerate) are skipped; if none survives, the
/// whole estimation reports no hypothesis.
#[allow(clippy::too_many_arguments)]
pub fn estimate_from_maps(
    maps_a: &KeypointMaps,
    k_a: &Intrinsics,
    maps_b: &KeypointMaps,
    k_b: &Intrinsics,
    temperature: f64,
    dustbin: Option<f64>,
    set_size: usize,
    samplings: usize,
    sampling: SamplingMode,
    cfg: &RansacConfig,
    seed: u64,
    path: &[u64],
) -> Result<Estimate> {
    cfg.validate()?;
    if samplings == 0 {
        return Err(Error::Domain("at least one set sampling is required".into()));
    }
    let sim = similarity_matrix(maps_a.descriptors(), maps_b.descriptors(), dustbin)?;
    let dist = match_distribution(&sim, temperature)?;
    let kp_a = keypoint_distribution(maps_a.confidence())?;
    let kp_b = keypoint_distribution(maps_b.confidence())?;
    let prob = correspondence_probability(&dist, &kp_a, &kp_b)?;

    let mut best: Option<(f64, Hypothesis, CorrespondenceSet)> = None;
    let mut sample_path: Vec<u64> = path.to_vec();
    sample_path.push(tags::SET_SAMPLE);
    sample_path.push(0);
    for q in 0..samplings {
        *sample_path.last_mut().expect("path is nonempty") = q as u64;
        let mut rng = substream(seed, &sample_path);
        let set = match sample_correspondences(
            &prob,
            maps_a,
            k_a,
            maps_b,
            k_b,
            set_size,
            sampling,
            &mut rng,
        ) {
            Ok(set) => set,
            Err(Error::Support { .. }) | Err(Error::EmptyDistribution) => continue,
            Err(e) => return Err(e),
        };
        let hypotheses = match generate_hypotheses(&set, cfg, seed, &sample_path) {
            Ok(h) => h,
            Err(Error::NoHypothesis) | Err(Error::InsufficientData { .. }) => continue,
            Err(e) => return Err(e),
        };
        let idx = select_best(&hypotheses)?;
        if best.as_ref().map_or(true, |(score, _, _)| hypotheses[idx].score > *score) {
            best = Some((hypotheses[idx].score, hypotheses[idx].clone(), set));
        }
    }

    let (_, winner, set) = best.ok_or(Error::NoHypothesis)?;
    let winner = refine(&winner, &set, cfg);
    Ok(Estimate {
        pose: winner.pose,
        confidence: winner.score,
        inliers: winner.inlier_indices,
        set,
    })
}
