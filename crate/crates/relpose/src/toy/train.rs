//! End-to-end training of the toy backbone.
//!
//! Each iteration evaluates every scene — similarity, match distribution,
//! correspondence sampling, hypothesis generation and refinement, expected
//! reprojection loss — picks the currently easiest scenes per the curriculum
//! schedule, and steps the backbone parameters along the combined
//! score-function (REINFORCE) and pathwise gradient.
//!
//! Gradients flow along two routes:
//!
//! * **pathwise** — loss → softmax weights → soft inlier scores and
//!   reprojection of each hypothesis → alignment solve → sampled 3D points →
//!   offsets and depths. Sampling *structure* (which pairs, which support
//!   sets) is held fixed; only point coordinates move.
//! * **score-function** — loss-minus-baseline times the gradient of the log
//!   probability of the sampled set → confidence logits, similarity entries
//!   (hence descriptors) and the dustbin.
//!
//! Scenes within an iteration are evaluated on separate threads; results are
//! reduced in scene order, so runs are reproducible regardless of thread
//! scheduling.

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::kabsch::{kabsch, kabsch_vjp};
use crate::maps::KeypointMaps;
use crate::matching::{
    accumulate_log_prob_gradient, correspondence_probability, keypoint_distribution,
    match_distribution, sample_correspondences, similarity_matrix, similarity_vjp,
    Correspondence, CorrespondenceProbability, CorrespondenceSet, LogProbGradients,
    MatchDistribution, SamplingMode,
};
use crate::objective::{
    benchmark_virtual_grid, curriculum_select, expected_set_loss, expected_set_loss_vjp,
    reinforce_gradients, vcre, vcre_vjp, CurriculumSchedule, ExpectedLossGradients,
    GradientVector, NullHypothesisConfig, ReinforceSample, VirtualGrid, NULL_SCORE_FRACTION,
    NULL_VCRE_MAX,
};
use crate::ransac::{
    alignment_problem, generate_hypotheses, refine, soft_inlier_count, soft_inlier_vjp,
    Hypothesis, RansacConfig,
};
use crate::streams::{substream, tags};
use crate::toy::backbone::{ImageParams, InitPerturbation, ToyBackbone};
use crate::toy::scene::{generate_scene, ideal_maps, SceneConfig, SceneView, SyntheticScene};

/// Adaptive-moment gradient descent settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Full training-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Correspondence sets drawn per scene per iteration (the expectation the
    /// score-function estimator averages over). At least 2 — the baseline
    /// needs company.
    pub samplings: usize,
    /// Size of each sampled correspondence set.
    pub set_size: usize,
    /// Dual-softmax temperature.
    pub temperature: f64,
    /// How correspondence sets are drawn from the joint distribution.
    pub sampling: SamplingMode,
    pub ransac: RansacConfig,
    pub optimizer: OptimizerConfig,
    /// Null anchor score as a fraction of the maximum attainable soft
    /// inlier count (`score = null_fraction * set_size`).
    pub null_fraction: f64,
    /// Loss charged to the null hypothesis, in pixels.
    pub vcre_max: f64,
    /// Scene subset schedule; `None` uses the stock ramp for the batch.
    pub curriculum: Option<CurriculumSchedule>,
    /// First iteration index to run (nonzero when resuming).
    pub start_iteration: usize,
    /// Snapshot the backbone every this many iterations (0 = final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            samplings: 20,
            set_size: 32,
            temperature: 0.1,
            sampling: SamplingMode::WithoutReplacement,
            ransac: RansacConfig::train(),
            optimizer: OptimizerConfig::default(),
            null_fraction: NULL_SCORE_FRACTION,
            vcre_max: NULL_VCRE_MAX,
            curriculum: None,
            start_iteration: 0,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samplings < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 samplings for the score-function baseline, got {}",
                self.samplings
            )));
        }
        if self.set_size < self.ransac.minimal_set_size {
            return Err(Error::Validation(format!(
                "set size {} cannot cover minimal sets of {}",
                self.set_size, self.ransac.minimal_set_size
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.null_fraction.is_finite() && 0.0 < self.null_fraction && self.null_fraction < 1.0)
        {
            return Err(Error::Validation(format!(
                "null score fraction must lie in (0, 1), got {}",
                self.null_fraction
            )));
        }
        if !(self.vcre_max.is_finite() && self.vcre_max > 0.0) {
            return Err(Error::Validation(format!(
                "null hypothesis loss must be positive, got {}",
                self.vcre_max
            )));
        }
        if self.start_iteration > self.iterations {
            return Err(Error::Validation(format!(
                "start iteration {} is past the final iteration {}",
                self.start_iteration, self.iterations
            )));
        }
        self.ransac.validate()?;
        self.optimizer.validate()
    }

    /// The null anchor used in every per-sampling expectation.
    pub fn null_config(&self) -> NullHypothesisConfig {
        NullHypothesisConfig {
            score: self.null_fraction * self.set_size as f64,
            vcre_max: self.vcre_max,
        }
    }
}

/// Gradient of one scene's loss with respect to everything the scene's two
/// images feed into the pipeline, still in *map* space (offsets, depths,
/// confidence logits, similarity entries). Mapping into raw parameter space
/// happens in [`accumulate_image_gradients`].
#[derive(Debug, Clone)]
pub struct SceneGradients {
    pub d_confidence_a: Vec<f64>,
    pub d_confidence_b: Vec<f64>,
    pub d_similarity: DMatrix<f64>,
    pub d_dustbin: f64,
    pub d_offsets_a: Vec<[f64; 2]>,
    pub d_offsets_b: Vec<[f64; 2]>,
    pub d_depths_a: Vec<f64>,
    pub d_depths_b: Vec<f64>,
}

impl SceneGradients {
    pub fn zeros(cells_a: usize, cells_b: usize) -> Self {
        SceneGradients {
            d_confidence_a: vec![0.0; cells_a],
            d_confidence_b: vec![0.0; cells_b],
            d_similarity: DMatrix::zeros(cells_a, cells_b),
            d_dustbin: 0.0,
            d_offsets_a: vec![[0.0, 0.0]; cells_a],
            d_offsets_b: vec![[0.0, 0.0]; cells_b],
            d_depths_a: vec![0.0; cells_a],
            d_depths_b: vec![0.0; cells_b],
        }
    }

    pub fn norm(&self) -> f64 {
        let mut s = self.d_dustbin * self.d_dustbin;
        s += self.d_confidence_a.iter().map(|v| v * v).sum::<f64>();
        s += self.d_confidence_b.iter().map(|v| v * v).sum::<f64>();
        s += self.d_similarity.iter().map(|v| v * v).sum::<f64>();
        s += self.d_depths_a.iter().map(|v| v * v).sum::<f64>();
        s += self.d_depths_b.iter().map(|v| v * v).sum::<f64>();
        s += self.d_offsets_a.iter().flatten().map(|v| v * v).sum::<f64>();
        s += self.d_offsets_b.iter().flatten().map(|v| v * v).sum::<f64>();
        s.sqrt()
    }
}

impl GradientVector for SceneGradients {
    fn zeros_like(&self) -> Self {
        SceneGradients::zeros(self.d_confidence_a.len(), self.d_confidence_b.len())
    }

    fn axpy(&mut self, alpha: f64, other: &Self) {
        for (x, y) in self.d_confidence_a.iter_mut().zip(&other.d_confidence_a) {
            *x += alpha * y;
        }
        for (x, y) in self.d_confidence_b.iter_mut().zip(&other.d_confidence_b) {
            *x += alpha * y;
        }
        for (x, y) in self.d_similarity.iter_mut().zip(other.d_similarity.iter()) {
            *x += alpha * y;
        }
        self.d_dustbin += alpha * other.d_dustbin;
        for (x, y) in self.d_offsets_a.iter_mut().zip(&other.d_offsets_a) {
            x[0] += alpha * y[0];
            x[1] += alpha * y[1];
        }
        for (x, y) in self.d_offsets_b.iter_mut().zip(&other.d_offsets_b) {
            x[0] += alpha * y[0];
            x[1] += alpha * y[1];
        }
        for (x, y) in self.d_depths_a.iter_mut().zip(&other.d_depths_a) {
            *x += alpha * y;
        }
        for (x, y) in self.d_depths_b.iter_mut().zip(&other.d_depths_b) {
            *x += alpha * y;
        }
    }

    fn scale(&mut self, alpha: f64) {
        for v in &mut self.d_confidence_a {
            *v *= alpha;
        }
        for v in &mut self.d_confidence_b {
            *v *= alpha;
        }
        for v in self.d_similarity.iter_mut() {
            *v *= alpha;
        }
        self.d_dustbin *= alpha;
        for v in &mut self.d_offsets_a {
            v[0] *= alpha;
            v[1] *= alpha;
        }
        for v in &mut self.d_offsets_b {
            v[0] *= alpha;
            v[1] *= alpha;
        }
        for v in &mut self.d_depths_a {
            *v *= alpha;
        }
        for v in &mut self.d_depths_b {
            *v *= alpha;
        }
    }
}

/// One successful sampling: the drawn set, its refined hypotheses, their
/// reprojection losses, and the expected-loss value with its local VJP.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub set: CorrespondenceSet,
    pub hypotheses: Vec<Hypothesis>,
    pub losses: Vec<f64>,
    pub expected_loss: f64,
    pub loss_gradients: ExpectedLossGradients,
}

/// All samplings of one scene at one iteration.
#[derive(Debug, Clone)]
pub struct SceneForward {
    pub samples: Vec<SampleForward>,
    /// Samplings that produced nothing (thin support, degenerate sets).
    pub failed_samplings: usize,
    /// Mean expected loss over successful samplings, or the null-hypothesis
    /// ceiling when every sampling failed.
    pub loss: f64,
}

/// Everything the backward pass needs about one scene evaluation.
#[derive(Debug)]
pub struct SceneEval {
    pub maps_a: KeypointMaps,
    pub maps_b: KeypointMaps,
    pub distribution: MatchDistribution,
    pub probability: CorrespondenceProbability,
    pub forward: SceneForward,
}

/// Evaluate one scene: forward the backbone's two images, build the joint
/// correspondence distribution, and run `samplings` independent
/// sample-solve-score passes.
///
/// `draw` keys the sampling substreams. The trainer passes its optimizer
/// step count, so identical parameters see identical draws: a zero learning
/// rate reproduces the same losses every iteration, while any actual step
/// refreshes the samples.
pub fn evaluate_scene(
    backbone: &ToyBackbone,
    scene: &SyntheticScene,
    scene_index: u64,
    draw: u64,
    cfg: &TrainConfig,
    grid: &VirtualGrid,
) -> Result<SceneEval> {
    let maps_a = backbone.forward(2 * scene_index as usize)?;
    let maps_b = backbone.forward(2 * scene_index as usize + 1)?;
    let k = &scene.intrinsics;
    let gt = scene.gt_relative();

    let sim = similarity_matrix(maps_a.descriptors(), maps_b.descriptors(), Some(backbone.dustbin))?;
    let distribution = match_distribution(&sim, cfg.temperature)?;
    let dist_a = keypoint_distribution(maps_a.confidence())?;
    let dist_b = keypoint_distribution(maps_b.confidence())?;
    let probability = correspondence_probability(&distribution, &dist_a, &dist_b)?;
    let null = cfg.null_config();

    let mut samples = Vec::with_capacity(cfg.samplings);
    let mut failed_samplings = 0;
    for q in 0..cfg.samplings {
        let sample_path = [tags::TRAIN_ITER, draw, scene_index, tags::SET_SAMPLE, q as u64];
        let mut rng = substream(cfg.seed, &sample_path);
        let set = match sample_correspondences(
            &probability,
            &maps_a,
            k,
            &maps_b,
            k,
            cfg.set_size,
            cfg.sampling,
            &mut rng,
        ) {
            Ok(set) => set,
            Err(Error::Support { .. }) | Err(Error::EmptyDistribution) => {
                failed_samplings += 1;
                continue;
            }
            Err(e) => return Err(e),
        };

        let hyp_path = [tags::TRAIN_ITER, draw, scene_index, q as u64];
        let raw = match generate_hypotheses(&set, &cfg.ransac, cfg.seed, &hyp_path) {
            Ok(h) => h,
            Err(Error::NoHypothesis) | Err(Error::InsufficientData { .. }) => {
                failed_samplings += 1;
                continue;
            }
            Err(e) => return Err(e),
        };

        let hypotheses: Vec<Hypothesis> =
            raw.iter().map(|h| refine(h, &set, &cfg.ransac)).collect();
        let mut losses = Vec::with_capacity(hypotheses.len());
        for h in &hypotheses {
            losses.push(vcre(&h.pose, &gt, k, grid)?.pixels);
        }
        let scores: Vec<f64> = hypotheses.iter().map(|h| h.score).collect();
        let (expected_loss, loss_gradients) =
            expected_set_loss_vjp(&scores, &losses, Some(&null))?;
        samples.push(SampleForward { set, hypotheses, losses, expected_loss, loss_gradients });
    }

    let loss = if samples.is_empty() {
        null.vcre_max
    } else {
        samples.iter().map(|s| s.expected_loss).sum::<f64>() / samples.len() as f64
    };

    Ok(SceneEval {
        maps_a,
        maps_b,
        distribution,
        probability,
        forward: SceneForward { samples, failed_samplings, loss },
    })
}

fn scatter_point_gradient(
    d_point: &Vector3<f64>,
    cell: usize,
    maps: &KeypointMaps,
    k: &Intrinsics,
    factor: f64,
    d_offsets: &mut [[f64; 2]],
    d_depths: &mut [f64],
) {
    let pixel = maps.pixel(cell);
    let z = maps.depth(cell);
    d_offsets[cell][0] += d_point.x * factor * z / k.fx;
    d_offsets[cell][1] += d_point.y * factor * z / k.fy;
    d_depths[cell] += d_point.x * (pixel.u - k.cx) / k.fx
        + d_point.y * (pixel.v - k.cy) / k.fy
        + d_point.z;
}

/// Pathwise gradient of one sample's expected loss, holding the sampling
/// structure fixed. Hypotheses whose alignment gradient is ill-conditioned
/// are skipped (their direct residual gradients are kept) and counted.
fn sample_pathwise(
    sample: &SampleForward,
    eval: &SceneEval,
    k: &Intrinsics,
    gt: &Pose,
    grid: &VirtualGrid,
    cfg: &TrainConfig,
    skipped: &mut usize,
) -> Result<SceneGradients> {
    let mut g = SceneGradients::zeros(eval.maps_a.cells(), eval.maps_b.cells());
    let set = &sample.set;
    let mut d_points_a = vec![Vector3::zeros(); set.len()];
    let mut d_points_b = vec![Vector3::zeros(); set.len()];

    for (h_idx, h) in sample.hypotheses.iter().enumerate() {
        let d_score = sample.loss_gradients.d_scores[h_idx];
        let d_loss = sample.loss_gradients.d_losses[h_idx];

        let vg = vcre_vjp(h.pose.rotation(), h.pose.translation(), gt, k, grid, d_loss)?;
        let sg = soft_inlier_vjp(&h.pose, set, cfg.ransac.inlier_threshold, cfg.ransac.beta, d_score);
        for i in 0..set.len() {
            d_points_a[i] += sg.d_points_a[i];
            d_points_b[i] += sg.d_points_b[i];
        }

        let d_rotation = vg.d_rotation + sg.d_rotation;
        let d_translation = vg.d_translation + sg.d_translation;
        let problem = alignment_problem(set, &h.solve_set)?;
        match kabsch_vjp(&problem, &d_rotation, &d_translation) {
            Ok(kg) => {
                for (slot, &set_idx) in h.solve_set.iter().enumerate() {
                    d_points_a[set_idx] += kg.d_source[slot];
                    d_points_b[set_idx] += kg.d_target[slot];
                }
            }
            Err(Error::IllConditionedGradient { .. }) => *skipped += 1,
            Err(e) => return Err(e),
        }
    }

    let factor = eval.maps_a.factor();
    for (i, corr) in set.items.iter().enumerate() {
        scatter_point_gradient(
            &d_points_a[i],
            corr.cell_a,
            &eval.maps_a,
            k,
            factor,
            &mut g.d_offsets_a,
            &mut g.d_depths_a,
        );
        scatter_point_gradient(
            &d_points_b[i],
            corr.cell_b,
            &eval.maps_b,
            k,
            factor,
            &mut g.d_offsets_b,
            &mut g.d_depths_b,
        );
    }
    Ok(g)
}

fn sample_log_prob(sample: &SampleForward, eval: &SceneEval) -> SceneGradients {
    let (rows, cols) = eval.probability.p.shape();
    let mut lg = LogProbGradients::zeros(rows, cols);
    for corr in &sample.set.items {
        accumulate_log_prob_gradient(
            &mut lg,
            &eval.distribution,
            &eval.probability,
            corr.cell_a,
            corr.cell_b,
            1.0,
        );
    }
    let mut g = SceneGradients::zeros(rows, cols);
    g.d_confidence_a = lg.d_confidence_a;
    g.d_confidence_b = lg.d_confidence_b;
    g.d_similarity = lg.d_similarity;
    g.d_dustbin = lg.d_dustbin;
    g
}

/// How many hypotheses had to skip their alignment gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipStats {
    pub ill_conditioned: usize,
}

/// Mean pathwise gradient over a scene's successful samplings — exactly the
/// gradient of [`replay_expected_loss`] over the frozen structure.
pub fn scene_pathwise_gradient(
    eval: &SceneEval,
    scene: &SyntheticScene,
    cfg: &TrainConfig,
    grid: &VirtualGrid,
) -> Result<(SceneGradients, SkipStats)> {
    if eval.forward.samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let gt = scene.gt_relative();
    let mut skipped = 0;
    let mut acc = SceneGradients::zeros(eval.maps_a.cells(), eval.maps_b.cells());
    for sample in &eval.forward.samples {
        let g = sample_pathwise(sample, eval, &scene.intrinsics, &gt, grid, cfg, &mut skipped)?;
        acc.axpy(1.0 / eval.forward.samples.len() as f64, &g);
    }
    Ok((acc, SkipStats { ill_conditioned: skipped }))
}

/// Full gradient of a scene's loss: score-function estimator with the mean
/// loss as baseline, plus the pathwise term, averaged over samplings.
pub fn scene_gradient(
    eval: &SceneEval,
    scene: &SyntheticScene,
    cfg: &TrainConfig,
    grid: &VirtualGrid,
) -> Result<(SceneGradients, SkipStats)> {
    if eval.forward.samples.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: eval.forward.samples.len() });
    }
    let gt = scene.gt_relative();
    let mut skipped = 0;
    let mut samples = Vec::with_capacity(eval.forward.samples.len());
    for sample in &eval.forward.samples {
        let pathwise =
            sample_pathwise(sample, eval, &scene.intrinsics, &gt, grid, cfg, &mut skipped)?;
        samples.push(ReinforceSample {
            loss: sample.expected_loss,
            log_prob_gradient: sample_log_prob(sample, eval),
            pathwise_gradient: pathwise,
        });
    }
    let g = reinforce_gradients(&samples)?;
    Ok((g, SkipStats { ill_conditioned: skipped }))
}

/// The sampling structure of one sampling, frozen for finite-difference
/// checks: which cell pairs were drawn and which support set each hypothesis
/// was finally solved from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenSample {
    pub cell_pairs: Vec<(usize, usize)>,
    pub solve_sets: Vec<Vec<usize>>,
}

impl FrozenSample {
    pub fn from_forward(sample: &SampleForward) -> Self {
        FrozenSample {
            cell_pairs: sample.set.items.iter().map(|c| (c.cell_a, c.cell_b)).collect(),
            solve_sets: sample.hypotheses.iter().map(|h| h.solve_set.clone()).collect(),
        }
    }
}

/// Recompute the mean expected loss over frozen samplings from (possibly
/// perturbed) maps: rebuild the 3D points of each frozen pair, re-solve every
/// hypothesis on its frozen support set, re-score, and re-average. Smooth in
/// the map values, which makes it the right target for central differences
/// against [`scene_pathwise_gradient`].
#[allow(clippy::too_many_arguments)]
pub fn replay_expected_loss(
    frozen: &[FrozenSample],
    maps_a: &KeypointMaps,
    maps_b: &KeypointMaps,
    k: &Intrinsics,
    gt: &Pose,
    grid: &VirtualGrid,
    cfg: &TrainConfig,
) -> Result<f64> {
    if frozen.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let null = cfg.null_config();
    let mut total = 0.0;
    for sample in frozen {
        let items: Vec<Correspondence> = sample
            .cell_pairs
            .iter()
            .map(|&(ca, cb)| Correspondence {
                cell_a: ca,
                cell_b: cb,
                point_a: maps_a.point3(ca, k),
                point_b: maps_b.point3(cb, k),
                probability: 1.0 / sample.cell_pairs.len() as f64,
            })
            .collect();
        let set = CorrespondenceSet { items };

        let mut scores = Vec::with_capacity(sample.solve_sets.len());
        let mut losses = Vec::with_capacity(sample.solve_sets.len());
        for solve_set in &sample.solve_sets {
            let problem = alignment_problem(&set, solve_set)?;
            let pose = kabsch(&problem)?;
            scores.push(soft_inlier_count(
                &pose,
                &set,
                cfg.ransac.inlier_threshold,
                cfg.ransac.beta,
            ));
            losses.push(vcre(&pose, gt, k, grid)?.pixels);
        }
        total += expected_set_loss(&scores, &losses, Some(&null))?;
    }
    Ok(total / frozen.len() as f64)
}

/// Parameter-space gradients for one image.
#[derive(Debug, Clone)]
pub struct ImageGradients {
    pub d_offset_logits: Vec<[f64; 2]>,
    pub d_log_depths: Vec<f64>,
    pub d_confidence: Vec<f64>,
    pub d_descriptors: Vec<f64>,
}

impl ImageGradients {
    pub fn zeros(cells: usize, dim: usize) -> Self {
        ImageGradients {
            d_offset_logits: vec![[0.0, 0.0]; cells],
            d_log_depths: vec![0.0; cells],
            d_confidence: vec![0.0; cells],
            d_descriptors: vec![0.0; cells * dim],
        }
    }
}

/// Chain map-space gradients for one image into raw parameter space:
/// `d logit = d offset · σ'`, `d log z = d z · z`, descriptors through the
/// normalization's tangent projector.
fn accumulate_image_gradients(
    out: &mut ImageGradients,
    maps: &KeypointMaps,
    raw: &ImageParams,
    dim: usize,
    d_offsets: &[[f64; 2]],
    d_depths: &[f64],
    d_confidence: &[f64],
    d_unit_descriptors: &[f64],
    weight: f64,
) {
    let cells = maps.cells();
    for cell in 0..cells {
        let off = maps.offset(cell);
        out.d_offset_logits[cell][0] += weight * d_offsets[cell][0] * off[0] * (1.0 - off[0]);
        out.d_offset_logits[cell][1] += weight * d_offsets[cell][1] * off[1] * (1.0 - off[1]);
        out.d_log_depths[cell] += weight * d_depths[cell] * maps.depth(cell);
        out.d_confidence[cell] += weight * d_confidence[cell];

        let raw_row = &raw.descriptors[cell * dim..(cell + 1) * dim];
        let unit_row = maps.descriptors().descriptor(cell);
        let d_unit_row = &d_unit_descriptors[cell * dim..(cell + 1) * dim];
        let norm = raw_row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = unit_row.iter().zip(d_unit_row).map(|(u, d)| u * d).sum();
        for j in 0..dim {
            out.d_descriptors[cell * dim + j] +=
                weight * (d_unit_row[j] - unit_row[j] * dot) / norm;
        }
    }
}

fn flatten_params(backbone: &ToyBackbone, out: &mut Vec<f64>) {
    out.clear();
    for img in &backbone.images {
        for l in &img.offset_logits {
            out.push(l[0]);
            out.push(l[1]);
        }
        out.extend_from_slice(&img.log_depths);
        out.extend_from_slice(&img.confidence);
        out.extend_from_slice(&img.descriptors);
    }
    out.push(backbone.dustbin);
}

fn unflatten_params(backbone: &mut ToyBackbone, data: &[f64]) {
    let mut it = data.iter();
    for img in &mut backbone.images {
        for l in &mut img.offset_logits {
            l[0] = *it.next().expect("layout fixed");
            l[1] = *it.next().expect("layout fixed");
        }
        for z in &mut img.log_depths {
            *z = *it.next().expect("layout fixed");
        }
        for c in &mut img.confidence {
            *c = *it.next().expect("layout fixed");
        }
        for d in &mut img.descriptors {
            *d = *it.next().expect("layout fixed");
        }
    }
    backbone.dustbin = *it.next().expect("layout fixed");
    debug_assert!(it.next().is_none());
}

fn flatten_gradients(per_image: &[ImageGradients], d_dustbin: f64, out: &mut Vec<f64>) {
    out.clear();
    for img in per_image {
        for l in &img.d_offset_logits {
            out.push(l[0]);
            out.push(l[1]);
        }
        out.extend_from_slice(&img.d_log_depths);
        out.extend_from_slice(&img.d_confidence);
        out.extend_from_slice(&img.d_descriptors);
    }
    out.push(d_dustbin);
}

struct Adam {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, cfg: &OptimizerConfig, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Expected loss of every scene (before the step).
    pub scene_losses: Vec<f64>,
    /// Scenes the curriculum picked this iteration, ascending.
    pub selected: Vec<usize>,
    /// Mean expected loss over the selected scenes.
    pub selected_mean_loss: f64,
    pub gradient_norm: f64,
    pub skipped_hypotheses: usize,
    pub failed_samplings: usize,
}

/// A parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub backbone: ToyBackbone,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<IterationRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Build the stock training problem: `scene_count` scenes drawn from `seed`
/// under [`SceneConfig::default`], plus a backbone initialized from their
/// noise-free ground-truth maps and kicked by [`InitPerturbation::default`].
///
/// Both the `train` command and the end-to-end learning check go through
/// here, so they see byte-identical scenes and initial parameters.
pub fn default_toy_run(seed: u64, scene_count: usize) -> Result<(Vec<SyntheticScene>, ToyBackbone)> {
    toy_run(&SceneConfig::default(), seed, scene_count)
}

/// [`default_toy_run`] with an explicit scene recipe.
pub fn toy_run(
    config: &SceneConfig,
    seed: u64,
    scene_count: usize,
) -> Result<(Vec<SyntheticScene>, ToyBackbone)> {
    let mut scenes = Vec::with_capacity(scene_count);
    for s in 0..scene_count {
        scenes.push(generate_scene(&config, &mut substream(seed, &[tags::SCENE, s as u64]))?);
    }
    let mut maps = Vec::with_capacity(2 * scene_count);
    for (s, scene) in scenes.iter().enumerate() {
        for (v, view) in [SceneView::A, SceneView::B].into_iter().enumerate() {
            let mut rng = substream(seed, &[tags::INIT, s as u64, v as u64]);
            maps.push(ideal_maps(scene, view, &mut rng)?);
        }
    }
    let mut backbone = ToyBackbone::from_maps(&maps, 1.0)?;
    backbone.perturb(&InitPerturbation::default(), &mut substream(seed, &[tags::INIT]))?;
    Ok((scenes, backbone))
}

fn check_compatible(backbone: &ToyBackbone, scenes: &[SyntheticScene]) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if backbone.image_count() != 2 * scenes.len() {
        return Err(Error::Shape(format!(
            "backbone holds {} images, {} scenes need {}",
            backbone.image_count(),
            scenes.len(),
            2 * scenes.len()
        )));
    }
    for (idx, scene) in scenes.iter().enumerate() {
        if scene.config.grid_width != backbone.width()
            || scene.config.grid_height != backbone.height()
            || scene.config.descriptor_dim != backbone.descriptor_dim()
        {
            return Err(Error::Shape(format!(
                "scene {idx} grid {}x{} (dim {}) disagrees with backbone {}x{} (dim {})",
                scene.config.grid_width,
                scene.config.grid_height,
                scene.config.descriptor_dim,
                backbone.width(),
                backbone.height(),
                backbone.descriptor_dim()
            )));
        }
    }
    Ok(())
}

/// Evaluate all scenes at one iteration, in parallel, reduced in scene order.
fn evaluate_all(
    backbone: &ToyBackbone,
    scenes: &[SyntheticScene],
    draw: u64,
    cfg: &TrainConfig,
    grid: &VirtualGrid,
) -> Result<Vec<SceneEval>> {
    let results: Vec<Result<SceneEval>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenes
            .iter()
            .enumerate()
            .map(|(s, scene)| {
                scope.spawn(move || evaluate_scene(backbone, scene, s as u64, draw, cfg, grid))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scene evaluation panicked")).collect()
    });
    results.into_iter().collect()
}

/// Run the training loop, mutating `backbone` in place.
///
/// Scene `s` reads images `2s` and `2s + 1`. Every iteration evaluates all
/// scenes, records their losses, selects the curriculum subset, and steps
/// along the mean gradient of the selected scenes. Divergence aborts with
/// [`Error::NonFinite`] naming the iteration.
pub fn train(
    backbone: &mut ToyBackbone,
    scenes: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    check_compatible(backbone, scenes)?;
    let grid = benchmark_virtual_grid();
    let schedule = match &cfg.curriculum {
        Some(custom) => custom.clone(),
        None => CurriculumSchedule::for_batch(scenes.len()),
    };
    schedule.validate(scenes.len())?;
    let dim = backbone.descriptor_dim();
    let cells = backbone.cells();

    let mut params = Vec::with_capacity(backbone.parameter_count());
    flatten_params(backbone, &mut params);
    let mut adam = Adam::new(params.len());
    let mut flat_grads = Vec::with_capacity(params.len());
    let mut history = TrainingHistory::default();

    for iteration in cfg.start_iteration..cfg.iterations {
        let evals = evaluate_all(backbone, scenes, adam.t, cfg, &grid)?;
        let scene_losses: Vec<f64> = evals.iter().map(|e| e.forward.loss).collect();
        if scene_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!(
                "scene losses at iteration {iteration}: {scene_losses:?}"
            )));
        }

        let selected = curriculum_select(&scene_losses, iteration as u64, &schedule)?;
        let selected_mean_loss =
            selected.iter().map(|&s| scene_losses[s]).sum::<f64>() / selected.len() as f64;

        let mut per_image: Vec<ImageGradients> =
            (0..backbone.image_count()).map(|_| ImageGradients::zeros(cells, dim)).collect();
        let mut d_dustbin = 0.0;
        let mut skipped_hypotheses = 0;
        let weight = 1.0 / selected.len() as f64;
        for &s in &selected {
            let eval = &evals[s];
            if eval.forward.samples.len() < 2 {
                continue;
            }
            let (g, skips) = scene_gradient(eval, &scenes[s], cfg, &grid)?;
            skipped_hypotheses += skips.ill_conditioned;

            let (d_desc_a, d_desc_b) = similarity_vjp(
                &g.d_similarity,
                eval.maps_a.descriptors(),
                eval.maps_b.descriptors(),
            );
            accumulate_image_gradients(
                &mut per_image[2 * s],
                &eval.maps_a,
                &backbone.images[2 * s],
                dim,
                &g.d_offsets_a,
                &g.d_depths_a,
                &g.d_confidence_a,
                &d_desc_a,
                weight,
            );
            accumulate_image_gradients(
                &mut per_image[2 * s + 1],
                &eval.maps_b,
                &backbone.images[2 * s + 1],
                dim,
                &g.d_offsets_b,
                &g.d_depths_b,
                &g.d_confidence_b,
                &d_desc_b,
                weight,
            );
            d_dustbin += weight * g.d_dustbin;
        }

        flatten_gradients(&per_image, d_dustbin, &mut flat_grads);
        let gradient_norm = flat_grads.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !gradient_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at iteration {iteration}")));
        }

        let failed_samplings = evals.iter().map(|e| e.forward.failed_samplings).sum();
        history.records.push(IterationRecord {
            iteration,
            scene_losses,
            selected,
            selected_mean_loss,
            gradient_norm,
            skipped_hypotheses,
            failed_samplings,
        });

        if cfg.optimizer.learning_rate > 0.0 {
            adam.step(&cfg.optimizer, &mut params, &flat_grads);
            unflatten_params(backbone, &params);
        }

        let last = iteration + 1 == cfg.iterations;
        let due = cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0;
        if last || due {
            history.checkpoints.push(Checkpoint { iteration, backbone: backbone.clone() });
        }
    }

    Ok(history)
}
