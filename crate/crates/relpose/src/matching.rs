//! Probabilistic correspondence model.
//!
//! Descriptor similarities feed a dual softmax: a forward softmax over each
//! row and a backward softmax over each column, both at temperature
//! `theta`, both with a single learnable dustbin logit appended (an extra
//! column for the forward pass, an extra row for the backward pass) and
//! removed again after normalization. The elementwise product of both
//! factors is the mutual-match probability `M`. Combining `M` with the two
//! per-image keypoint distributions (spatial softmax over confidence
//! logits) gives the joint probability that a cell pair is a valid
//! correspondence:
//!
//! ```text
//! P(i, j) = P_A(i) * P_fwd(j | i) * P_B(j) * P_bwd(i | j)
//! ```
//!
//! Correspondence sets are drawn from `P` categorically, by default without
//! replacement. Sampling is the one non-differentiable stage of the
//! pipeline; [`LogProbGradients`] accumulates the score-function gradient
//! `d log P / d (confidences, similarities, dustbin)` that a REINFORCE-style
//! estimator needs instead.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraPoint3D, Intrinsics};
use crate::maps::{ConfidenceGrid, DescriptorGrid, KeypointMaps};

/// Probability floor below which an entry of `P` is treated as unsampleable
/// (its log would underflow to -inf and the score-function gradient would
/// be meaningless).
pub const MIN_SAMPLEABLE_PROB: f64 = 1e-30;

/// Dense descriptor similarity with an optional shared dustbin logit.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: DMatrix<f64>,
    pub dustbin: Option<f64>,
}

/// Cosine similarities between all descriptor pairs: `values[(i, j)] =
/// <a_i, b_j>`. Descriptors are unit norm, so entries lie in `[-1, 1]`.
pub fn similarity_matrix(
    a: &DescriptorGrid,
    b: &DescriptorGrid,
    dustbin: Option<f64>,
) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "descriptor dims disagree: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if let Some(d) = dustbin {
        if !d.is_finite() {
            return Err(Error::NonFinite("dustbin logit".into()));
        }
    }
    let dim = a.dim();
    let mut values = DMatrix::zeros(a.cells(), b.cells());
    for i in 0..a.cells() {
        let da = a.descriptor(i);
        for j in 0..b.cells() {
            let db = b.descriptor(j);
            let mut dot = 0.0;
            for k in 0..dim {
                dot += da[k] * db[k];
            }
            values[(i, j)] = dot;
        }
    }
    Ok(SimilarityMatrix { values, dustbin })
}

/// Forward and backward match distributions plus their product.
///
/// `forward[(i, j)]` is the probability that cell `i` of image A matches
/// cell `j` of image B; each row sums to one together with
/// `forward_dustbin[i]`. `backward` is the transposed-role analogue over
/// columns. `mutual = forward .* backward`.
#[derive(Debug, Clone)]
pub struct MatchDistribution {
    pub forward: DMatrix<f64>,
    pub forward_dustbin: Vec<f64>,
    pub backward: DMatrix<f64>,
    pub backward_dustbin: Vec<f64>,
    pub mutual: DMatrix<f64>,
    pub temperature: f64,
}

/// Dual softmax of the similarity matrix at temperature `theta`.
pub fn match_distribution(sim: &SimilarityMatrix, theta: f64) -> Result<MatchDistribution> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {theta}")));
    }
    let (rows, cols) = sim.values.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("similarity matrix has no entries".into()));
    }
    let mut forward = DMatrix::zeros(rows, cols);
    let mut forward_dustbin = vec![0.0; rows];
    let mut backward = DMatrix::zeros(rows, cols);
    let mut backward_dustbin = vec![0.0; cols];

    // Forward: softmax over each row, dustbin appended as one extra column.
    for i in 0..rows {
        let mut hi = sim.dustbin.unwrap_or(f64::NEG_INFINITY);
        for j in 0..cols {
            hi = hi.max(sim.values[(i, j)]);
        }
        let mut total = 0.0;
        for j in 0..cols {
            let e = ((sim.values[(i, j)] - hi) / theta).exp();
            forward[(i, j)] = e;
            total += e;
        }
        let dust = sim.dustbin.map(|d| ((d - hi) / theta).exp()).unwrap_or(0.0);
        total += dust;
        for j in 0..cols {
            forward[(i, j)] /= total;
        }
        forward_dustbin[i] = dust / total;
    }

    // Backward: softmax over each column, dustbin appended as an extra row.
    for j in 0..cols {
        let mut hi = sim.dustbin.unwrap_or(f64::NEG_INFINITY);
        for i in 0..rows {
            hi = hi.max(sim.values[(i, j)]);
        }
        let mut total = 0.0;
        for i in 0..rows {
            let e = ((sim.values[(i, j)] - hi) / theta).exp();
            backward[(i, j)] = e;
            total += e;
        }
        let dust = sim.dustbin.map(|d| ((d - hi) / theta).exp()).unwrap_or(0.0);
        total += dust;
        for i in 0..rows {
            backward[(i, j)] /= total;
        }
        backward_dustbin[j] = dust / total;
    }

    let mutual = forward.component_mul(&backward);
    Ok(MatchDistribution { forward, forward_dustbin, backward, backward_dustbin, mutual, temperature: theta })
}

/// Spatial softmax over confidence logits: where keypoints are in an image.
#[derive(Debug, Clone)]
pub struct KeypointDistribution {
    pub probs: Vec<f64>,
}

pub fn keypoint_distribution(conf: &ConfidenceGrid) -> Result<KeypointDistribution> {
    let logits = conf.logits();
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - hi).exp()).collect();
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyDistribution);
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(KeypointDistribution { probs })
}

/// Joint correspondence probability together with the factors the gradient
/// bookkeeping needs.
#[derive(Debug, Clone)]
pub struct CorrespondenceProbability {
    /// `P(i, j)`, the product of all four factors. Not normalized: the
    /// total mass is at most 1 and strictly below when a dustbin absorbs
    /// probability.
    pub p: DMatrix<f64>,
    pub mutual: DMatrix<f64>,
    pub keypoint_a: Vec<f64>,
    pub keypoint_b: Vec<f64>,
}

pub fn correspondence_probability(
    dist: &MatchDistribution,
    a: &KeypointDistribution,
    b: &KeypointDistribution,
) -> Result<CorrespondenceProbability> {
    let (rows, cols) = dist.mutual.shape();
    if a.probs.len() != rows || b.probs.len() != cols {
        return Err(Error::Shape(format!(
            "keypoint distributions ({}, {}) disagree with match matrix {}x{}",
            a.probs.len(),
            b.probs.len(),
            rows,
            cols
        )));
    }
    let mut p = dist.mutual.clone();
    for i in 0..rows {
        for j in 0..cols {
            p[(i, j)] *= a.probs[i] * b.probs[j];
        }
    }
    Ok(CorrespondenceProbability {
        p,
        mutual: dist.mutual.clone(),
        keypoint_a: a.probs.clone(),
        keypoint_b: b.probs.clone(),
    })
}

/// One sampled correspondence: a cell pair with its backprojected 3D points
/// and the (unnormalized) probability it was drawn from.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub cell_a: usize,
    pub cell_b: usize,
    pub point_a: CameraPoint3D,
    pub point_b: CameraPoint3D,
    pub probability: f64,
}

/// An ordered sampled correspondence set.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub items: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    WithoutReplacement,
    WithReplacement,
}

/// Draw `count` correspondences from `P`.
///
/// Without replacement (the default mode) this uses exponential-race keys
/// (`ln(u) / p`, largest first), whose descending order is exactly the
/// sequential weighted draw-without-replacement process; in particular the
/// first element of the returned set is distributed as `P` normalized.
/// Entries below [`MIN_SAMPLEABLE_PROB`] are never drawn. The 3D points are
/// backprojected from each cell's stored offset and depth.
pub fn sample_correspondences(
    prob: &CorrespondenceProbability,
    maps_a: &KeypointMaps,
    k_a: &Intrinsics,
    maps_b: &KeypointMaps,
    k_b: &Intrinsics,
    count: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<CorrespondenceSet> {
    let (rows, cols) = prob.p.shape();
    if maps_a.cells() != rows || maps_b.cells() != cols {
        return Err(Error::Shape(format!(
            "probability matrix {rows}x{cols} disagrees with maps {}x{}",
            maps_a.cells(),
            maps_b.cells()
        )));
    }
    if count == 0 {
        return Err(Error::Domain("cannot sample an empty correspondence set".into()));
    }

    let mut flat = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            flat.push(prob.p[(i, j)]);
        }
    }
    let chosen = weighted_sample_indices(&flat, MIN_SAMPLEABLE_PROB, count, mode, rng)?;

    let items = chosen
        .into_iter()
        .map(|idx| {
            let (i, j) = (idx / cols, idx % cols);
            Correspondence {
                cell_a: i,
                cell_b: j,
                point_a: maps_a.point3(i, k_a),
                point_b: maps_b.point3(j, k_b),
                probability: prob.p[(i, j)],
            }
        })
        .collect();
    Ok(CorrespondenceSet { items })
}

/// Categorical sampling of `count` indices proportional to `weights`,
/// skipping entries below `floor`.
///
/// Without replacement: one exponential-race key `ln(u) / w` per entry
/// (a uniform is consumed for every entry, sampleable or not, so the
/// stream layout does not depend on the floor), sorted descending; the
/// resulting order equals sequential weighted draws, so the prefix of any
/// length is itself a valid without-replacement sample.
pub(crate) fn weighted_sample_indices(
    weights: &[f64],
    floor: f64,
    count: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let sampleable = weights.iter().filter(|w| **w >= floor).count();
    if sampleable == 0 {
        return Err(Error::EmptyDistribution);
    }
    match mode {
        SamplingMode::WithoutReplacement => {
            if sampleable < count {
                return Err(Error::Support { needed: count, available: sampleable });
            }
            let mut keys: Vec<(f64, usize)> = Vec::with_capacity(sampleable);
            for (idx, &w) in weights.iter().enumerate() {
                let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                if w >= floor {
                    keys.push((u.ln() / w, idx));
                }
            }
            keys.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("keys are finite").then(a.1.cmp(&b.1)));
            Ok(keys.into_iter().take(count).map(|(_, idx)| idx).collect())
        }
        SamplingMode::WithReplacement => {
            let mut cumulative: Vec<(f64, usize)> = Vec::with_capacity(sampleable);
            let mut acc = 0.0;
            for (idx, &w) in weights.iter().enumerate() {
                if w >= floor {
                    acc += w;
                    cumulative.push((acc, idx));
                }
            }
            let mut chosen = Vec::with_capacity(count);
            for _ in 0..count {
                let x = rng.gen::<f64>() * acc;
                let pos = cumulative.partition_point(|&(c, _)| c < x);
                chosen.push(cumulative[pos.min(cumulative.len() - 1)].1);
            }
            Ok(chosen)
        }
    }
}

/// Accumulated score-function gradients of `sum_k weight_k * log P(i_k, j_k)`
/// with respect to confidence logits, similarity entries, and the dustbin.
#[derive(Debug, Clone)]
pub struct LogProbGradients {
    pub d_confidence_a: Vec<f64>,
    pub d_confidence_b: Vec<f64>,
    pub d_similarity: DMatrix<f64>,
    pub d_dustbin: f64,
}

impl LogProbGradients {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LogProbGradients {
            d_confidence_a: vec![0.0; rows],
            d_confidence_b: vec![0.0; cols],
            d_similarity: DMatrix::zeros(rows, cols),
            d_dustbin: 0.0,
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.d_confidence_a {
            *v *= c;
        }
        for v in &mut self.d_confidence_b {
            *v *= c;
        }
        self.d_similarity.iter_mut().for_each(|v| *v *= c);
        self.d_dustbin *= c;
    }
}

/// Add `weight * d log P(cell_a, cell_b) / d (C_A, C_B, m, dustbin)`.
///
/// `log P` splits into the two keypoint softmaxes and the two conditional
/// match softmaxes; each contributes the usual `indicator - softmax`
/// gradient, divided by the temperature for the similarity-driven factors.
pub fn accumulate_log_prob_gradient(
    out: &mut LogProbGradients,
    dist: &MatchDistribution,
    prob: &CorrespondenceProbability,
    cell_a: usize,
    cell_b: usize,
    weight: f64,
) {
    let (rows, cols) = dist.forward.shape();
    let theta = dist.temperature;

    for k in 0..rows {
        let indicator = if k == cell_a { 1.0 } else { 0.0 };
        out.d_confidence_a[k] += weight * (indicator - prob.keypoint_a[k]);
    }
    for k in 0..cols {
        let indicator = if k == cell_b { 1.0 } else { 0.0 };
        out.d_confidence_b[k] += weight * (indicator - prob.keypoint_b[k]);
    }

    // log P_fwd(cell_b | cell_a): softmax over row cell_a plus dustbin.
    for k in 0..cols {
        let indicator = if k == cell_b { 1.0 } else { 0.0 };
        out.d_similarity[(cell_a, k)] += weight * (indicator - dist.forward[(cell_a, k)]) / theta;
    }
    out.d_dustbin += weight * (-dist.forward_dustbin[cell_a]) / theta;

    // log P_bwd(cell_a | cell_b): softmax over column cell_b plus dustbin.
    for k in 0..rows {
        let indicator = if k == cell_a { 1.0 } else { 0.0 };
        out.d_similarity[(k, cell_b)] += weight * (indicator - dist.backward[(k, cell_b)]) / theta;
    }
    out.d_dustbin += weight * (-dist.backward_dustbin[cell_b]) / theta;
}

/// Push a similarity gradient back to the unit descriptors:
/// `d a_i = sum_j g[(i, j)] b_j` and `d b_j = sum_i g[(i, j)] a_i`.
///
/// Returns flat gradients in descriptor layout (`cells * dim`). These are
/// with respect to the *normalized* descriptors; the normalization VJP
/// belongs to whoever owns the raw parameters.
pub fn similarity_vjp(
    d_similarity: &DMatrix<f64>,
    a: &DescriptorGrid,
    b: &DescriptorGrid,
) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = d_similarity.shape();
    let dim = a.dim();
    let mut d_a = vec![0.0; rows * dim];
    let mut d_b = vec![0.0; cols * dim];
    for i in 0..rows {
        let dai = &mut d_a[i * dim..(i + 1) * dim];
        for j in 0..cols {
            let g = d_similarity[(i, j)];
            if g == 0.0 {
                continue;
            }
            let bj = b.descriptor(j);
            for k in 0..dim {
                dai[k] += g * bj[k];
            }
        }
    }
    for j in 0..cols {
        let bj = &mut d_b[j * dim..(j + 1) * dim];
        for i in 0..rows {
            let g = d_similarity[(i, j)];
            if g == 0.0 {
                continue;
            }
            let ai = a.descriptor(i);
            for k in 0..dim {
                bj[k] += g * ai[k];
            }
        }
    }
    (d_a, d_b)
}
