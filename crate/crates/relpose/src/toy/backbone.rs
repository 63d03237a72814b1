//! A table of raw per-image parameters that stands in for a learned feature
//! extractor. Each image owns one entry per grid cell for offsets, depth,
//! confidence and a descriptor; a single dustbin logit is shared by all
//! images. The forward pass maps raw values onto the constrained
//! [`KeypointMaps`] domain:
//!
//! * offsets through a sigmoid (never leaves `(0, 1)`),
//! * depths through `exp` (always positive),
//! * confidence as-is (logits are unconstrained),
//! * descriptors through L2 normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::maps::{ConfidenceGrid, DescriptorGrid, KeypointMaps};

/// Offset logits recovered from existing maps are clamped to this magnitude;
/// sigmoid(8) ≈ 0.99966, so anything closer to the cell border than that
/// round-trips with a small snap inward.
pub const OFFSET_LOGIT_LIMIT: f64 = 8.0;

/// Raw parameters for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageParams {
    pub offset_logits: Vec<[f64; 2]>,
    pub log_depths: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Pre-normalization descriptor rows, `cells * dim`.
    pub descriptors: Vec<f64>,
}

impl ImageParams {
    pub fn zeros(cells: usize, dim: usize) -> Self {
        ImageParams {
            offset_logits: vec![[0.0, 0.0]; cells],
            log_depths: vec![0.0; cells],
            confidence: vec![0.0; cells],
            descriptors: vec![0.0; cells * dim],
        }
    }

    pub fn parameter_count(&self, dim: usize) -> usize {
        let cells = self.log_depths.len();
        cells * (2 + 1 + 1 + dim)
    }
}

/// The learnable stand-in extractor: one parameter table per image plus the
/// shared dustbin logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    width: usize,
    height: usize,
    factor: f64,
    descriptor_dim: usize,
    pub images: Vec<ImageParams>,
    pub dustbin: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ToyBackbone {
    /// Invert existing maps into raw parameters, so that [`forward`]
    /// reproduces them (up to the offset clamp noted on
    /// [`OFFSET_LOGIT_LIMIT`]).
    ///
    /// All maps must share grid dimensions and descriptor dim.
    ///
    /// [`forward`]: ToyBackbone::forward
    pub fn from_maps(maps: &[KeypointMaps], dustbin: f64) -> Result<Self> {
        let first = maps.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
        let (width, height, factor) = (first.width(), first.height(), first.factor());
        let dim = first.descriptors().dim();
        if !dustbin.is_finite() {
            return Err(Error::NonFinite("dustbin logit".into()));
        }

        let mut images = Vec::with_capacity(maps.len());
        for (idx, m) in maps.iter().enumerate() {
            if m.width() != width
                || m.height() != height
                || m.factor() != factor
                || m.descriptors().dim() != dim
            {
                return Err(Error::Shape(format!(
                    "map {idx} has shape {}x{} (factor {}, dim {}), expected {width}x{height} (factor {factor}, dim {dim})",
                    m.width(),
                    m.height(),
                    m.factor(),
                    m.descriptors().dim()
                )));
            }
            let lo = sigmoid(-OFFSET_LOGIT_LIMIT);
            let hi = sigmoid(OFFSET_LOGIT_LIMIT);
            let offset_logits = m
                .offsets()
                .iter()
                .map(|o| [logit(o[0].clamp(lo, hi)), logit(o[1].clamp(lo, hi))])
                .collect();
            images.push(ImageParams {
                offset_logits,
                log_depths: m.depths().iter().map(|z| z.ln()).collect(),
                confidence: m.confidence().logits().to_vec(),
                descriptors: m.descriptors().data().to_vec(),
            });
        }
        Ok(ToyBackbone { width, height, factor, descriptor_dim: dim, images, dustbin })
    }

    /// Assemble a backbone from raw parameter vectors, validating shapes.
    /// This is how deserialized checkpoints come back to life.
    pub fn from_parts(
        width: usize,
        height: usize,
        factor: f64,
        descriptor_dim: usize,
        images: Vec<ImageParams>,
        dustbin: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || descriptor_dim == 0 {
            return Err(Error::Shape(format!(
                "degenerate backbone shape {width}x{height}, descriptor dim {descriptor_dim}"
            )));
        }
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Domain(format!("grid factor must be positive, got {factor}")));
        }
        if !dustbin.is_finite() {
            return Err(Error::NonFinite("dustbin logit".into()));
        }
        let cells = width * height;
        for (idx, img) in images.iter().enumerate() {
            if img.offset_logits.len() != cells
                || img.log_depths.len() != cells
                || img.confidence.len() != cells
                || img.descriptors.len() != cells * descriptor_dim
            {
                return Err(Error::Shape(format!(
                    "image {idx} holds {} offsets / {} depths / {} confidences / {} descriptor \
                     entries, expected {cells} cells at dim {descriptor_dim}",
                    img.offset_logits.len(),
                    img.log_depths.len(),
                    img.confidence.len(),
                    img.descriptors.len()
                )));
            }
        }
        Ok(ToyBackbone { width, height, factor, descriptor_dim, images, dustbin })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// Total learnable scalars, dustbin included.
    pub fn parameter_count(&self) -> usize {
        1 + self
            .images
            .iter()
            .map(|img| img.parameter_count(self.descriptor_dim))
            .sum::<usize>()
    }

    /// Produce the maps for one image from its current parameters.
    pub fn forward(&self, image: usize) -> Result<KeypointMaps> {
        let params = self.images.get(image).ok_or_else(|| {
            Error::Domain(format!("image {image} out of range, have {}", self.images.len()))
        })?;
        let offsets: Vec<[f64; 2]> =
            params.offset_logits.iter().map(|l| [sigmoid(l[0]), sigmoid(l[1])]).collect();
        let depths: Vec<f64> = params.log_depths.iter().map(|z| z.exp()).collect();
        KeypointMaps::new(
            self.width,
            self.height,
            self.factor,
            offsets,
            depths,
            ConfidenceGrid::new(params.confidence.clone())?,
            DescriptorGrid::from_unnormalized(params.descriptors.clone(), self.descriptor_dim)?,
        )
    }
}

/// How far a ground-truth-initialized backbone gets kicked before training.
///
/// Depths receive a per-image multiplicative bias of magnitude
/// `exp(±depth_bias)` (fixed size, random sign — a systematic scale error
/// the optimizer has to walk back) plus per-cell log-space jitter. The other
/// heads get small zero-mean jitter. `descriptor_jitter` is the expected
/// *norm* of the noise added to each unit descriptor (the per-component
/// scale is divided by `sqrt(dim)`), so the matching degradation it causes
/// does not grow with descriptor width.
#[derive(Debug, Clone, PartialEq)]
pub struct InitPerturbation {
    pub depth_bias: f64,
    pub depth_jitter: f64,
    pub offset_jitter: f64,
    pub confidence_jitter: f64,
    pub descriptor_jitter: f64,
}

impl Default for InitPerturbation {
    fn default() -> Self {
        InitPerturbation {
            depth_bias: 0.08,
            depth_jitter: 0.015,
            offset_jitter: 0.2,
            confidence_jitter: 0.1,
            descriptor_jitter: 0.3,
        }
    }
}

impl InitPerturbation {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.depth_bias,
            self.depth_jitter,
            self.offset_jitter,
            self.confidence_jitter,
            self.descriptor_jitter,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(format!("perturbation scales must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

impl ToyBackbone {
    /// Apply [`InitPerturbation`] in place.
    pub fn perturb(&mut self, p: &InitPerturbation, rng: &mut ChaCha8Rng) -> Result<()> {
        p.validate()?;
        let unit = Normal::new(0.0, 1.0).expect("unit normal is well-formed");
        for img in &mut self.images {
            let bias = if rng.gen::<bool>() { p.depth_bias } else { -p.depth_bias };
            for z in &mut img.log_depths {
                *z += bias + p.depth_jitter * unit.sample(rng);
            }
            for l in &mut img.offset_logits {
                l[0] += p.offset_jitter * unit.sample(rng);
                l[1] += p.offset_jitter * unit.sample(rng);
            }
            for c in &mut img.confidence {
                *c += p.confidence_jitter * unit.sample(rng);
            }
            let per_component = p.descriptor_jitter / (self.descriptor_dim as f64).sqrt();
            for d in &mut img.descriptors {
                *d += per_component * unit.sample(rng);
            }
        }
        Ok(())
    }
}
