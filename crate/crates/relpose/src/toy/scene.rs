//! Synthetic two-view scenes with known geometry.
//!
//! A scene is a cloud of 3D points observed by two cameras. Every point owns
//! exactly one grid cell in each view (the assignment is bijective), so the
//! ground-truth correspondence between the views is known cell-by-cell.
//! Rendering a view produces [`KeypointMaps`] — the same structure a learned
//! extractor would emit — optionally perturbed by depth noise and by a fixed
//! fraction of deliberately corrupted cells.

use std::collections::HashSet;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{backproject, grid_to_pixel, project, GridCell, Intrinsics, Pose};
use crate::maps::{ConfidenceGrid, DescriptorGrid, KeypointMaps};
use crate::matching::{Correspondence, CorrespondenceSet};

/// Confidence logit written into cells that carry a scene point.
pub const FILLED_CELL_LOGIT: f64 = 2.0;
/// Confidence logit written into cells with no scene point behind them.
pub const EMPTY_CELL_LOGIT: f64 = -2.0;
/// Corrupted cells displace their depth by at least this much (meters).
pub const OUTLIER_DEPTH_MIN: f64 = 0.5;
/// ... and by at most this much.
pub const OUTLIER_DEPTH_MAX: f64 = 2.0;
/// Rendered depths are floored here so the maps stay constructible even when
/// noise or corruption would push a depth through zero.
pub const MIN_RENDER_DEPTH: f64 = 0.05;

/// Everything that shapes a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Grid cells along the image width.
    pub grid_width: usize,
    /// Grid cells along the image height.
    pub grid_height: usize,
    /// Pixels per grid cell.
    pub grid_factor: f64,
    /// Shared focal length (pixels); the principal point sits at the image
    /// center.
    pub focal: f64,
    /// Number of scene points. Each occupies one cell per view.
    pub points: usize,
    /// Depth interval (meters) points are drawn from, in the first view.
    pub depth_range: (f64, f64),
    /// Relative rotation angle interval (radians); the axis is uniform on
    /// the sphere.
    pub rotation_angle_range: (f64, f64),
    /// Per-component translation intervals (meters).
    pub translation_ranges: [(f64, f64); 3],
    /// Standard deviation of the additive depth noise applied at render
    /// time.
    pub noise_sigma: f64,
    /// Fraction of points whose rendered cells are corrupted. Exactly
    /// `floor(outlier_fraction * points)` cells per view are affected.
    pub outlier_fraction: f64,
    /// Descriptor dimensionality.
    pub descriptor_dim: usize,
    /// Placement attempts per point before the whole scene is redrawn.
    pub max_point_retries: usize,
    /// Scene redraws before generation gives up.
    pub max_scene_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid_width: 8,
            grid_height: 8,
            grid_factor: 14.0,
            focal: 100.0,
            points: 40,
            depth_range: (1.4, 3.2),
            rotation_angle_range: (0.0, 0.35),
            translation_ranges: [(-0.4, 0.4), (-0.25, 0.25), (-0.3, 0.3)],
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            descriptor_dim: 128,
            max_point_retries: 400,
            max_scene_retries: 256,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(Error::Validation("grid must have at least one cell per axis".into()));
        }
        if !(self.grid_factor.is_finite() && self.grid_factor > 0.0) {
            return Err(Error::Validation(format!(
                "grid factor must be positive, got {}",
                self.grid_factor
            )));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::Validation(format!("focal must be positive, got {}", self.focal)));
        }
        if self.points < 20 {
            return Err(Error::Validation(format!(
                "a scene needs at least 20 points, got {}",
                self.points
            )));
        }
        if self.points > self.grid_width * self.grid_height {
            return Err(Error::Validation(format!(
                "{} points cannot occupy distinct cells of a {}x{} grid",
                self.points, self.grid_width, self.grid_height
            )));
        }
        let (z0, z1) = self.depth_range;
        if !(z0.is_finite() && z1.is_finite() && z0 > 0.0 && z1 >= z0) {
            return Err(Error::Validation(format!("bad depth range ({z0}, {z1})")));
        }
        let (a0, a1) = self.rotation_angle_range;
        if !(a0.is_finite() && a1.is_finite() && a0 >= 0.0 && a1 >= a0) {
            return Err(Error::Validation(format!("bad rotation angle range ({a0}, {a1})")));
        }
        for (lo, hi) in self.translation_ranges {
            if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
                return Err(Error::Validation(format!("bad translation range ({lo}, {hi})")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Validation(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Validation(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::Validation("descriptor dim must be positive".into()));
        }
        if self.max_point_retries == 0 || self.max_scene_retries == 0 {
            return Err(Error::Validation("retry budgets must be positive".into()));
        }
        Ok(())
    }

    /// Intrinsics shared by both views: centered principal point, image
    /// dimensions matching the grid.
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let width = self.grid_width as f64 * self.grid_factor;
        let height = self.grid_height as f64 * self.grid_factor;
        Intrinsics::new(self.focal, self.focal, width / 2.0, height / 2.0, width, height)
    }

    fn cells(&self) -> usize {
        self.grid_width * self.grid_height
    }

    fn cell(&self, index: usize) -> GridCell {
        GridCell { i: index % self.grid_width, j: index / self.grid_width }
    }
}

/// One scene point and its observation in both views.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    /// Position in the world frame (which coincides with view A's frame).
    pub world: Vector3<f64>,
    /// Flat cell index in view A.
    pub cell_a: usize,
    /// Flat cell index in view B.
    pub cell_b: usize,
    pub offset_a: [f64; 2],
    pub offset_b: [f64; 2],
    pub depth_a: f64,
    pub depth_b: f64,
    /// Unit descriptor shared by both observations.
    pub descriptor: Vec<f64>,
    /// Marked points render with corrupted geometry in both views.
    pub outlier: bool,
}

/// A generated two-view scene with exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub intrinsics: Intrinsics,
    /// World-to-view transform of view A (always the identity here).
    pub camera_a: Pose,
    /// World-to-view transform of view B.
    pub camera_b: Pose,
    pub points: Vec<ScenePoint>,
}

impl SyntheticScene {
    /// The relative pose mapping view-A coordinates into view B.
    pub fn gt_relative(&self) -> Pose {
        self.camera_b.compose(&self.camera_a.inverse())
    }
}

/// Which of the two views to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneView {
    A,
    B,
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn random_pose(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Pose> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = uniform_in(rng, config.rotation_angle_range);
    let rotation: Matrix3<f64> = Rotation3::from_axis_angle(
        &Unit::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
        angle,
    )
    .into_inner();
    let translation = Vector3::new(
        uniform_in(rng, config.translation_ranges[0]),
        uniform_in(rng, config.translation_ranges[1]),
        uniform_in(rng, config.translation_ranges[2]),
    );
    Pose::new(rotation, translation)
}

fn random_unit_descriptor(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal is well-formed");
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return raw.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Generate a scene: draw a relative pose, then place points so that each
/// occupies a distinct cell in both views with positive depth.
///
/// Placement is rejection-sampled per point; if a point exhausts its budget
/// the whole scene is redrawn, and after `max_scene_retries` redraws
/// generation fails with [`Error::Generation`].
pub fn generate_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    config.validate()?;
    let k = config.intrinsics()?;
    let cells = config.cells();

    for _attempt in 0..config.max_scene_retries {
        let camera_b = random_pose(config, rng)?;
        let mut cell_order: Vec<usize> = (0..cells).collect();
        cell_order.shuffle(rng);

        let mut occupied_b: HashSet<usize> = HashSet::new();
        let mut points: Vec<ScenePoint> = Vec::with_capacity(config.points);

        'placement: for &cell_a in cell_order.iter().take(config.points) {
            for _retry in 0..config.max_point_retries {
                let offset_a = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
                let depth_a = uniform_in(rng, config.depth_range);
                let pixel_a = grid_to_pixel(config.cell(cell_a), offset_a, config.grid_factor)?;
                let world = backproject(&k, pixel_a, depth_a)?.to_vector();
                let in_b = camera_b.transform_vec(&world);
                if in_b.z < MIN_RENDER_DEPTH * 4.0 {
                    continue;
                }
                let pixel_b = project(&k, &crate::geometry::CameraPoint3D::from_vector(in_b))?;
                if !(pixel_b.u >= 0.0
                    && pixel_b.u < k.width
                    && pixel_b.v >= 0.0
                    && pixel_b.v < k.height)
                {
                    continue;
                }
                let bi = (pixel_b.u / config.grid_factor).floor() as usize;
                let bj = (pixel_b.v / config.grid_factor).floor() as usize;
                if bi >= config.grid_width || bj >= config.grid_height {
                    continue;
                }
                let cell_b = bj * config.grid_width + bi;
                if occupied_b.contains(&cell_b) {
                    continue;
                }
                occupied_b.insert(cell_b);
                let offset_b = [
                    pixel_b.u / config.grid_factor - bi as f64,
                    pixel_b.v / config.grid_factor - bj as f64,
                ];
                points.push(ScenePoint {
                    world,
                    cell_a,
                    cell_b,
                    offset_a,
                    offset_b,
                    depth_a,
                    depth_b: in_b.z,
                    descriptor: random_unit_descriptor(config.descriptor_dim, rng),
                    outlier: false,
                });
                continue 'placement;
            }
            break 'placement;
        }

        if points.len() < config.points {
            continue;
        }

        let marked = (config.outlier_fraction * config.points as f64).floor() as usize;
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(rng);
        for &idx in order.iter().take(marked) {
            points[idx].outlier = true;
        }

        return Ok(SyntheticScene {
            config: config.clone(),
            intrinsics: k,
            camera_a: Pose::identity(),
            camera_b,
            points,
        });
    }

    Err(Error::Generation(format!(
        "could not place {} points on a {}x{} grid within {} attempts",
        config.points, config.grid_width, config.grid_height, config.max_scene_retries
    )))
}

/// Render one view of a scene as keypoint maps.
///
/// Cells holding a point receive its true offset and depth (plus additive
/// depth noise of scale `noise_sigma`), confidence logit
/// [`FILLED_CELL_LOGIT`], and the point's descriptor. Cells marked as
/// outliers instead receive a uniformly re-drawn offset and a depth displaced
/// by `±U(0.5, 2.0)` meters — the descriptor stays truthful, so the pair
/// still matches while its geometry lies. Empty cells get a centered offset,
/// the mid-range depth, logit [`EMPTY_CELL_LOGIT`] and a random descriptor.
pub fn render_ground_truth_maps(
    scene: &SyntheticScene,
    view: SceneView,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointMaps> {
    render_cells(scene, view, rng, true, true)
}

/// Render a view with neither noise nor outlier corruption, regardless of
/// what the scene config says. Empty cells still draw random descriptors
/// from `rng`. This is the target a trainable extractor should converge to.
pub fn ideal_maps(
    scene: &SyntheticScene,
    view: SceneView,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointMaps> {
    render_cells(scene, view, rng, false, false)
}

fn render_cells(
    scene: &SyntheticScene,
    view: SceneView,
    rng: &mut ChaCha8Rng,
    apply_noise: bool,
    apply_corruption: bool,
) -> Result<KeypointMaps> {
    let config = &scene.config;
    let cells = config.cells();
    let dim = config.descriptor_dim;
    let mid_depth = 0.5 * (config.depth_range.0 + config.depth_range.1);
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::Validation(format!("depth noise: {e}")))?;

    let mut cell_to_point: Vec<Option<usize>> = vec![None; cells];
    for (idx, p) in scene.points.iter().enumerate() {
        let cell = match view {
            SceneView::A => p.cell_a,
            SceneView::B => p.cell_b,
        };
        cell_to_point[cell] = Some(idx);
    }

    let mut offsets = vec![[0.5, 0.5]; cells];
    let mut depths = vec![mid_depth; cells];
    let mut logits = vec![EMPTY_CELL_LOGIT; cells];
    let mut descriptors = vec![0.0; cells * dim];

    for cell in 0..cells {
        match cell_to_point[cell] {
            Some(idx) => {
                let p = &scene.points[idx];
                let (true_offset, true_depth) = match view {
                    SceneView::A => (p.offset_a, p.depth_a),
                    SceneView::B => (p.offset_b, p.depth_b),
                };
                let mut offset = true_offset;
                let noise_draw = noise.sample(rng);
                let mut depth = if apply_noise { true_depth + noise_draw } else { true_depth };
                if apply_corruption && p.outlier {
                    let magnitude = rng.gen_range(OUTLIER_DEPTH_MIN..OUTLIER_DEPTH_MAX);
                    let toward_camera: bool = rng.gen();
                    let moved = if toward_camera { depth - magnitude } else { depth + magnitude };
                    depth = if moved > MIN_RENDER_DEPTH { moved } else { depth + magnitude };
                    offset = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                }
                offsets[cell] = offset;
                depths[cell] = depth.max(MIN_RENDER_DEPTH);
                logits[cell] = FILLED_CELL_LOGIT;
                descriptors[cell * dim..(cell + 1) * dim].copy_from_slice(&p.descriptor);
            }
            None => {
                let d = random_unit_descriptor(dim, rng);
                descriptors[cell * dim..(cell + 1) * dim].copy_from_slice(&d);
            }
        }
    }

    KeypointMaps::new(
        config.grid_width,
        config.grid_height,
        config.grid_factor,
        offsets,
        depths,
        ConfidenceGrid::new(logits)?,
        DescriptorGrid::from_unit(descriptors, dim)?,
    )
}

/// The exact correspondence set of a scene: one pair per point, built from
/// the true offsets and depths, each with uniform probability `1/n`.
///
/// Outlier marks are ignored — they only affect rendering — so the set is
/// noise-free by construction and a rigid solver should recover
/// [`SyntheticScene::gt_relative`] from it to machine precision.
pub fn ground_truth_set(scene: &SyntheticScene) -> Result<CorrespondenceSet> {
    let config = &scene.config;
    let k = &scene.intrinsics;
    let n = scene.points.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut items = Vec::with_capacity(n);
    for p in &scene.points {
        let pixel_a = grid_to_pixel(config.cell(p.cell_a), p.offset_a, config.grid_factor)?;
        let pixel_b = grid_to_pixel(config.cell(p.cell_b), p.offset_b, config.grid_factor)?;
        items.push(Correspondence {
            cell_a: p.cell_a,
            cell_b: p.cell_b,
            point_a: backproject(k, pixel_a, p.depth_a)?,
            point_b: backproject(k, pixel_b, p.depth_b)?,
            probability: 1.0 / n as f64,
        });
    }
    Ok(CorrespondenceSet { items })
}

/// Pair two rendered views using the scene's true cell assignment: one
/// correspondence per point, with the 3D points backprojected from the
/// *rendered* maps (so noise and corruption carry through), each with
/// uniform probability `1/n`.
pub fn rendered_set(
    scene: &SyntheticScene,
    maps_a: &KeypointMaps,
    maps_b: &KeypointMaps,
) -> Result<CorrespondenceSet> {
    let n = scene.points.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let cells = scene.config.cells();
    if maps_a.cells() != cells || maps_b.cells() != cells {
        return Err(Error::Shape(format!(
            "rendered maps have {} and {} cells, scene grid has {cells}",
            maps_a.cells(),
            maps_b.cells()
        )));
    }
    let k = &scene.intrinsics;
    let items = scene
        .points
        .iter()
        .map(|p| Correspondence {
            cell_a: p.cell_a,
            cell_b: p.cell_b,
            point_a: maps_a.point3(p.cell_a, k),
            point_b: maps_b.point3(p.cell_b, k),
            probability: 1.0 / n as f64,
        })
        .collect();
    Ok(CorrespondenceSet { items })
}
