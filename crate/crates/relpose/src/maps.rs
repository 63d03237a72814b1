//! Per-image keypoint maps on the coarse cell grid.
//!
//! One image is described by four grids with one entry per cell: a sub-pixel
//! offset in `[0, 1]^2`, a metric depth, a confidence logit, and a unit-norm
//! descriptor. [`KeypointMaps`] bundles them with the grid shape and the
//! downsampling factor that converts cells to pixels.

use crate::error::{Error, Result};
use crate::geometry::{backproject, grid_to_pixel, CameraPoint3D, GridCell, Intrinsics, PixelPoint};

/// Confidence logits, one per cell. Values are unnormalized; the spatial
/// softmax lives in [`crate::matching::keypoint_distribution`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceGrid {
    logits: Vec<f64>,
}

impl ConfidenceGrid {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Shape("confidence grid is empty".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("confidence logits".into()));
        }
        Ok(ConfidenceGrid { logits })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Unit-norm descriptors, one per cell, stored row-major as `cells * dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    data: Vec<f64>,
    dim: usize,
    cells: usize,
}

impl DescriptorGrid {
    /// Wrap already-normalized descriptors; verifies unit norm to 1e-9.
    pub fn from_unit(data: Vec<f64>, dim: usize) -> Result<Self> {
        let grid = Self::from_unnormalized(data, dim)?;
        Ok(grid)
    }

    /// Normalize each row to unit L2 norm. Zero rows are rejected.
    pub fn from_unnormalized(mut data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "descriptor data of length {} does not tile into vectors of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descriptors".into()));
        }
        let cells = data.len() / dim;
        for c in 0..cells {
            let row = &mut data[c * dim..(c + 1) * dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 0.0 {
                return Err(Error::Domain(format!("descriptor {c} has zero norm")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(DescriptorGrid { data, dim, cells })
    }

    pub fn descriptor(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Everything the matcher and solver need to know about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointMaps {
    width: usize,
    height: usize,
    factor: f64,
    offsets: Vec<[f64; 2]>,
    depths: Vec<f64>,
    confidence: ConfidenceGrid,
    descriptors: DescriptorGrid,
}

impl KeypointMaps {
    pub fn new(
        width: usize,
        height: usize,
        factor: f64,
        offsets: Vec<[f64; 2]>,
        depths: Vec<f64>,
        confidence: ConfidenceGrid,
        descriptors: DescriptorGrid,
    ) -> Result<Self> {
        let cells = width * height;
        if cells == 0 {
            return Err(Error::Shape("grid has zero cells".into()));
        }
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Domain(format!("grid factor must be positive, got {factor}")));
        }
        if offsets.len() != cells
            || depths.len() != cells
            || confidence.len() != cells
            || descriptors.cells() != cells
        {
            return Err(Error::Shape(format!(
                "map sizes disagree with {width}x{height} grid: {} offsets, {} depths, {} confidences, {} descriptors",
                offsets.len(),
                depths.len(),
                confidence.len(),
                descriptors.cells()
            )));
        }
        for (idx, o) in offsets.iter().enumerate() {
            if o.iter().any(|v| !(0.0..=1.0).contains(v) || !v.is_finite()) {
                return Err(Error::Domain(format!("offset {o:?} at cell {idx} outside [0, 1]^2")));
            }
        }
        for (idx, z) in depths.iter().enumerate() {
            if !(z.is_finite() && *z > 0.0) {
                return Err(Error::Domain(format!("depth {z} at cell {idx} must be positive")));
            }
        }
        Ok(KeypointMaps { width, height, factor, offsets, depths, confidence, descriptors })
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

    /// Flat index of cell `(i, j)`: row-major, `j * width + i`.
    pub fn index(&self, cell: GridCell) -> usize {
        cell.j * self.width + cell.i
    }

    pub fn cell(&self, index: usize) -> GridCell {
        GridCell { i: index % self.width, j: index / self.width }
    }

    pub fn offset(&self, index: usize) -> [f64; 2] {
        self.offsets[index]
    }

    pub fn depth(&self, index: usize) -> f64 {
        self.depths[index]
    }

    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn confidence(&self) -> &ConfidenceGrid {
        &self.confidence
    }

    pub fn descriptors(&self) -> &DescriptorGrid {
        &self.descriptors
    }

    /// Sub-pixel keypoint position of a cell.
    pub fn pixel(&self, index: usize) -> PixelPoint {
        grid_to_pixel(self.cell(index), self.offsets[index], self.factor)
            .expect("stored offsets are validated")
    }

    /// Backprojected 3D point of a cell under intrinsics `k`.
    pub fn point3(&self, index: usize, k: &Intrinsics) -> CameraPoint3D {
        backproject(k, self.pixel(index), self.depths[index])
            .expect("stored depths are validated")
    }
}
