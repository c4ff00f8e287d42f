//! Cross- and self-attention maps: computation, slicing, and smoothing.
//!
//! Attention is `softmax(Q Kᵀ / √d)` computed row-wise with max subtraction.
//! A cross map is `n_q × n` (image queries attending to text tokens), a self
//! map is `n_q × n_q`. Queries flatten row-major over (y, x): the query for
//! grid cell (x, y) lives at flat index `y * w + x`. Slicing a map produces
//! an [`AttnGrid`] at the attention resolution.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum slack tolerated when validating softmax outputs.
pub const ROW_SUM_TOL: f64 = 1e-5;

/// A single token's (or pixel's) attention reshaped onto the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrid {
    height: usize,
    width: usize,
    values: Array2<f64>,
}

impl AttnGrid {
    /// Wrap an `h × w` array of attention scores. Values must be finite and
    /// in [0, 1].
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid {
                what: "attention grid",
                reason: format!("value {bad} outside [0, 1]"),
            });
        }
        let (height, width) = values.dim();
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Score at grid cell (x, y).
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[[y, x]]
    }

    /// Row-major flattening, inverse of [`token_slice`]'s reshape.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Whether a sliced self-attention grid is the attention a pixel *pays*
/// (its row) or *receives* (its column).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Row of the pixel: how p attends to every location.
    #[default]
    Row,
    /// Column of the pixel: how every location attends to p.
    Column,
}

/// Row-stochastic image-to-token attention (`n_q × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnMap {
    values: Array2<f64>,
}

/// Row-stochastic image-to-image attention (`n_q × n_q`).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnMap {
    values: Array2<f64>,
}

fn validate_row_stochastic(values: &Array2<f64>, what: &'static str) -> Result<()> {
    for (i, row) in values.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid {
                    what,
                    reason: format!("row {i} holds value {v} outside [0, 1]"),
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid {
                what,
                reason: format!("row {i} sums to {sum}, not 1"),
            });
        }
    }
    Ok(())
}

impl CrossAttnMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        validate_row_stochastic(&values, "cross-attention map")?;
        Ok(Self { values })
    }

    /// Queries and keys straight through attention; `dim` is the softmax
    /// scaling constant d of the `1/√d` factor.
    pub fn from_qk(queries: ArrayView2<f64>, keys: ArrayView2<f64>, dim: usize) -> Result<Self> {
        Ok(Self {
            values: compute_attention(queries, keys, dim)?,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_tokens(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

impl SelfAttnMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::DimMismatch {
                axis: "self-attention columns",
                expected: values.nrows(),
                got: values.ncols(),
            });
        }
        validate_row_stochastic(&values, "self-attention map")?;
        Ok(Self { values })
    }

    pub fn from_qk(queries: ArrayView2<f64>, keys: ArrayView2<f64>, dim: usize) -> Result<Self> {
        let values = compute_attention(queries, keys, dim)?;
        Self::new(values)
    }

    pub fn n_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// `softmax(Q Kᵀ / √dim)` row-wise, with max subtraction for stability.
pub fn compute_attention(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    dim: usize,
) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::Invalid {
            what: "attention dim",
            reason: "scaling dimension must be >= 1".into(),
        });
    }
    if queries.ncols() != keys.ncols() {
        return Err(Error::DimMismatch {
            axis: "feature dimension (queries vs keys)",
            expected: queries.ncols(),
            got: keys.ncols(),
        });
    }
    if queries.iter().chain(keys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid {
            what: "attention inputs",
            reason: "NaN or infinite entry".into(),
        });
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut logits = queries.dot(&keys.t());
    logits.mapv_inplace(|v| v * scale);
    for mut row in logits.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(logits)
}

/// Column `token_index` of a cross map reshaped to `h × w`.
pub fn token_slice(
    map: &CrossAttnMap,
    token_index: usize,
    height: usize,
    width: usize,
) -> Result<AttnGrid> {
    if token_index >= map.n_tokens() {
        return Err(Error::IndexOutOfRange {
            what: "token",
            index: token_index,
            len: map.n_tokens(),
        });
    }
    if height * width != map.n_queries() {
        return Err(Error::DimMismatch {
            axis: "grid cells (h' * w' vs n_q)",
            expected: map.n_queries(),
            got: height * width,
        });
    }
    let col = map.values.column(token_index);
    let values = Array2::from_shape_fn((height, width), |(y, x)| col[y * width + x]);
    AttnGrid::new(values)
}

/// The attention slice of a self map at `pixel`, reshaped to `h × w`.
/// `Direction::Row` is the attention paid by the pixel; `Direction::Column`
/// is the attention it receives.
pub fn pixel_slice(
    map: &SelfAttnMap,
    pixel: (usize, usize),
    height: usize,
    width: usize,
    direction: Direction,
) -> Result<AttnGrid> {
    let (px, py) = pixel;
    if height * width != map.n_queries() {
        return Err(Error::DimMismatch {
            axis: "grid cells (h' * w' vs n_q)",
            expected: map.n_queries(),
            got: height * width,
        });
    }
    if px >= width || py >= height {
        return Err(Error::IndexOutOfRange {
            what: "pixel",
            index: py * width + px,
            len: height * width,
        });
    }
    let flat = py * width + px;
    let values = match direction {
        Direction::Row => {
            let row = map.values.row(flat);
            Array2::from_shape_fn((height, width), |(y, x)| row[y * width + x])
        }
        Direction::Column => {
            let col = map.values.column(flat);
            Array2::from_shape_fn((height, width), |(y, x)| col[y * width + x])
        }
    };
    AttnGrid::new(values)
}

/// Normalized 2-D Gaussian kernel of odd size `kernel_size`.
pub fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Result<Array2<f64>> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::Invalid {
            what: "smoothing kernel",
            reason: format!("kernel_size must be odd and >= 1, got {kernel_size}"),
        });
    }
    if sigma <= 0.0 {
        return Err(Error::Invalid {
            what: "smoothing kernel",
            reason: format!("sigma must be > 0, got {sigma}"),
        });
    }
    let c = (kernel_size / 2) as isize;
    let mut kernel = Array2::<f64>::zeros((kernel_size, kernel_size));
    for u in 0..kernel_size {
        for v in 0..kernel_size {
            let dy = u as isize - c;
            let dx = v as isize - c;
            kernel[[u, v]] = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.sum();
    kernel.mapv_inplace(|v| v / total);
    Ok(kernel)
}

/// Convolve a grid with a normalized Gaussian kernel under reflect padding.
/// `kernel_size == 1` is the identity.
pub fn gaussian_smooth(grid: &AttnGrid, kernel_size: usize, sigma: f64) -> Result<AttnGrid> {
    let kernel = gaussian_kernel(kernel_size, sigma)?;
    if kernel_size == 1 {
        return Ok(grid.clone());
    }
    let smoothed =
        crate::autodiff::smooth_values(grid.values(), &kernel).mapv(|v| v.clamp(0.0, 1.0));
    AttnGrid::new(smoothed)
}

/// Smoothing parameters shared by the losses and the guided sampler.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    /// Odd kernel width in grid cells; 1 disables smoothing.
    pub kernel_size: usize,
    pub sigma: f64,
    /// Whether self-attention slices are smoothed too.
    pub smooth_self: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            sigma: 0.5,
            smooth_self: true,
        }
    }
}

impl SmoothingConfig {
    pub fn kernel(&self) -> Result<Option<Array2<f64>>> {
        if self.kernel_size == 1 {
            Ok(None)
        } else {
            gaussian_kernel(self.kernel_size, self.sigma).map(Some)
        }
    }
}
