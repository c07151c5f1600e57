//! Data model for hyperspectral cubes: a dense (nx × ny × nbands) block of
//! signal values with a uniform wavenumber axis. Storage is pixel-major so
//! the spectrum of one pixel is contiguous.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform spectral axis, `value(i) = start + i*step`. The step may be
/// negative: instruments sweeping from high to low wavenumbers produce
/// descending axes, and all analysis code must accept them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavenumberAxis {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl WavenumberAxis {
    pub fn new(start: f64, step: f64, count: usize) -> Result<Self> {
        if !start.is_finite() || !step.is_finite() {
            return Err(Error::Parameter("wavenumber axis must be finite".into()));
        }
        if step == 0.0 {
            return Err(Error::Parameter("wavenumber step must be nonzero".into()));
        }
        if count < 2 {
            return Err(Error::Parameter(format!(
                "wavenumber axis needs at least 2 points, got {count}"
            )));
        }
        Ok(Self { start, step, count })
    }

    pub fn value(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }

    /// Axis range as (low, high), independent of sweep direction.
    pub fn range(&self) -> (f64, f64) {
        let last = self.value(self.count - 1);
        if self.step > 0.0 {
            (self.start, last)
        } else {
            (last, self.start)
        }
    }
}

/// Dense hyperspectral cube. `values[p*nbands + j]` is the signal at flat
/// pixel `p` and band `j`; all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    nx: usize,
    ny: usize,
    axis: WavenumberAxis,
    values: Vec<f64>,
}

impl HyperCube {
    pub fn new(nx: usize, ny: usize, axis: WavenumberAxis, values: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Parameter(format!(
                "pixel counts must be positive, got {nx}x{ny}"
            )));
        }
        let expected = nx * ny * axis.count;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "cube payload has {} values, dims {}x{}x{} require {}",
                values.len(),
                nx,
                ny,
                axis.count,
                expected
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "cube value at flat index {i} is not finite"
            )));
        }
        Ok(Self { nx, ny, axis, values })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nbands(&self) -> usize {
        self.axis.count
    }

    pub fn n_pixels(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_voxels(&self) -> usize {
        self.n_pixels() * self.nbands()
    }

    pub fn axis(&self) -> &WavenumberAxis {
        &self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Signal at flat pixel `p`, band `j`.
    pub fn value(&self, p: usize, j: usize) -> f64 {
        self.values[p * self.nbands() + j]
    }

    /// Spectrum at pixel (x, y) as a contiguous slice of `nbands` values.
    pub fn spectrum(&self, x: usize, y: usize) -> Result<&[f64]> {
        if x >= self.nx || y >= self.ny {
            return Err(Error::Index(format!(
                "pixel ({x}, {y}) outside {}x{} grid",
                self.nx, self.ny
            )));
        }
        let p = pixel_index(x, y, self.nx);
        Ok(self.pixel_spectrum(p))
    }

    /// Spectrum at flat pixel index `p`. Panics if `p` is out of range.
    pub fn pixel_spectrum(&self, p: usize) -> &[f64] {
        let nb = self.nbands();
        &self.values[p * nb..(p + 1) * nb]
    }

    /// Single-band spatial image.
    pub fn band_image(&self, j: usize) -> Result<Image2D> {
        if j >= self.nbands() {
            return Err(Error::Index(format!(
                "band {j} outside 0..{}",
                self.nbands()
            )));
        }
        let values = (0..self.n_pixels()).map(|p| self.value(p, j)).collect();
        Image2D::new(self.nx, self.ny, values)
    }
}

/// Flat pixel index for column `x`, row `y` on a grid `nx` pixels wide.
/// Row-major: `p = y*nx + x`. Callers must keep `x < nx` and `y < ny`.
pub fn pixel_index(x: usize, y: usize, nx: usize) -> usize {
    y * nx + x
}

/// Inverse of [`pixel_index`]: `(x, y)` for a flat pixel index.
pub fn pixel_coords(p: usize, nx: usize) -> (usize, usize) {
    (p % nx, p / nx)
}

/// Cube as an (n_pixels × nbands) matrix, row p holding the spectrum of
/// flat pixel p.
pub fn flatten(cube: &HyperCube) -> Array2<f64> {
    Array2::from_shape_vec((cube.n_pixels(), cube.nbands()), cube.values.clone())
        .expect("cube payload length is validated at construction")
}

/// Inverse of [`flatten`].
pub fn unflatten(matrix: &Array2<f64>, nx: usize, ny: usize, axis: WavenumberAxis) -> Result<HyperCube> {
    let (rows, cols) = matrix.dim();
    if rows != nx * ny || cols != axis.count {
        return Err(Error::Shape(format!(
            "matrix {rows}x{cols} does not match cube dims {nx}x{ny}x{}",
            axis.count
        )));
    }
    let values = matrix.iter().copied().collect();
    HyperCube::new(nx, ny, axis, values)
}

/// Dense 2D image (band slices, cluster maps, abundance maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl Image2D {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::Shape(format!(
                "image payload has {} values, dims {}x{} require {}",
                values.len(),
                nx,
                ny,
                nx * ny
            )));
        }
        Ok(Self { nx, ny, values })
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[pixel_index(x, y, self.nx)]
    }
}
