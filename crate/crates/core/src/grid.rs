use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square grid of linear attenuation values (1/cm), centered on the origin.
///
/// Pixel `(row, col)` has its center at
/// `x = (col + 0.5) * h - fov / 2`, `y = fov / 2 - (row + 0.5) * h`,
/// so row 0 is the top of the image and `+y` points up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub n_pixels: usize,
    pub field_of_view: f64,
    pub data: Vec<f64>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl ImageGrid {
    pub fn zeros(n_pixels: usize, field_of_view: f64) -> Result<Self> {
        if n_pixels == 0 {
            return Err(Error::config("n_pixels", "must be positive"));
        }
        if !(field_of_view > 0.0 && field_of_view.is_finite()) {
            return Err(Error::config("field_of_view", "must be positive and finite"));
        }
        Ok(ImageGrid {
            n_pixels,
            field_of_view,
            data: vec![0.0; n_pixels * n_pixels],
            provenance: Vec::new(),
        })
    }

    pub fn from_data(n_pixels: usize, field_of_view: f64, data: Vec<f64>) -> Result<Self> {
        let mut grid = Self::zeros(n_pixels, field_of_view)?;
        if data.len() != n_pixels * n_pixels {
            return Err(Error::Domain(format!(
                "image payload has {} values, expected {}",
                data.len(),
                n_pixels * n_pixels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image contains non-finite values".into()));
        }
        grid.data = data;
        Ok(grid)
    }

    #[inline]
    pub fn pixel_size(&self) -> f64 {
        self.field_of_view / self.n_pixels as f64
    }

    #[inline]
    pub fn x_of_col(&self, col: usize) -> f64 {
        (col as f64 + 0.5) * self.pixel_size() - 0.5 * self.field_of_view
    }

    #[inline]
    pub fn y_of_row(&self, row: usize) -> f64 {
        0.5 * self.field_of_view - (row as f64 + 0.5) * self.pixel_size()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_pixels + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.n_pixels + col] = value;
    }

    /// Bilinear sample at physical coordinates; zero outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let h = self.pixel_size();
        let u = (x + 0.5 * self.field_of_view) / h - 0.5;
        let v = (0.5 * self.field_of_view - y) / h - 0.5;
        bilinear(&self.data, self.n_pixels, v, u, 0.0)
    }

    /// Resamples onto a new centered grid by bilinear interpolation at the
    /// new pixel centers.
    pub fn resample(&self, n_pixels: usize, field_of_view: f64) -> Result<ImageGrid> {
        let mut out = ImageGrid::zeros(n_pixels, field_of_view)?;
        for row in 0..n_pixels {
            let y = out.y_of_row(row);
            for col in 0..n_pixels {
                let x = out.x_of_col(col);
                out.data[row * n_pixels + col] = self.sample(x, y);
            }
        }
        out.provenance = self.provenance.clone();
        out.provenance
            .push(format!("resample(n={n_pixels}, fov={field_of_view})"));
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> ImageGrid {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Mean over the `kernel x kernel` box around each pixel, counting only
    /// pixels inside the grid.
    pub fn box_mean(&self, kernel: usize) -> Vec<f64> {
        let n = self.n_pixels;
        let half = kernel / 2;
        // Summed-area table with a zero border row and column.
        let w = n + 1;
        let mut sat = vec![0.0; w * w];
        for r in 0..n {
            let mut row_sum = 0.0;
            for c in 0..n {
                row_sum += self.data[r * n + c];
                sat[(r + 1) * w + c + 1] = sat[r * w + c + 1] + row_sum;
            }
        }
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(n));
            for c in 0..n {
                let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(n));
                let sum = sat[r1 * w + c1] - sat[r0 * w + c1] - sat[r1 * w + c0] + sat[r0 * w + c0];
                out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
        out
    }
}

/// Bilinear interpolation on a row-major `n x n` array at fractional
/// `(row, col)` index coordinates, returning `fill` contributions outside.
pub fn bilinear<T>(data: &[T], n: usize, row: f64, col: f64, fill: T) -> T
where
    T: Copy + Into<f64> + FromF64,
{
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let r0 = r0 as isize;
    let c0 = c0 as isize;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            fill.into()
        } else {
            data[r as usize * n + c as usize].into()
        }
    };
    let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1) * fc;
    let bottom = at(r0 + 1, c0) * (1.0 - fc) + at(r0 + 1, c0 + 1) * fc;
    T::from_f64(top * (1.0 - fr) + bottom * fr)
}

pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}
