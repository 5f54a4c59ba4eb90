//! Running mean/variance observation normalizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub clip: f64,
    /// Leading entries (image pixels in [0, 1]) that are only centered by the
    /// running mean and then multiplied by `pixel_scale`. Standardizing pixels
    /// per entry blows up the ones that were constant so far as soon as they
    /// change.
    pub fixed: usize,
    pub pixel_scale: f64,
}

const EPS: f64 = 1e-8;

impl RunningNorm {
    pub fn new(dim: usize, clip: f64, fixed: usize, pixel_scale: f64) -> Self {
        Self { count: 0.0, mean: Array1::zeros(dim), var: Array1::ones(dim), clip, fixed: fixed.min(dim), pixel_scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges the statistics of a batch (one sample per row).
    pub fn update(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.dim() {
            return Err(Error::Shape(format!("batch has {} columns, normalizer {}", batch.ncols(), self.dim())));
        }
        let n = batch.nrows() as f64;
        if n == 0.0 {
            return Ok(());
        }
        let bmean = batch.mean_axis(Axis(0)).unwrap();
        let bvar = batch.var_axis(Axis(0), 0.0);
        if self.count == 0.0 {
            self.mean = bmean;
            self.var = bvar;
            self.count = n;
            return Ok(());
        }
        let total = self.count + n;
        let delta = &bmean - &self.mean;
        let m2 = &self.var * self.count + &bvar * n + &delta * &delta * (self.count * n / total);
        self.mean = &self.mean + &delta * (n / total);
        self.var = m2 / total;
        self.count = total;
        Ok(())
    }

    pub fn normalize(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        if batch.ncols() != self.dim() {
            return Err(Error::Shape(format!("batch has {} columns, normalizer {}", batch.ncols(), self.dim())));
        }
        let shift = &self.mean;
        let mut scale = self.var.mapv(|v| 1.0 / (v + EPS).sqrt());
        scale.slice_mut(ndarray::s![..self.fixed]).fill(self.pixel_scale);
        let mut out = &batch - shift;
        out *= &scale;
        let c = self.clip;
        out.mapv_inplace(|v| v.clamp(-c, c));
        Ok(out)
    }
}
