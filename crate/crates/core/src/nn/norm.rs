use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Layout;
use crate::scalar::Scalar;

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub dim: usize,
    pub eps: f64,
    gain: usize,
    shift: usize,
}

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

impl LayerNorm {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        let gain = layout.add(format!("{name}.weight"), &[dim]);
        let shift = layout.add(format!("{name}.bias"), &[dim]);
        Self {
            dim,
            eps: 1e-5,
            gain,
            shift,
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut [T]) {
        p[self.gain..self.gain + self.dim].fill(T::one());
        p[self.shift..self.shift + self.dim].fill(T::zero());
    }

    fn gain<'a, T: Scalar>(&self, p: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&p[self.gain..self.gain + self.dim])
    }

    fn shift<'a, T: Scalar>(&self, p: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&p[self.shift..self.shift + self.dim])
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        assert_eq!(x.ncols(), self.dim, "layer norm width");
        let n = T::lit(self.dim as f64);
        let eps = T::lit(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *is = T::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gain(p) + self.shift(p);
        (y, LayerNormCache { xhat, inv_std })
    }

    /// Accumulates gain/shift gradients into `g` and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &LayerNormCache<T>,
        dy: ArrayView2<T>,
    ) -> Array2<T> {
        let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dshift = dy.sum_axis(Axis(0));
        for (gi, d) in g[self.gain..self.gain + self.dim].iter_mut().zip(dgain) {
            *gi += d;
        }
        for (gi, d) in g[self.shift..self.shift + self.dim].iter_mut().zip(dshift) {
            *gi += d;
        }
        self.backward_input(p, cache, dy)
    }

    /// Input gradient only, for frozen parameters.
    pub fn backward_input<T: Scalar>(&self, p: &[T], cache: &LayerNormCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let n = T::lit(self.dim as f64);
        let mut dxhat = &dy * &self.gain(p);
        for ((mut row, xh), &is) in dxhat
            .axis_iter_mut(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
            row.zip_mut_with(&xh, |d, &h| *d = (*d - mean_d - h * mean_dx) * is);
        }
        dxhat
    }
}
