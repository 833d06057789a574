use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

/// Square 2D complex FFT built from row transforms and a transpose.
pub struct Fft2<T: Scalar> {
    n: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn transform(&self, plan: &Arc<dyn Fft<T>>, data: &mut Array2<Complex<T>>) {
        let n = self.n;
        assert_eq!(data.dim(), (n, n), "fft size mismatch");
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
        let mut owned = data.as_standard_layout().into_owned();
        {
            let buf = owned.as_slice_mut().expect("standard layout");
            plan.process_with_scratch(buf, &mut scratch);
        }
        let mut transposed = owned.reversed_axes().as_standard_layout().into_owned();
        {
            let buf = transposed.as_slice_mut().expect("standard layout");
            plan.process_with_scratch(buf, &mut scratch);
        }
        data.assign(&transposed.reversed_axes());
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, data: &mut Array2<Complex<T>>) {
        self.transform(&self.forward, data);
    }

    /// Inverse transform including the `1/n²` normalization, in place.
    pub fn inverse(&self, data: &mut Array2<Complex<T>>) {
        self.transform(&self.inverse, data);
        let scale = T::one() / T::from_usize(self.n * self.n).unwrap();
        data.mapv_inplace(|c| c * scale);
    }

    /// Real part of the inverse transform.
    pub fn inverse_real(&self, hat: &Array2<Complex<T>>) -> Array2<T> {
        let mut buf = hat.clone();
        self.inverse(&mut buf);
        buf.mapv(|c| c.re)
    }

    /// Largest imaginary magnitude left after an inverse transform.
    pub fn imaginary_residual(&self, hat: &Array2<Complex<T>>) -> f64 {
        let mut buf = hat.clone();
        self.inverse(&mut buf);
        buf.iter()
            .fold(0.0f64, |m, c| m.max(c.im.abs().to_f64_lossy()))
    }
}
