use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use super::{fill_uniform, Layout};
use crate::scalar::Scalar;

/// Affine map `y = x·Wᵀ + b` applied to each row of `x`; `W` is stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    w: usize,
    b: Option<usize>,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = layout.add(format!("{name}.weight"), &[out, inp]);
        let b = bias.then(|| layout.add(format!("{name}.bias"), &[out]));
        Self { inp, out, w, b }
    }

    pub fn weight<'a, T: Scalar>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.out, self.inp), &p[self.w..self.w + self.out * self.inp])
            .expect("weight slice")
    }

    pub fn weight_mut<'a, T: Scalar>(&self, p: &'a mut [T]) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape(
            (self.out, self.inp),
            &mut p[self.w..self.w + self.out * self.inp],
        )
        .expect("weight slice")
    }

    pub fn bias<'a, T: Scalar>(&self, p: &'a [T]) -> Option<ArrayView1<'a, T>> {
        self.b.map(|b| ArrayView1::from(&p[b..b + self.out]))
    }

    fn bias_mut<'a, T: Scalar>(&self, p: &'a mut [T]) -> Option<ArrayViewMut1<'a, T>> {
        self.b.map(move |b| ArrayViewMut1::from(&mut p[b..b + self.out]))
    }

    /// Uniform `±1/√fan_in` for weights and bias.
    pub fn init<T: Scalar, R: Rng>(&self, p: &mut [T], rng: &mut R) {
        let bound = 1.0 / (self.inp as f64).sqrt();
        fill_uniform(&mut p[self.w..self.w + self.out * self.inp], bound, rng);
        if let Some(b) = self.b {
            fill_uniform(&mut p[b..b + self.out], bound, rng);
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.inp, "linear input width");
        let mut y = x.dot(&self.weight(p).t());
        if let Some(b) = self.bias(p) {
            y += &b;
        }
        y
    }

    /// Input gradient only.
    pub fn backward_input<T: Scalar>(&self, p: &[T], dy: ArrayView2<T>) -> Array2<T> {
        dy.dot(&self.weight(p))
    }

    /// Accumulate parameter gradients into `g` (same layout as `p`).
    pub fn accumulate_grads<T: Scalar>(&self, g: &mut [T], x: ArrayView2<T>, dy: ArrayView2<T>) {
        general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut self.weight_mut(g));
        if let Some(mut gb) = self.bias_mut(g) {
            gb += &dy.sum_axis(Axis(0));
        }
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
    ) -> Array2<T> {
        self.accumulate_grads(g, x, dy);
        self.backward_input(p, dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, max_relative_error};
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn forward_by_hand() {
        let mut l = Layout::new();
        let lin = Linear::new(&mut l, "fc", 2, 1, true);
        let p = vec![2.0, -1.0, 0.5];
        let y = lin.forward(&p, array![[1.0, 3.0], [0.0, 1.0]].view());
        assert_eq!(y, array![[-0.5], [-0.5]]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut l = Layout::new();
        let lin = Linear::new(&mut l, "fc", 3, 2, true);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = vec![0.0f64; l.len()];
        lin.init(&mut p, &mut rng);
        let x = array![[0.3, -1.2, 0.5], [1.0, 0.2, -0.7]];
        // Loss: sum of squares of outputs.
        let loss = |q: &[f64]| lin.forward(q, x.view()).mapv(|v| v * v).sum();
        let y = lin.forward(&p, x.view());
        let dy = y.mapv(|v| 2.0 * v);
        let mut g = vec![0.0; l.len()];
        lin.backward(&p, &mut g, x.view(), dy.view());
        let fd = finite_difference(&p, 1e-6, loss);
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);
    }
}
