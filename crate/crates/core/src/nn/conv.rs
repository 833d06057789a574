//! Stride-2 convolutions with a 4×4 kernel and one pixel of zero padding, so each
//! stage halves (or, transposed, doubles) the spatial size exactly.
//!
//! Activations use a channel-major `(C, B, H, W)` layout so a whole batch is one GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2, Axis};
use rand::Rng;

use super::{fill_uniform, Layout};
use crate::scalar::Scalar;

pub const KERNEL: usize = 4;
const TAPS: usize = KERNEL * KERNEL;

/// Gather the 4×4 neighbourhoods of a `(C, B, H, W)` tensor into
/// `(C·16, B·(H/2)·(W/2))` columns.
pub fn im2col<T: Scalar>(big: ArrayView4<T>) -> Array2<T> {
    let (c, b, hh, ww) = big.dim();
    let (h, w) = (hh / 2, ww / 2);
    let big = big.as_standard_layout();
    let src = big.as_slice().expect("standard layout");
    let ncols = b * h * w;
    let mut cols = Array2::zeros((c * TAPS, ncols));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = &mut dst[((ci * KERNEL + ki) * KERNEL + kj) * ncols..][..ncols];
                for bi in 0..b {
                    let plane = &src[(ci * b + bi) * hh * ww..][..hh * ww];
                    for oi in 0..h {
                        let y = (2 * oi + ki) as isize - 1;
                        if y < 0 || y >= hh as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * ww..][..ww];
                        let dst_row = &mut row[(bi * h + oi) * w..][..w];
                        for (oj, d) in dst_row.iter_mut().enumerate() {
                            let x = (2 * oj + kj) as isize - 1;
                            if x >= 0 && x < ww as isize {
                                *d = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `(C, B, H, W)` tensor.
pub fn col2im<T: Scalar>(cols: ArrayView2<T>, c: usize, b: usize, hh: usize, ww: usize) -> Array4<T> {
    let (h, w) = (hh / 2, ww / 2);
    let ncols = b * h * w;
    assert_eq!(cols.dim(), (c * TAPS, ncols), "col2im shape");
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut big = Array4::zeros((c, b, hh, ww));
    let dst = big.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = &src[((ci * KERNEL + ki) * KERNEL + kj) * ncols..][..ncols];
                for bi in 0..b {
                    let plane = &mut dst[(ci * b + bi) * hh * ww..][..hh * ww];
                    for oi in 0..h {
                        let y = (2 * oi + ki) as isize - 1;
                        if y < 0 || y >= hh as isize {
                            continue;
                        }
                        let dst_row = &mut plane[y as usize * ww..][..ww];
                        let src_row = &row[(bi * h + oi) * w..][..w];
                        for (oj, &s) in src_row.iter().enumerate() {
                            let x = (2 * oj + kj) as isize - 1;
                            if x >= 0 && x < ww as isize {
                                dst_row[x as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    big
}

fn flat2<T: Scalar>(x: ArrayView4<T>) -> ArrayView2<T> {
    let (c, b, h, w) = x.dim();
    x.into_shape_with_order((c, b * h * w)).expect("contiguous activation")
}

/// Downsampling convolution `(Cin, B, H, W) → (Cout, B, H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), &[cout, cin, KERNEL, KERNEL]);
        let b = layout.add(format!("{name}.bias"), &[cout]);
        Self { cin, cout, w, b }
    }

    fn weight<'a, T: Scalar>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        let n = self.cout * self.cin * TAPS;
        ArrayView2::from_shape((self.cout, self.cin * TAPS), &p[self.w..self.w + n]).unwrap()
    }

    pub fn init<T: Scalar, R: Rng>(&self, p: &mut [T], rng: &mut R) {
        let bound = 1.0 / ((self.cin * TAPS) as f64).sqrt();
        fill_uniform(&mut p[self.w..self.w + self.cout * self.cin * TAPS], bound, rng);
        fill_uniform(&mut p[self.b..self.b + self.cout], bound, rng);
    }

    /// Returns the output and the column matrix needed by `backward`.
    pub fn forward<T: Scalar>(&self, p: &[T], x: ArrayView4<T>) -> (Array4<T>, Array2<T>) {
        let (c, b, hh, ww) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let cols = im2col(x);
        let mut y = self.weight(p).dot(&cols);
        let bias = &p[self.b..self.b + self.cout];
        for (mut row, &bb) in y.axis_iter_mut(Axis(0)).zip(bias) {
            row.mapv_inplace(|v| v + bb);
        }
        let y = y
            .into_shape_with_order((self.cout, b, hh / 2, ww / 2))
            .expect("conv output shape");
        (y, cols)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cols: ArrayView2<T>,
        dy: ArrayView4<T>,
        input_dims: (usize, usize, usize, usize),
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let dy2 = flat2(dy);
        {
            let n = self.cout * self.cin * TAPS;
            let mut gw = ArrayViewMut2::from_shape(
                (self.cout, self.cin * TAPS),
                &mut g[self.w..self.w + n],
            )
            .unwrap();
            general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut gw);
        }
        for (gb, row) in g[self.b..self.b + self.cout].iter_mut().zip(dy2.axis_iter(Axis(0))) {
            *gb += row.sum();
        }
        need_input_grad.then(|| {
            let dcols = self.weight(p).t().dot(&dy2);
            let (c, b, hh, ww) = input_dims;
            col2im(dcols.view(), c, b, hh, ww)
        })
    }
}

/// Upsampling transposed convolution `(Cin, B, H, W) → (Cout, B, 2H, 2W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    w: usize,
    b: usize,
}

impl ConvTranspose2d {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), &[cin, cout, KERNEL, KERNEL]);
        let b = layout.add(format!("{name}.bias"), &[cout]);
        Self { cin, cout, w, b }
    }

    fn weight<'a, T: Scalar>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        let n = self.cout * self.cin * TAPS;
        ArrayView2::from_shape((self.cin, self.cout * TAPS), &p[self.w..self.w + n]).unwrap()
    }

    pub fn init<T: Scalar, R: Rng>(&self, p: &mut [T], rng: &mut R) {
        let bound = 1.0 / ((self.cout * TAPS) as f64).sqrt();
        fill_uniform(&mut p[self.w..self.w + self.cout * self.cin * TAPS], bound, rng);
        fill_uniform(&mut p[self.b..self.b + self.cout], bound, rng);
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: ArrayView4<T>) -> Array4<T> {
        let (c, b, h, w) = x.dim();
        assert_eq!(c, self.cin, "transposed conv input channels");
        let x = x.as_standard_layout();
        let cols = self.weight(p).t().dot(&flat2(x.view()));
        let mut y = col2im(cols.view(), self.cout, b, 2 * h, 2 * w);
        let bias = &p[self.b..self.b + self.cout];
        for (mut plane, &bb) in y.axis_iter_mut(Axis(0)).zip(bias) {
            plane.mapv_inplace(|v| v + bb);
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        x: ArrayView4<T>,
        dy: ArrayView4<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let (c, b, h, w) = x.dim();
        let dcols = im2col(dy);
        let x = x.as_standard_layout();
        let x2 = flat2(x.view());
        {
            let n = self.cout * self.cin * TAPS;
            let mut gw = ArrayViewMut2::from_shape(
                (self.cin, self.cout * TAPS),
                &mut g[self.w..self.w + n],
            )
            .unwrap();
            general_mat_mul(T::one(), &x2, &dcols.t(), T::one(), &mut gw);
        }
        for (gb, plane) in g[self.b..self.b + self.cout].iter_mut().zip(dy.axis_iter(Axis(0))) {
            *gb += plane.sum();
        }
        need_input_grad.then(|| {
            self.weight(p)
                .dot(&dcols)
                .into_shape_with_order((c, b, h, w))
                .expect("input grad shape")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let mut v = vec![0.0; n];
        fill_uniform(&mut v, 1.0, &mut rng);
        Array4::from_shape_vec(dims, v).unwrap()
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = random4((2, 3, 6, 4), 1);
        let y = Array2::from_shape_fn((2 * TAPS, 3 * 3 * 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let lhs = (&im2col(x.view()) * &y).sum();
        let rhs = (&x * &col2im(y.view(), 2, 3, 6, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut l = Layout::new();
        let conv = Conv2d::new(&mut l, "c", 2, 3);
        let mut p = vec![0.0; l.len()];
        conv.init(&mut p, &mut ChaCha8Rng::seed_from_u64(2));
        let x = random4((2, 2, 8, 6), 3);
        let (y, _) = conv.forward(&p, x.view());
        assert_eq!(y.dim(), (3, 2, 4, 3));
        let w = conv.weight(&p);
        for co in 0..3 {
            for b in 0..2 {
                for oi in 0..4 {
                    for oj in 0..3 {
                        let mut acc = p[conv.b + co];
                        for ci in 0..2 {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let (yy, xx) = (2 * oi + ki, 2 * oj + kj);
                                    if (1..=8).contains(&yy) && (1..=6).contains(&xx) {
                                        acc += w[[co, ci * 16 + ki * 4 + kj]] * x[[ci, b, yy - 1, xx - 1]];
                                    }
                                }
                            }
                        }
                        assert!((acc - y[[co, b, oi, oj]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut l = Layout::new();
        let conv = Conv2d::new(&mut l, "c", 2, 2);
        let mut p = vec![0.0; l.len()];
        conv.init(&mut p, &mut ChaCha8Rng::seed_from_u64(4));
        let x = random4((2, 2, 4, 4), 5);
        let loss = |q: &[f64], x: &Array4<f64>| conv.forward(q, x.view()).0.mapv(|v| v * v).sum();
        let (y, cols) = conv.forward(&p, x.view());
        let dy = y.mapv(|v| 2.0 * v);
        let mut g = vec![0.0; l.len()];
        let dx = conv.backward(&p, &mut g, cols.view(), dy.view(), x.dim(), true).unwrap();
        let fd = finite_difference(&p, 1e-6, |q| loss(q, &x));
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);
        let flat_x: Vec<f64> = x.iter().cloned().collect();
        let fdx = finite_difference(&flat_x, 1e-6, |xs| {
            loss(&p, &Array4::from_shape_vec(x.dim(), xs.to_vec()).unwrap())
        });
        let dxv: Vec<f64> = dx.iter().cloned().collect();
        assert!(max_relative_error(&dxv, &fdx, 1e-8) < 1e-6);
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut l = Layout::new();
        let conv = ConvTranspose2d::new(&mut l, "t", 2, 3);
        let mut p = vec![0.0; l.len()];
        conv.init(&mut p, &mut ChaCha8Rng::seed_from_u64(6));
        let x = random4((2, 2, 2, 3), 7);
        let y = conv.forward(&p, x.view());
        assert_eq!(y.dim(), (3, 2, 4, 6));
        let loss = |q: &[f64], x: &Array4<f64>| conv.forward(q, x.view()).mapv(|v| v * v).sum();
        let dy = y.mapv(|v| 2.0 * v);
        let mut g = vec![0.0; l.len()];
        let dx = conv.backward(&p, &mut g, x.view(), dy.view(), true).unwrap();
        let fd = finite_difference(&p, 1e-6, |q| loss(q, &x));
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);
        let flat_x: Vec<f64> = x.iter().cloned().collect();
        let fdx = finite_difference(&flat_x, 1e-6, |xs| {
            loss(&p, &Array4::from_shape_vec(x.dim(), xs.to_vec()).unwrap())
        });
        let dxv: Vec<f64> = dx.iter().cloned().collect();
        assert!(max_relative_error(&dxv, &fdx, 1e-8) < 1e-6);
    }
}
