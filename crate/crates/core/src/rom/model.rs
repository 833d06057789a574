use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rand::Rng;

use crate::nn::{silu, silu_grad, Conv2d, ConvTranspose2d, Layout, Linear};
use crate::scalar::Scalar;

/// Convolutional encoder/decoder pair with Gaussian latent heads.
///
/// Encoder: stride-2 conv stages with SiLU, flatten, affine `μ` and `log σ²` heads.
/// Decoder: affine + SiLU, unflatten, stride-2 transposed convs (SiLU between, none at the end).
#[derive(Debug, Clone, PartialEq)]
pub struct RomNet {
    pub latent_dim: usize,
    pub input_shape: [usize; 3],
    pub layout: Layout,
    enc: Vec<Conv2d>,
    mu_head: Linear,
    logvar_head: Linear,
    dec_fc: Linear,
    dec: Vec<ConvTranspose2d>,
    /// `(channels, h, w)` at the bottleneck.
    bottleneck: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    cols: Vec<Array2<T>>,
    in_dims: Vec<(usize, usize, usize, usize)>,
    pre: Vec<Array4<T>>,
    flat: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    fc_in: Array2<T>,
    fc_pre: Array2<T>,
    inputs: Vec<Array4<T>>,
    pre: Vec<Array4<T>>,
}

fn silu_arr<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    a.mapv(silu)
}

/// `(C, B, h, w)` → `(B, C·h·w)`.
fn flatten<T: Scalar>(x: ArrayView4<T>) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c * h * w))
        .expect("flatten")
}

/// `(B, C·h·w)` → `(C, B, h, w)`.
fn unflatten<T: Scalar>(x: ArrayView2<T>, c: usize, h: usize, w: usize) -> Array4<T> {
    let b = x.nrows();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c, h, w))
        .expect("unflatten")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

impl RomNet {
    pub fn new(latent_dim: usize, channels: &[usize], input_shape: [usize; 3]) -> Self {
        let [h, w, c] = input_shape;
        let stages = channels.len();
        let mut layout = Layout::new();
        let mut enc = Vec::with_capacity(stages);
        let mut cin = c;
        for (i, &cout) in channels.iter().enumerate() {
            enc.push(Conv2d::new(&mut layout, &format!("enc.{i}"), cin, cout));
            cin = cout;
        }
        let bottleneck = (cin, h >> stages, w >> stages);
        let feat = bottleneck.0 * bottleneck.1 * bottleneck.2;
        let mu_head = Linear::new(&mut layout, "enc.mu", feat, latent_dim, true);
        let logvar_head = Linear::new(&mut layout, "enc.logvar", feat, latent_dim, true);
        let dec_fc = Linear::new(&mut layout, "dec.fc", latent_dim, feat, true);
        let mut dec = Vec::with_capacity(stages);
        for i in (0..stages).rev() {
            let cout = if i == 0 { c } else { channels[i - 1] };
            dec.push(ConvTranspose2d::new(&mut layout, &format!("dec.{}", stages - 1 - i), channels[i], cout));
        }
        Self {
            latent_dim,
            input_shape,
            layout,
            enc,
            mu_head,
            logvar_head,
            dec_fc,
            dec,
            bottleneck,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init<T: Scalar, R: Rng>(&self, p: &mut [T], rng: &mut R) {
        for c in &self.enc {
            c.init(p, rng);
        }
        self.mu_head.init(p, rng);
        self.logvar_head.init(p, rng);
        self.dec_fc.init(p, rng);
        for c in &self.dec {
            c.init(p, rng);
        }
    }

    /// `x` is `(C, B, H, W)`; returns `(μ, log σ²)`, each `(B, D)`.
    pub fn encode<T: Scalar>(&self, p: &[T], x: ArrayView4<T>) -> (Array2<T>, Array2<T>, EncoderCache<T>) {
        let mut cols = Vec::with_capacity(self.enc.len());
        let mut in_dims = Vec::with_capacity(self.enc.len());
        let mut pre = Vec::with_capacity(self.enc.len());
        let mut h = x.to_owned();
        for conv in &self.enc {
            in_dims.push(h.dim());
            let (a, col) = conv.forward(p, h.view());
            h = silu_arr(&a);
            cols.push(col);
            pre.push(a);
        }
        let flat = flatten(h.view());
        let mu = self.mu_head.forward(p, flat.view());
        let logvar = self.logvar_head.forward(p, flat.view());
        (mu, logvar, EncoderCache { cols, in_dims, pre, flat })
    }

    /// `z` is `(B, D)`; returns `(C, B, H, W)`.
    pub fn decode<T: Scalar>(&self, p: &[T], z: ArrayView2<T>) -> (Array4<T>, DecoderCache<T>) {
        let (c, h, w) = self.bottleneck;
        let fc_pre = self.dec_fc.forward(p, z);
        let mut x = unflatten(silu_arr(&fc_pre).view(), c, h, w);
        let mut inputs = Vec::with_capacity(self.dec.len());
        let mut pre = Vec::with_capacity(self.dec.len());
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            let a = conv.forward(p, x.view());
            inputs.push(std::mem::replace(&mut x, Array4::zeros((0, 0, 0, 0))));
            if i == last {
                x = a;
            } else {
                x = silu_arr(&a);
                pre.push(a);
            }
        }
        let cache = DecoderCache {
            fc_in: z.to_owned(),
            fc_pre,
            inputs,
            pre,
        };
        (x, cache)
    }

    /// Accumulates decoder gradients and returns `∂L/∂z`.
    pub fn backward_decoder<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &DecoderCache<T>,
        dout: ArrayView4<T>,
    ) -> Array2<T> {
        let mut d = dout.to_owned();
        for i in (0..self.dec.len()).rev() {
            if i < cache.pre.len() {
                Zip::from(&mut d).and(&cache.pre[i]).for_each(|d, &a| *d *= silu_grad(a));
            }
            d = self.dec[i]
                .backward(p, g, cache.inputs[i].view(), d.view(), true)
                .expect("input grad requested");
        }
        let mut dfc = flatten(d.view());
        Zip::from(&mut dfc).and(&cache.fc_pre).for_each(|d, &a| *d *= silu_grad(a));
        self.dec_fc.backward(p, g, cache.fc_in.view(), dfc.view())
    }

    /// Accumulates encoder gradients given `∂L/∂μ` and `∂L/∂log σ²`.
    pub fn backward_encoder<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &EncoderCache<T>,
        dmu: ArrayView2<T>,
        dlogvar: ArrayView2<T>,
    ) {
        let mut dflat = self.mu_head.backward(p, g, cache.flat.view(), dmu);
        dflat += &self.logvar_head.backward(p, g, cache.flat.view(), dlogvar);
        let (c, h, w) = self.bottleneck;
        let mut d = unflatten(dflat.view(), c, h, w);
        for i in (0..self.enc.len()).rev() {
            Zip::from(&mut d).and(&cache.pre[i]).for_each(|d, &a| *d *= silu_grad(a));
            match self.enc[i].backward(p, g, cache.cols[i].view(), d.view(), cache.in_dims[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

/// Gather snapshots stored `(H, W, C)` row-major into a `(C, B, H, W)` tensor.
pub fn to_tensor<T: Scalar>(frames: &[&[T]], shape: [usize; 3]) -> Array4<T> {
    let [h, w, c] = shape;
    let mut x = Array4::zeros((c, frames.len(), h, w));
    for (b, frame) in frames.iter().enumerate() {
        for (i, &v) in frame.iter().enumerate() {
            x[[i % c, b, i / c / w, (i / c) % w]] = v;
        }
    }
    x
}

/// Inverse of [`to_tensor`]: one `(H, W, C)` row-major vector per batch entry.
pub fn from_tensor<T: Scalar>(x: ArrayView4<T>) -> Vec<Vec<T>> {
    let (c, b, h, w) = x.dim();
    (0..b)
        .map(|bi| {
            let mut out = Vec::with_capacity(h * w * c);
            let sample = x.index_axis(Axis(1), bi);
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        out.push(sample[[ch, i, j]]);
                    }
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_through_the_network() {
        let net = RomNet::new(4, &[4, 8], [8, 12, 3]);
        let mut p = vec![0.0f32; net.num_params()];
        net.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Array4::zeros((3, 5, 8, 12));
        let (mu, lv, _) = net.encode(&p, x.view());
        assert_eq!(mu.dim(), (5, 4));
        assert_eq!(lv.dim(), (5, 4));
        let (y, _) = net.decode(&p, mu.view());
        assert_eq!(y.dim(), (3, 5, 8, 12));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tensor_packing_round_trips() {
        let a: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..24).map(|v| -(v as f64)).collect();
        let x = to_tensor(&[&a, &b], [2, 4, 3]);
        assert_eq!(x[[2, 0, 1, 3]], a[(4 + 3) * 3 + 2]);
        assert_eq!(from_tensor(x.view()), vec![a, b]);
    }

    #[test]
    fn flatten_round_trips() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(c, b, i, j)| (c * 100 + b * 10 + i * 2 + j) as f64);
        let f = flatten(x.view());
        assert_eq!(f[[1, 4 + 3]], x[[1, 1, 1, 1]]);
        assert_eq!(unflatten(f.view(), 2, 2, 2), x);
    }
}
