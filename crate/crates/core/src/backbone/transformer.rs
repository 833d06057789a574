use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use super::lora::LoraAdapter;
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Layout, Linear};
use crate::scalar::Scalar;

/// Pre-LN causal transformer block.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(layout: &mut Layout, i: usize, d: usize, hidden: usize) -> Self {
        let n = |s: &str| format!("h.{i}.{s}");
        Self {
            ln1: LayerNorm::new(layout, &n("ln_1"), d),
            q: Linear::new(layout, &n("attn.q_proj"), d, d, true),
            k: Linear::new(layout, &n("attn.k_proj"), d, d, true),
            v: Linear::new(layout, &n("attn.v_proj"), d, d, true),
            o: Linear::new(layout, &n("attn.out_proj"), d, d, true),
            ln2: LayerNorm::new(layout, &n("ln_2"), d),
            fc1: Linear::new(layout, &n("mlp.fc_in"), d, hidden, true),
            fc2: Linear::new(layout, &n("mlp.fc_out"), hidden, d, true),
        }
    }
}

/// Batch geometry: `b` sequences of length `l`, sequence `i` preceded by `pads[i]` padding slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub b: usize,
    pub l: usize,
    pub pads: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a1: Array2<T>,
    a1_lora: Option<Array2<T>>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ln2: LayerNormCache<T>,
    m: Array2<T>,
}

/// Activations kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) geom: Geometry,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) ln_f: LayerNormCache<T>,
}

/// Attention for one block; returns the concatenated head outputs and the probability matrices.
fn attention<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    geom: &Geometry,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let l = geom.l;
    let mut ctx = Array2::zeros(q.dim());
    let mut probs = Vec::with_capacity(geom.b * heads);
    for b in 0..geom.b {
        let rows = b * l..(b + 1) * l;
        let pad = geom.pads[b];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qh.dot(&kh.t());
            for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
                if i < pad {
                    row.fill(T::zero());
                    continue;
                }
                let valid = row.slice(s![pad..=i]);
                let max = valid.iter().fold(T::neg_infinity(), |m, &x| m.max(x * scale));
                let mut sum = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    if j < pad || j > i {
                        *x = T::zero();
                    } else {
                        *x = (*x * scale - max).exp();
                        sum += *x;
                    }
                }
                row.mapv_inplace(|x| x / sum);
            }
            ctx.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    (ctx, probs)
}

pub(crate) struct Transformer<'a, T> {
    pub blocks: &'a [Block],
    pub ln_f: &'a LayerNorm,
    pub heads: usize,
    pub base: &'a [T],
    pub lora: Option<&'a LoraAdapter<T>>,
}

impl<T: Scalar> Transformer<'_, T> {
    /// `x` is `(B·L, D)` with positions already added.
    pub fn forward(&self, mut x: Array2<T>, geom: Geometry, keep: bool) -> (Array2<T>, Option<ForwardCache<T>>) {
        let p = self.base;
        let mut caches = Vec::new();
        for (li, blk) in self.blocks.iter().enumerate() {
            let (a1, ln1) = blk.ln1.forward(p, x.view());
            let mut q = blk.q.forward(p, a1.view());
            let a1_lora = self.lora.map(|lora| {
                let xa = lora.down(li, a1.view());
                q += &lora.up(li, xa.view());
                xa
            });
            let k = blk.k.forward(p, a1.view());
            let v = blk.v.forward(p, a1.view());
            let (ctx, probs) = attention(&q, &k, &v, &geom, self.heads);
            x += &blk.o.forward(p, ctx.view());
            let (a2, ln2) = blk.ln2.forward(p, x.view());
            let m = blk.fc1.forward(p, a2.view());
            x += &blk.fc2.forward(p, m.mapv(gelu).view());
            if keep {
                caches.push(BlockCache {
                    ln1,
                    a1,
                    a1_lora,
                    q,
                    k,
                    v,
                    probs,
                    ln2,
                    m,
                });
            }
        }
        let (out, ln_f) = self.ln_f.forward(p, x.view());
        let cache = keep.then(|| ForwardCache {
            geom,
            blocks: caches,
            ln_f,
        });
        (out, cache)
    }

    /// Input gradient of the frozen stack; LoRA gradients accumulate into `lora_grad`.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: ArrayView2<T>, mut lora_grad: Option<&mut [T]>) -> Array2<T> {
        let p = self.base;
        let geom = &cache.geom;
        let mut dx = self.ln_f.backward_input(p, &cache.ln_f, dout);
        for (li, blk) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[li];
            let mut dm = blk.fc2.backward_input(p, dx.view());
            Zip::from(&mut dm).and(&c.m).for_each(|d, &m| *d *= gelu_grad(m));
            let da2 = blk.fc1.backward_input(p, dm.view());
            dx += &blk.ln2.backward_input(p, &c.ln2, da2.view());

            let dctx = blk.o.backward_input(p, dx.view());
            let d = dctx.ncols();
            let dh = d / self.heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = Array2::zeros(dctx.dim());
            let mut dk = Array2::zeros(dctx.dim());
            let mut dv = Array2::zeros(dctx.dim());
            for b in 0..geom.b {
                let rows = b * geom.l..(b + 1) * geom.l;
                for h in 0..self.heads {
                    let cols = h * dh..(h + 1) * dh;
                    let pm = &c.probs[b * self.heads + h];
                    let dout_h = dctx.slice(s![rows.clone(), cols.clone()]);
                    let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                    let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                    let dp = dout_h.dot(&vh.t());
                    dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&pm.t().dot(&dout_h));
                    let mut ds = &dp * pm;
                    for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(pm.axis_iter(Axis(0))) {
                        let dot = row.sum();
                        row.zip_mut_with(&prow, |x, &pv| *x = (*x - pv * dot) * scale);
                    }
                    dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
                }
            }
            let mut da1 = blk.q.backward_input(p, dq.view());
            da1 += &blk.k.backward_input(p, dk.view());
            da1 += &blk.v.backward_input(p, dv.view());
            if let Some(lora) = self.lora {
                let xa = c.a1_lora.as_ref().expect("lora activations cached");
                da1 += &lora.backward(li, c.a1.view(), xa.view(), dq.view(), lora_grad.as_deref_mut());
            }
            dx += &blk.ln1.backward_input(p, &c.ln1, da1.view());
        }
        dx
    }
}

/// `(B, L, D)` → `(B·L, D)` owned.
pub(crate) fn stack<T: Scalar>(x: ArrayView3<T>) -> Array2<T> {
    let (b, l, d) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * l, d))
        .expect("stack")
}

pub(crate) fn unstack<T: Scalar>(x: Array2<T>, b: usize, l: usize) -> Array3<T> {
    let d = x.ncols();
    x.into_shape_with_order((b, l, d)).expect("unstack")
}
