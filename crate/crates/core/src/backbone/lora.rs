use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fill_uniform, Layout};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 16.0,
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || !(self.alpha > 0.0) {
            return Err(Error::config("lora rank and alpha must be positive"));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("lora dropout other than 0 is not supported"));
        }
        Ok(())
    }
}

/// Low-rank update `(α/r)·B·A` on the query projection of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub config: LoraConfig,
    pub d_embed: usize,
    pub layers: usize,
    pub layout: Layout,
    pub params: Vec<T>,
    a: Vec<usize>,
    b: Vec<usize>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A ~ U(±1/√D)`, `B = 0`, so the initial update is exactly zero.
    pub fn new<R: Rng>(config: LoraConfig, d_embed: usize, layers: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let mut a = Vec::with_capacity(layers);
        let mut b = Vec::with_capacity(layers);
        for l in 0..layers {
            a.push(layout.add(format!("h.{l}.attn.q_proj.lora_A"), &[config.rank, d_embed]));
            b.push(layout.add(format!("h.{l}.attn.q_proj.lora_B"), &[d_embed, config.rank]));
        }
        let mut params = vec![T::zero(); layout.len()];
        let bound = 1.0 / (d_embed as f64).sqrt();
        for &off in &a {
            fill_uniform(&mut params[off..off + config.rank * d_embed], bound, rng);
        }
        Ok(Self {
            config,
            d_embed,
            layers,
            layout,
            params,
            a,
            b,
        })
    }

    /// Rebuild from stored parameters.
    pub fn from_params(config: LoraConfig, d_embed: usize, layers: usize, params: Vec<T>) -> Result<Self> {
        let mut ad = Self::new(config, d_embed, layers, &mut ChaCha8Rng::seed_from_u64(0))?;
        if params.len() != ad.params.len() {
            return Err(Error::data(format!(
                "LoRA parameters have {} values, expected {}",
                params.len(),
                ad.params.len()
            )));
        }
        ad.params = params;
        Ok(ad)
    }

    fn scale(&self) -> T {
        T::lit(self.config.scale())
    }

    fn mat_a(&self, l: usize) -> ArrayView2<'_, T> {
        let r = self.config.rank;
        ArrayView2::from_shape((r, self.d_embed), &self.params[self.a[l]..self.a[l] + r * self.d_embed]).unwrap()
    }

    fn mat_b(&self, l: usize) -> ArrayView2<'_, T> {
        let r = self.config.rank;
        ArrayView2::from_shape((self.d_embed, r), &self.params[self.b[l]..self.b[l] + r * self.d_embed]).unwrap()
    }

    /// `x·Aᵀ`, shape `(N, r)`.
    pub(crate) fn down(&self, l: usize, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.mat_a(l).t())
    }

    /// `s·xa·Bᵀ`, shape `(N, D)`.
    pub(crate) fn up(&self, l: usize, xa: ArrayView2<T>) -> Array2<T> {
        let mut y = xa.dot(&self.mat_b(l).t());
        let s = self.scale();
        y.mapv_inplace(|v| v * s);
        y
    }

    /// Input-gradient contribution of the update; parameter gradients go to `grad`.
    pub(crate) fn backward(
        &self,
        l: usize,
        x: ArrayView2<T>,
        xa: ArrayView2<T>,
        dq: ArrayView2<T>,
        grad: Option<&mut [T]>,
    ) -> Array2<T> {
        let s = self.scale();
        let r = self.config.rank;
        let d = self.d_embed;
        let u = dq.dot(&self.mat_b(l));
        if let Some(g) = grad {
            let (ga, gb) = g.split_at_mut(self.b[l]);
            let mut ga = ArrayViewMut2::from_shape((r, d), &mut ga[self.a[l]..self.a[l] + r * d]).unwrap();
            general_mat_mul(s, &u.t(), &x, T::one(), &mut ga);
            let mut gb = ArrayViewMut2::from_shape((d, r), &mut gb[..d * r]).unwrap();
            general_mat_mul(s, &dq.t(), &xa, T::one(), &mut gb);
        }
        let mut dx = u.dot(&self.mat_a(l));
        dx.mapv_inplace(|v| v * s);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scale_is_four() {
        assert_eq!(LoraConfig::default().scale(), 4.0);
    }

    #[test]
    fn fresh_adapter_has_zero_update() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ad = LoraAdapter::<f64>::new(LoraConfig::default(), 8, 2, &mut rng).unwrap();
        let x = Array2::from_elem((3, 8), 0.7);
        let up = ad.up(1, ad.down(1, x.view()).view());
        assert!(up.iter().all(|&v| v == 0.0));
        assert!(ad.mat_a(0).iter().any(|&v| v != 0.0));
    }
}
