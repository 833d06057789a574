//! Reduced-order model: a convolutional variational encoder/decoder that compresses
//! each snapshot to a `D`-dimensional latent vector, trained with a reconstruction
//! term plus a KL-form disentanglement penalty.

mod checkpoint;
mod model;

pub use checkpoint::{train_rom, EpochLoss, LatentSource, RomCheckpoint, ROM_MANIFEST_FILE};
pub use model::{from_tensor, to_tensor, DecoderCache, EncoderCache, RomNet};

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayView4, Zip};
use serde::{Deserialize, Serialize};

use crate::dataio::NormMode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RomConfig {
    pub latent_dim: usize,
    pub lambda: f64,
    pub encoder_channels: Vec<usize>,
    /// `(H, W, C)`; taken from the training data when absent.
    pub input_shape: Option<[usize; 3]>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub normalization: NormMode,
}

impl Default for RomConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            lambda: 1e-4,
            encoder_channels: vec![32, 64, 128, 256],
            input_shape: None,
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            weight_decay: 0.01,
            seed: 0,
            normalization: NormMode::Minmax,
        }
    }
}

impl RomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("rom.latent_dim must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("rom.lambda must be non-negative"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config("rom.encoder_channels must be a non-empty list of positive widths"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("rom.lr and rom.batch_size must be positive"));
        }
        if let Some(shape) = self.input_shape {
            self.check_shape(shape)?;
        }
        Ok(())
    }

    fn check_shape(&self, [h, w, c]: [usize; 3]) -> Result<()> {
        let div = 1usize << self.encoder_channels.len();
        if c == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "input shape {h}x{w}x{c} incompatible with {} downsampling stages (H and W must be divisible by {div})",
                self.encoder_channels.len()
            )));
        }
        Ok(())
    }
}

/// Gaussian posterior parameters for one snapshot and the latent used downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub z: Vec<T>,
}

/// Latent means of a series, `D × T`; column `t` encodes snapshot `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T> {
    pub values: Array2<T>,
    pub source_scenario: String,
    pub rom_id: String,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize<T: Scalar>(code: &LatentCode<T>, epsilon: &[T]) -> Result<Vec<T>> {
    if epsilon.len() != code.mu.len() || code.sigma.len() != code.mu.len() {
        return Err(Error::shape(format!(
            "latent length {} with sigma {} and epsilon {}",
            code.mu.len(),
            code.sigma.len(),
            epsilon.len()
        )));
    }
    Ok(code
        .mu
        .iter()
        .zip(&code.sigma)
        .zip(epsilon)
        .map(|((&m, &s), &e)| m + s * e)
        .collect())
}

/// Squared error summed over channels, averaged over grid points. Inputs are `(H, W, C)`.
pub fn reconstruction_loss<T: Scalar>(x: ArrayView3<T>, x_hat: ArrayView3<T>) -> Result<T> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let (h, w, _) = x.dim();
    let mut acc = T::zero();
    Zip::from(&x).and(&x_hat).for_each(|&a, &b| acc += (a - b) * (a - b));
    Ok(acc / T::lit((h * w) as f64))
}

/// `−½ Σ_k (1 + log σ_k² − μ_k² − σ_k²)`.
pub fn disentanglement_loss<T: Scalar>(mu: &[T], sigma: &[T]) -> Result<T> {
    if mu.len() != sigma.len() {
        return Err(Error::shape(format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
    }
    if let Some(i) = sigma.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::data(format!("sigma[{i}] is not positive")));
    }
    let half = T::lit(0.5);
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let s2 = s * s;
            -half * (T::one() + s2.ln() - m * m - s2)
        })
        .sum())
}

/// The same penalty written in terms of the log-variance head, summed over `D`.
fn kl_from_logvar<T: Scalar>(mu: T, logvar: T) -> T {
    -T::lit(0.5) * (T::one() + logvar - mu * mu - logvar.exp())
}

/// Batch objective pieces for `(C, B, H, W)` inputs, with `ε` given as `(B, D)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RomLoss<T> {
    pub reconstruction: T,
    pub disentanglement: T,
    pub total: T,
}

/// Forward and backward pass of `L_rec + λ·L_dis` averaged over the batch.
/// Gradients are accumulated into `g`.
pub fn loss_and_grad<T: Scalar>(
    net: &RomNet,
    p: &[T],
    g: &mut [T],
    x: ArrayView4<T>,
    epsilon: ArrayView2<T>,
    lambda: f64,
) -> RomLoss<T> {
    let (_, b, h, w) = x.dim();
    let (mu, logvar, enc_cache) = net.encode(p, x);
    let sigma = logvar.mapv(|v| (T::lit(0.5) * v).exp());
    let z = &mu + &(&sigma * &epsilon);
    let (x_hat, dec_cache) = net.decode(p, z.view());

    let bt = T::lit(b as f64);
    let lam = T::lit(lambda);
    let diff = &x_hat - &x;
    let rec = diff.iter().map(|&d| d * d).sum::<T>() / T::lit((b * h * w) as f64);
    let dis = Zip::from(&mu)
        .and(&logvar)
        .fold(T::zero(), |acc, &m, &lv| acc + kl_from_logvar(m, lv))
        / bt;

    let dx_hat = diff.mapv(|d| T::lit(2.0) * d / T::lit((b * h * w) as f64));
    let dz = net.backward_decoder(p, g, &dec_cache, dx_hat.view());
    let mut dmu = dz.clone();
    let mut dlogvar = Array2::zeros(dz.dim());
    Zip::from(&mut dmu).and(&mu).for_each(|d, &m| *d += lam * m / bt);
    Zip::from(&mut dlogvar)
        .and(&dz)
        .and(&epsilon)
        .and(&sigma)
        .for_each(|d, &dz, &e, &s| {
            let half = T::lit(0.5);
            *d = dz * e * half * s + lam * half * (s * s - T::one()) / bt;
        });
    net.backward_encoder(p, g, &enc_cache, dmu.view(), dlogvar.view());
    RomLoss {
        reconstruction: rec,
        disentanglement: dis,
        total: rec + lam * dis,
    }
}

/// Pearson correlation of latent dimensions over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Dimensions included in `matrix`, in order.
    pub retained: Vec<usize>,
    /// Dimensions with zero temporal variance.
    pub excluded: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    /// Mean |off-diagonal| entry; `None` when fewer than two dimensions are retained.
    pub mean_abs_off_diagonal: Option<f64>,
}

pub fn latent_correlation<T: Scalar>(latents: &LatentSequence<T>) -> Result<CorrelationReport> {
    let (d, t) = latents.values.dim();
    if t < 2 {
        return Err(Error::data(format!("latent correlation needs at least 2 time steps, got {t}")));
    }
    let mut centered = Vec::new();
    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    for k in 0..d {
        let row: Vec<f64> = latents.values.row(k).iter().map(|v| v.to_f64_lossy()).collect();
        let mean = row.iter().sum::<f64>() / t as f64;
        let dev: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let norm = dev.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * mean.abs().max(1.0) * (t as f64).sqrt() {
            excluded.push(k);
        } else {
            retained.push(k);
            centered.push(dev.iter().map(|v| v / norm).collect::<Vec<_>>());
        }
    }
    let n = retained.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut off = 0.0;
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let r = centered[i]
                .iter()
                .zip(&centered[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .clamp(-1.0, 1.0);
            matrix[i][j] = r;
            matrix[j][i] = r;
            off += 2.0 * r.abs();
        }
    }
    if !excluded.is_empty() {
        log::warn!("latent dimensions {excluded:?} have zero variance and are excluded");
    }
    Ok(CorrelationReport {
        retained,
        excluded,
        matrix,
        mean_abs_off_diagonal: (n >= 2).then(|| off / (n * (n - 1)) as f64),
    })
}
