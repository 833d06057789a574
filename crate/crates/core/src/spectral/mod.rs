//! Pseudo-spectral solver for 2D incompressible Navier–Stokes in vorticity form
//! on the doubly periodic square `(0, 2π)²`.
//!
//! Fields are indexed `[i, j]` with `i` along `x₁` and `j` along `x₂`; the
//! matching wavenumbers are `kx` (first axis) and `ky` (second axis). Spectral
//! coefficients use the unnormalized forward DFT, so the inverse divides by `n²`.

mod fft;
mod sim;

pub use fft::Fft2;
pub use sim::{simulate, simulate_with_diagnostics, SimDiagnostics};

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Wavenumber tables and the two-thirds dealiasing mask for an `n × n` grid.
#[derive(Debug, Clone)]
pub struct SpectralGrid<T> {
    pub n: usize,
    pub kx: Vec<i64>,
    pub ky: Vec<i64>,
    pub ksq: Array2<T>,
    pub dealias_mask: Array2<bool>,
}

impl<T> SpectralGrid<T> {
    /// Length of each side of the periodic box.
    pub const DOMAIN_LENGTH: f64 = 2.0 * std::f64::consts::PI;
}

/// Integer wavenumber for FFT bin `i` of an `n`-point transform, in `(-n/2, n/2]`.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

pub fn make_grid<T: Scalar>(n: usize) -> Result<SpectralGrid<T>> {
    if n < 8 || !n.is_multiple_of(2) {
        return Err(Error::config(format!(
            "grid size must be even and at least 8, got {n}"
        )));
    }
    let k: Vec<i64> = (0..n).map(|i| wavenumber(i, n)).collect();
    let ksq = Array2::from_shape_fn((n, n), |(i, j)| {
        T::from_i64(k[i] * k[i] + k[j] * k[j]).unwrap()
    });
    let dealias_mask = Array2::from_shape_fn((n, n), |(i, j)| {
        3 * k[i].abs().max(k[j].abs()) <= n as i64
    });
    Ok(SpectralGrid {
        n,
        kx: k.clone(),
        ky: k,
        ksq,
        dealias_mask,
    })
}

fn default_forcing_wavenumber() -> i64 {
    8
}
fn default_drag() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_peak() -> f64 {
    4.0
}
fn default_amplitude() -> f64 {
    5.0
}

/// Physical and numerical parameters of one Kolmogorov-flow trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub reynolds: f64,
    #[serde(default = "default_forcing_wavenumber")]
    pub forcing_wavenumber: i64,
    /// Coefficient of the linear drag `-c·ω` in the forcing term.
    #[serde(default = "default_drag")]
    pub drag_coefficient: f64,
    pub dt: f64,
    pub record_interval: f64,
    pub n_sim: usize,
    pub n_out: usize,
    pub t_end: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_peak")]
    pub ic_peak_wavenumber: f64,
    #[serde(default = "default_amplitude")]
    pub ic_amplitude: f64,
    /// When false the whole forcing term (body force and drag) is switched off.
    #[serde(default = "default_true")]
    pub forcing_enabled: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            reynolds: 100.0,
            forcing_wavenumber: 8,
            drag_coefficient: 0.1,
            dt: 1e-3,
            record_interval: 1e-3,
            n_sim: 256,
            n_out: 64,
            t_end: 1.5,
            seed: 0,
            ic_peak_wavenumber: 4.0,
            ic_amplitude: 5.0,
            forcing_enabled: true,
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<u64> {
    let r = num / den;
    let rounded = r.round();
    ((r - rounded).abs() <= 1e-6 * rounded.max(1.0)).then_some(rounded as u64)
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.reynolds > 0.0) || !self.reynolds.is_finite() {
            return bad(format!("reynolds must be positive, got {}", self.reynolds));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.record_interval > 0.0) {
            return bad("record_interval must be positive".into());
        }
        if integer_ratio(self.record_interval, self.dt).is_none_or(|r| r == 0) {
            return bad(format!(
                "record_interval {} is not an integer multiple of dt {}",
                self.record_interval, self.dt
            ));
        }
        if !(self.t_end >= 0.0) {
            return bad(format!("t_end must be non-negative, got {}", self.t_end));
        }
        if self.t_end > 0.0 && integer_ratio(self.t_end, self.record_interval).is_none() {
            return bad(format!(
                "t_end {} is not an integer multiple of record_interval {}",
                self.t_end, self.record_interval
            ));
        }
        if self.n_out == 0 || self.n_out > self.n_sim || !self.n_sim.is_multiple_of(self.n_out) {
            return bad(format!(
                "n_out {} must divide n_sim {}",
                self.n_out, self.n_sim
            ));
        }
        if !self.n_out.is_multiple_of(2) {
            return bad(format!("n_out must be even, got {}", self.n_out));
        }
        if self.drag_coefficient < 0.0 || self.ic_amplitude < 0.0 || self.ic_peak_wavenumber <= 0.0
        {
            return bad("drag, amplitude and peak wavenumber must be non-negative".into());
        }
        Ok(())
    }

    /// Solver steps between two recorded snapshots.
    pub fn steps_per_record(&self) -> u64 {
        integer_ratio(self.record_interval, self.dt).unwrap_or(1)
    }

    /// Number of snapshots a full run records, including the initial state.
    pub fn snapshot_count(&self) -> usize {
        integer_ratio(self.t_end, self.record_interval).unwrap_or(0) as usize + 1
    }
}

/// Spectral vorticity at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    pub omega_hat: Array2<Complex<T>>,
    pub time: f64,
}

impl<T: Scalar> SpectralState<T> {
    /// State from a physical vorticity field sampled on the grid.
    pub fn from_physical(omega: &Array2<T>, fft: &Fft2<T>) -> Self {
        let mut omega_hat = omega.mapv(|v| Complex::new(v, T::zero()));
        fft.forward(&mut omega_hat);
        Self {
            omega_hat,
            time: 0.0,
        }
    }

    pub fn vorticity(&self, fft: &Fft2<T>) -> Array2<T> {
        fft.inverse_real(&self.omega_hat)
    }
}

/// Grid coordinate `x = 2π i / n`.
pub fn coordinate<T: Scalar>(i: usize, n: usize) -> T {
    T::lit(SpectralGrid::<T>::DOMAIN_LENGTH * i as f64 / n as f64)
}

pub fn init_vorticity<T: Scalar>(grid: &SpectralGrid<T>, cfg: &SolverConfig) -> SpectralState<T> {
    let n = grid.n;
    let fft = Fft2::new(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let peak = cfg.ic_peak_wavenumber;
    let mut spectrum = Array2::from_shape_fn((n, n), |(i, j)| {
        let ksq = (grid.kx[i] * grid.kx[i] + grid.ky[j] * grid.ky[j]) as f64;
        let envelope = ksq.sqrt() * (-ksq / (2.0 * peak * peak)).exp();
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex::new(T::lit(envelope * re), T::lit(envelope * im))
    });
    spectrum[[0, 0]] = Complex::new(T::zero(), T::zero());
    // The real part of the inverse transform is the field of the Hermitian-symmetrized spectrum.
    fft.inverse(&mut spectrum);
    let mut omega = spectrum.mapv(|c| c.re);
    let mean = omega.sum() / T::from_usize(n * n).unwrap();
    omega.mapv_inplace(|v| v - mean);
    let peak_abs = omega.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let scale = if peak_abs > T::zero() {
        T::lit(cfg.ic_amplitude) / peak_abs
    } else {
        T::zero()
    };
    omega.mapv_inplace(|v| v * scale);
    let mut state = SpectralState::from_physical(&omega, &fft);
    state.omega_hat[[0, 0]] = Complex::new(T::zero(), T::zero());
    state
}

fn i_times<T: Scalar>(k: i64, c: Complex<T>) -> Complex<T> {
    let k = T::from_i64(k).unwrap();
    Complex::new(-k * c.im, k * c.re)
}

/// Stream function `ψ̂ = ω̂ / |k|²`, zero at the mean mode.
pub fn stream_function<T: Scalar>(
    omega_hat: &Array2<Complex<T>>,
    grid: &SpectralGrid<T>,
) -> Array2<Complex<T>> {
    let mut psi = omega_hat.clone();
    Zip::from(&mut psi).and(&grid.ksq).for_each(|p, &k2| {
        if k2 == T::zero() {
            *p = Complex::new(T::zero(), T::zero());
        } else {
            *p = *p / k2;
        }
    });
    psi
}

/// Spectral velocity `(û, v̂) = (i·ky·ψ̂, −i·kx·ψ̂)`.
pub fn spectral_velocity<T: Scalar>(
    omega_hat: &Array2<Complex<T>>,
    grid: &SpectralGrid<T>,
) -> (Array2<Complex<T>>, Array2<Complex<T>>) {
    let psi = stream_function(omega_hat, grid);
    let n = grid.n;
    let u_hat = Array2::from_shape_fn((n, n), |(i, j)| i_times(grid.ky[j], psi[[i, j]]));
    let v_hat = Array2::from_shape_fn((n, n), |(i, j)| -i_times(grid.kx[i], psi[[i, j]]));
    (u_hat, v_hat)
}

pub fn velocity_from_vorticity<T: Scalar>(
    state: &SpectralState<T>,
    grid: &SpectralGrid<T>,
    fft: &Fft2<T>,
) -> (Array2<T>, Array2<T>) {
    let (u_hat, v_hat) = spectral_velocity(&state.omega_hat, grid);
    (fft.inverse_real(&u_hat), fft.inverse_real(&v_hat))
}

/// Maximum magnitude of `∂u/∂x₁ + ∂v/∂x₂` evaluated spectrally from physical fields.
pub fn spectral_divergence_max<T: Scalar>(u: &Array2<T>, v: &Array2<T>) -> Result<f64> {
    let n = u.nrows();
    if u.dim() != (n, n) || v.dim() != (n, n) {
        return Err(Error::shape("divergence needs two square fields of equal size"));
    }
    let fft = Fft2::new(n);
    let mut uh = u.mapv(|x| Complex::new(x, T::zero()));
    let mut vh = v.mapv(|x| Complex::new(x, T::zero()));
    fft.forward(&mut uh);
    fft.forward(&mut vh);
    let mut div = Array2::from_shape_fn((n, n), |(i, j)| {
        // Nyquist modes have no well-defined derivative for real fields.
        let (kx, ky) = (wavenumber(i, n), wavenumber(j, n));
        let kx = if 2 * kx.abs() == n as i64 { 0 } else { kx };
        let ky = if 2 * ky.abs() == n as i64 { 0 } else { ky };
        i_times(kx, uh[[i, j]]) + i_times(ky, vh[[i, j]])
    });
    fft.inverse(&mut div);
    Ok(div
        .iter()
        .fold(0.0f64, |m, c| m.max(c.norm().to_f64_lossy())))
}

/// Time integrator: integrating factor for viscosity and drag combined with Heun's
/// method for advection and the static body force.
pub struct Solver<T: Scalar> {
    pub grid: SpectralGrid<T>,
    pub config: SolverConfig,
    fft: Fft2<T>,
    decay: Array2<T>,
    forcing_hat: Array2<Complex<T>>,
}

impl<T: Scalar> Solver<T> {
    pub fn new(grid: SpectralGrid<T>, config: &SolverConfig) -> Result<Self> {
        if !(config.dt > 0.0) {
            return Err(Error::config(format!("dt must be positive, got {}", config.dt)));
        }
        if !(config.reynolds > 0.0) {
            return Err(Error::config("reynolds must be positive"));
        }
        let n = grid.n;
        let fft = Fft2::new(n);
        let drag = if config.forcing_enabled {
            config.drag_coefficient
        } else {
            0.0
        };
        let dt = config.dt;
        let re = config.reynolds;
        let decay = grid
            .ksq
            .mapv(|k2| T::lit((-(k2.to_f64_lossy() / re + drag) * dt).exp()));
        let forcing_hat = if config.forcing_enabled {
            let k = config.forcing_wavenumber as f64;
            let mut f = Array2::from_shape_fn((n, n), |(_, j)| {
                let x2 = coordinate::<f64>(j, n);
                Complex::new(T::lit(-k * (k * x2).cos()), T::zero())
            });
            fft.forward(&mut f);
            f
        } else {
            Array2::from_elem((n, n), Complex::new(T::zero(), T::zero()))
        };
        Ok(Self {
            grid,
            config: config.clone(),
            fft,
            decay,
            forcing_hat,
        })
    }

    pub fn fft(&self) -> &Fft2<T> {
        &self.fft
    }

    /// Explicit right-hand side `−(u·∇ω)̂ + f̂`, dealiased.
    fn explicit_rhs(&self, omega_hat: &Array2<Complex<T>>) -> Array2<Complex<T>> {
        let g = &self.grid;
        let n = g.n;
        let (u_hat, v_hat) = spectral_velocity(omega_hat, g);
        let wx_hat = Array2::from_shape_fn((n, n), |(i, j)| i_times(g.kx[i], omega_hat[[i, j]]));
        let wy_hat = Array2::from_shape_fn((n, n), |(i, j)| i_times(g.ky[j], omega_hat[[i, j]]));
        let u = self.fft.inverse_real(&u_hat);
        let v = self.fft.inverse_real(&v_hat);
        let wx = self.fft.inverse_real(&wx_hat);
        let wy = self.fft.inverse_real(&wy_hat);
        let mut adv = Array2::from_shape_fn((n, n), |idx| {
            Complex::new(u[idx] * wx[idx] + v[idx] * wy[idx], T::zero())
        });
        self.fft.forward(&mut adv);
        Zip::from(&mut adv)
            .and(&g.dealias_mask)
            .and(&self.forcing_hat)
            .for_each(|a, &keep, &f| {
                *a = if keep { f - *a } else { f };
            });
        adv
    }

    /// Advance one time step.
    pub fn step(&self, state: &SpectralState<T>) -> Result<SpectralState<T>> {
        let dt = T::lit(self.config.dt);
        let half = T::lit(0.5);
        let k1 = self.explicit_rhs(&state.omega_hat);
        let mut predictor = state.omega_hat.clone();
        Zip::from(&mut predictor)
            .and(&k1)
            .and(&self.decay)
            .for_each(|p, &k, &e| *p = (*p + k * dt) * e);
        let k2 = self.explicit_rhs(&predictor);
        let mut next = state.omega_hat.clone();
        Zip::from(&mut next)
            .and(&k1)
            .and(&k2)
            .and(&self.decay)
            .for_each(|w, &a, &b, &e| *w = (*w + a * (dt * half)) * e + b * (dt * half));
        let time = state.time + self.config.dt;
        if next.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Blowup {
                context: format!("t = {time:.6}"),
            });
        }
        Ok(SpectralState {
            omega_hat: next,
            time,
        })
    }
}

/// Convenience wrapper matching the free-function form of a single step.
pub fn step<T: Scalar>(
    state: &SpectralState<T>,
    grid: &SpectralGrid<T>,
    cfg: &SolverConfig,
) -> Result<SpectralState<T>> {
    Solver::new(grid.clone(), cfg)?.step(state)
}

/// Spectral truncation of an `n × n` coefficient array to the `m × m` band, rescaled
/// so the inverse transform at size `m` samples the same band-limited field.
pub fn truncate_spectrum<T: Scalar>(
    hat: &Array2<Complex<T>>,
    m: usize,
) -> Array2<Complex<T>> {
    let n = hat.nrows();
    if m == n {
        return hat.clone();
    }
    let scale = T::from_usize(m * m).unwrap() / T::from_usize(n * n).unwrap();
    let half = (m / 2) as i64;
    Array2::from_shape_fn((m, m), |(i, j)| {
        let (ki, kj) = (wavenumber(i, m), wavenumber(j, m));
        // The output Nyquist row/column has no unique source mode; drop it.
        if ki.abs() == half || kj.abs() == half {
            return Complex::new(T::zero(), T::zero());
        }
        let si = ki.rem_euclid(n as i64) as usize;
        let sj = kj.rem_euclid(n as i64) as usize;
        hat[[si, sj]] * scale
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_examples() {
        let g = make_grid::<f64>(8).unwrap();
        assert_eq!(g.ksq[[0, 0]], 0.0);
        assert_eq!(g.kx.iter().map(|k| k.abs()).max(), Some(4));
        assert_eq!(g.kx, vec![0, 1, 2, 3, 4, -3, -2, -1]);
        let g12 = make_grid::<f64>(12).unwrap();
        // kx = 5 lives at index 5; ky = 0 at index 0.
        assert!(!g12.dealias_mask[[5, 0]]);
        assert!(g12.dealias_mask[[4, 0]]);
        assert!(!g12.dealias_mask[[7, 0]]); // kx = -5
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(make_grid::<f64>(7).is_err());
        assert!(make_grid::<f64>(6).is_err());
        assert!(make_grid::<f32>(8).is_ok());
    }

    fn cfg(n: usize) -> SolverConfig {
        SolverConfig {
            n_sim: n,
            n_out: n,
            t_end: 0.0,
            seed: 1,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let g = make_grid::<f64>(16).unwrap();
        let s = init_vorticity(&g, &SolverConfig { ic_amplitude: 0.0, ..cfg(16) });
        assert!(s.omega_hat.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn initial_field_is_deterministic_zero_mean_and_scaled() {
        let g = make_grid::<f64>(64).unwrap();
        let a = init_vorticity(&g, &cfg(64));
        let b = init_vorticity(&g, &cfg(64));
        assert_eq!(a.omega_hat, b.omega_hat);
        let fft = Fft2::new(64);
        let w = a.vorticity(&fft);
        assert!(w.mean().unwrap().abs() < 1e-12);
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_relative_eq!(peak, 5.0, max_relative = 1e-12);
        let other = init_vorticity(&g, &SolverConfig { seed: 2, ..cfg(64) });
        assert_ne!(a.omega_hat, other.omega_hat);
    }

    #[test]
    fn initial_spectrum_is_hermitian() {
        let n = 16;
        let g = make_grid::<f64>(n).unwrap();
        let s = init_vorticity(&g, &cfg(n));
        for i in 0..n {
            for j in 0..n {
                let c = s.omega_hat[[i, j]];
                let d = s.omega_hat[[(n - i) % n, (n - j) % n]].conj();
                assert!((c - d).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn single_mode_velocity() {
        let n = 16;
        let g = make_grid::<f64>(n).unwrap();
        let fft = Fft2::new(n);
        let w = Array2::from_shape_fn((n, n), |(i, _)| coordinate::<f64>(i, n).cos());
        let s = SpectralState::from_physical(&w, &fft);
        let (u, v) = velocity_from_vorticity(&s, &g, &fft);
        for ((i, j), &uu) in u.indexed_iter() {
            assert!(uu.abs() < 1e-13);
            let expected = coordinate::<f64>(i, n).sin();
            assert!((v[[i, j]] - expected).abs() < 1e-13);
        }
        assert!(spectral_divergence_max(&u, &v).unwrap() < 1e-12);
    }

    #[test]
    fn zero_field_velocity_is_zero() {
        let n = 8;
        let g = make_grid::<f64>(n).unwrap();
        let fft = Fft2::new(n);
        let s = SpectralState::from_physical(&Array2::zeros((n, n)), &fft);
        let (u, v) = velocity_from_vorticity(&s, &g, &fft);
        assert!(u.iter().chain(v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn zero_state_is_a_fixed_point_without_forcing() {
        let n = 16;
        let g = make_grid::<f64>(n).unwrap();
        let c = SolverConfig { forcing_enabled: false, drag_coefficient: 0.0, ..cfg(n) };
        let solver = Solver::new(g, &c).unwrap();
        let mut s = SpectralState {
            omega_hat: Array2::from_elem((n, n), Complex::new(0.0, 0.0)),
            time: 0.0,
        };
        for _ in 0..10 {
            s = solver.step(&s).unwrap();
        }
        assert!(s.omega_hat.iter().all(|c| c.norm() == 0.0));
        assert_relative_eq!(s.time, 0.01, max_relative = 1e-12);
    }

    #[test]
    fn single_mode_decays_at_viscous_rate() {
        let n = 16;
        let m = 3.0;
        let g = make_grid::<f64>(n).unwrap();
        let fft = Fft2::new(n);
        let c = SolverConfig { forcing_enabled: false, reynolds: 50.0, ..cfg(n) };
        let solver = Solver::new(g, &c).unwrap();
        let w = Array2::from_shape_fn((n, n), |(i, _)| 2.0 * (m * coordinate::<f64>(i, n)).cos());
        let mut s = SpectralState::from_physical(&w, &fft);
        for _ in 0..500 {
            s = solver.step(&s).unwrap();
        }
        let amp = s.vorticity(&fft)[[0, 0]];
        let expected = 2.0 * (-m * m * 0.5 / 50.0f64).exp();
        assert_relative_eq!(amp, expected, max_relative = 1e-10);
    }

    #[test]
    fn zero_dt_is_rejected() {
        let g = make_grid::<f64>(8).unwrap();
        let c = SolverConfig { dt: 0.0, ..cfg(8) };
        assert!(matches!(Solver::new(g, &c), Err(Error::Config(_))));
    }

    #[test]
    fn blowup_is_reported() {
        let n = 8;
        let g = make_grid::<f64>(n).unwrap();
        let solver = Solver::new(g, &cfg(n)).unwrap();
        let mut s = SpectralState {
            omega_hat: Array2::from_elem((n, n), Complex::new(0.0, 0.0)),
            time: 0.25,
        };
        s.omega_hat[[1, 0]] = Complex::new(f64::NAN, 0.0);
        match solver.step(&s) {
            Err(Error::Blowup { context }) => assert!(context.contains("0.251")),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let ok = SolverConfig { n_sim: 16, n_out: 8, ..SolverConfig::default() };
        assert!(ok.validate().is_ok());
        assert!(SolverConfig { n_out: 12, n_sim: 16, ..ok.clone() }.validate().is_err());
        assert!(SolverConfig { record_interval: 0.0015, ..ok.clone() }.validate().is_err());
        assert!(SolverConfig { reynolds: 0.0, ..ok.clone() }.validate().is_err());
        assert_eq!(SolverConfig { t_end: 1.5, ..ok.clone() }.snapshot_count(), 1501);
        assert_eq!(SolverConfig { t_end: 0.0, ..ok }.snapshot_count(), 1);
    }

    #[test]
    fn truncation_preserves_band_limited_field() {
        let n = 32;
        let m = 8;
        let fft_n = Fft2::<f64>::new(n);
        let fft_m = Fft2::<f64>::new(m);
        let field = |i: usize, j: usize, size: usize| {
            let (x, y) = (coordinate::<f64>(i, size), coordinate::<f64>(j, size));
            (2.0 * x).sin() + 0.5 * (x + 3.0 * y).cos()
        };
        let mut hat = Array2::from_shape_fn((n, n), |(i, j)| Complex::new(field(i, j, n), 0.0));
        fft_n.forward(&mut hat);
        let small = fft_m.inverse_real(&truncate_spectrum(&hat, m));
        for ((i, j), &v) in small.indexed_iter() {
            assert!((v - field(i, j, m)).abs() < 1e-12);
        }
    }
}
