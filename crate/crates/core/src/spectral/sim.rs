use ndarray::Array2;
use rustfft::num_complex::Complex;

use super::{
    init_vorticity, make_grid, spectral_divergence_max, spectral_velocity, truncate_spectrum,
    Fft2, Solver, SolverConfig, SpectralState,
};
use crate::dataio::{FlowSnapshotSeries, Provenance};
use crate::error::Result;
use crate::scalar::Scalar;

/// Per-snapshot quality checks computed in working precision, before the
/// fields are stored as `f32`.
#[derive(Debug, Clone, Default)]
pub struct SimDiagnostics {
    pub max_divergence: Vec<f64>,
    pub max_imaginary_residual: Vec<f64>,
}

impl SimDiagnostics {
    pub fn worst_divergence(&self) -> f64 {
        self.max_divergence.iter().cloned().fold(0.0, f64::max)
    }

    pub fn worst_imaginary_residual(&self) -> f64 {
        self.max_imaginary_residual.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn simulate<T: Scalar>(cfg: &SolverConfig) -> Result<FlowSnapshotSeries> {
    simulate_with_diagnostics::<T>(cfg).map(|(s, _)| s)
}

/// Run one trajectory and record `(u, v, ω)` snapshots on the output grid.
pub fn simulate_with_diagnostics<T: Scalar>(
    cfg: &SolverConfig,
) -> Result<(FlowSnapshotSeries, SimDiagnostics)> {
    cfg.validate()?;
    let grid = make_grid::<T>(cfg.n_sim)?;
    let solver = Solver::new(grid, cfg)?;
    let out_fft = Fft2::<T>::new(cfg.n_out);
    let snapshots = cfg.snapshot_count();
    let per_record = cfg.steps_per_record();
    let n = cfg.n_out;
    let mut data = Vec::with_capacity(snapshots * n * n * 3);
    let mut diag = SimDiagnostics::default();

    let mut record = |state: &SpectralState<T>, data: &mut Vec<f32>| -> Result<()> {
        let (u_hat, v_hat) = spectral_velocity(&state.omega_hat, &solver.grid);
        let fields: Vec<Array2<Complex<T>>> = [&u_hat, &v_hat, &state.omega_hat]
            .iter()
            .map(|h| truncate_spectrum(h, n))
            .collect();
        let residual = fields
            .iter()
            .map(|h| out_fft.imaginary_residual(h))
            .fold(0.0, f64::max);
        let phys: Vec<Array2<T>> = fields.iter().map(|h| out_fft.inverse_real(h)).collect();
        diag.max_divergence
            .push(spectral_divergence_max(&phys[0], &phys[1])?);
        diag.max_imaginary_residual.push(residual);
        for i in 0..n {
            for j in 0..n {
                for f in &phys {
                    data.push(f[[i, j]].to_f32().unwrap_or(f32::NAN));
                }
            }
        }
        Ok(())
    };

    let mut state = init_vorticity(&solver.grid, cfg);
    record(&state, &mut data)?;
    for snap in 1..snapshots {
        for _ in 0..per_record {
            state = solver.step(&state)?;
        }
        // Recompute time from the step count to avoid accumulated rounding.
        state.time = snap as f64 * cfg.record_interval;
        record(&state, &mut data)?;
        if snapshots >= 10 && snap % (snapshots / 10) == 0 {
            log::info!("simulated t = {:.4} ({snap}/{})", state.time, snapshots - 1);
        }
    }

    let series = FlowSnapshotSeries::new(
        data,
        [snapshots, n, n, 3],
        vec!["u".into(), "v".into(), "omega".into()],
        cfg.record_interval,
        format!("kolmogorov-re{}", cfg.reynolds),
        Provenance::Solver(cfg.clone()),
        Some(cfg.seed),
    )?;
    Ok((series, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SolverConfig {
        SolverConfig {
            n_sim: 16,
            n_out: 8,
            dt: 1e-3,
            record_interval: 2e-3,
            t_end: 0.01,
            seed: 3,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn zero_duration_yields_initial_snapshot_only() {
        let s = simulate::<f64>(&SolverConfig { t_end: 0.0, ..tiny() }).unwrap();
        assert_eq!(s.t(), 1);
        assert_eq!(s.variables, vec!["u", "v", "omega"]);
    }

    #[test]
    fn snapshot_count_and_diagnostics() {
        let (s, d) = simulate_with_diagnostics::<f64>(&tiny()).unwrap();
        assert_eq!(s.t(), 6);
        assert_eq!(s.shape(), [6, 8, 8, 3]);
        assert!(d.worst_divergence() < 1e-10);
        assert!(d.worst_imaginary_residual() < 1e-12);
    }

    #[test]
    fn millisecond_cadence_snapshot_count() {
        let cfg = SolverConfig { t_end: 1.5, record_interval: 1e-3, ..tiny() };
        assert_eq!(cfg.snapshot_count(), 1501);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = simulate::<f64>(&tiny()).unwrap();
        let b = simulate::<f64>(&tiny()).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate::<f64>(&SolverConfig { seed: 4, ..tiny() }).unwrap();
        assert_ne!(a.data, c.data);
    }
}
