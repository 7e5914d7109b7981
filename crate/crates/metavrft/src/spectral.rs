//! Sampled correlations, discrete spectra on the stability grid, and the
//! data-driven stability index.

use crate::error::{Error, Result};
use crate::lti::{self, TransferFunction};
use crate::signals::Dataset;
use num_complex::Complex64;

/// Frequency grid `omega_i = 2 pi i / (2 l + 1)` for `i = 0..=l`.
///
/// The ratio at `omega` and `2 pi - omega` coincide by conjugacy, so the
/// grid stops at the last frequency below pi.
#[derive(Debug, Clone)]
pub struct SpectralGrid {
    pub window: usize,
    pub frequencies: Vec<f64>,
}

impl SpectralGrid {
    pub fn new(window: usize) -> Self {
        let l = window.max(1);
        let frequencies = (0..=l)
            .map(|i| 2.0 * std::f64::consts::PI * i as f64 / (2 * l + 1) as f64)
            .collect();
        SpectralGrid { window: l, frequencies }
    }
}

/// Sampled cross-correlation `(1/T) sum_t u(t - tau) e(t)`; out-of-range
/// samples are dropped from the sum (zero padding), normalization stays 1/T.
pub fn sampled_crosscorr(u: &[f64], e: &[f64], lag: i64) -> Result<f64> {
    if u.len() != e.len() {
        return Err(Error::LengthMismatch { left: u.len(), right: e.len() });
    }
    let t = u.len();
    let tau = lag.unsigned_abs() as usize;
    if t <= 2 * tau {
        return Err(Error::WindowTooLong { len: t, lag: tau });
    }
    let sum = if lag >= 0 {
        (tau..t).map(|i| u[i - tau] * e[i]).sum::<f64>()
    } else {
        (0..t - tau).map(|i| u[i + tau] * e[i]).sum::<f64>()
    };
    Ok(sum / t as f64)
}

/// All lags `-l..=l` at once.
pub fn crosscorr_window(u: &[f64], e: &[f64], window: usize) -> Result<Vec<f64>> {
    (-(window as i64)..=window as i64)
        .map(|tau| sampled_crosscorr(u, e, tau))
        .collect()
}

/// Finite Fourier sum `sum_tau corr(tau) e^{-j tau omega_i}` of a lag-indexed
/// window `corr[-l..=l]` at each grid frequency.
pub fn spectrum(corr: &[f64], grid: &SpectralGrid) -> Result<Vec<Complex64>> {
    let l = grid.window;
    if corr.len() != 2 * l + 1 {
        return Err(Error::LengthMismatch { left: corr.len(), right: 2 * l + 1 });
    }
    Ok(grid
        .frequencies
        .iter()
        .map(|&w| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (idx, &c) in corr.iter().enumerate() {
                let tau = idx as f64 - l as f64;
                acc += c * Complex64::new(0.0, -tau * w).exp();
            }
            acc
        })
        .collect())
}

/// Residual `e_s(t; alpha) = M u(t) - sum_k alpha_k C_k Xi y(t)`, cached as
/// its affine pieces so evaluation in `alpha` is a linear combination.
#[derive(Debug, Clone)]
pub struct StabilityResidual {
    /// `M u`
    pub base: Vec<f64>,
    /// `C_k Xi y` per controller
    pub components: Vec<Vec<f64>>,
}

impl StabilityResidual {
    pub fn new(
        dataset: &Dataset,
        m: &TransferFunction,
        controllers: &[TransferFunction],
    ) -> Result<Self> {
        let base = lti::simulate(m, &dataset.u)?;
        let xi = TransferFunction::unit(m.sample_time).sub(m);
        let xiy = lti::simulate(&xi, &dataset.y)?;
        let components = controllers
            .iter()
            .map(|c| lti::simulate(c, &xiy))
            .collect::<Result<Vec<_>>>()?;
        Ok(StabilityResidual { base, components })
    }

    pub fn eval(&self, alpha: &[f64]) -> Vec<f64> {
        let mut e = self.base.clone();
        for (a, comp) in alpha.iter().zip(&self.components) {
            for (ei, ci) in e.iter_mut().zip(comp) {
                *ei -= a * ci;
            }
        }
        e
    }
}

pub fn stability_residual(
    dataset: &Dataset,
    m: &TransferFunction,
    controllers: &[TransferFunction],
    alpha: &[f64],
) -> Result<Vec<f64>> {
    Ok(StabilityResidual::new(dataset, m, controllers)?.eval(alpha))
}

/// Spectral pieces of the stability constraint on a grid: the residual
/// cross-spectrum is affine in alpha, `Phi_{u,e_s}(w_i; alpha) =
/// base[i] - sum_k alpha_k comp[i][k]`, and `phi_u[i]` is the (symmetrized,
/// real) input spectrum.
#[derive(Debug, Clone)]
pub struct ConstraintSpectra {
    pub grid: SpectralGrid,
    pub base: Vec<Complex64>,
    pub components: Vec<Vec<Complex64>>,
    pub phi_u: Vec<f64>,
}

impl ConstraintSpectra {
    pub fn new(
        dataset: &Dataset,
        m: &TransferFunction,
        controllers: &[TransferFunction],
        grid: &SpectralGrid,
    ) -> Result<Self> {
        let l = grid.window;
        if dataset.len() <= 2 * l {
            return Err(Error::WindowTooLong { len: dataset.len(), lag: l });
        }
        let residual = StabilityResidual::new(dataset, m, controllers)?;
        let base = spectrum(&crosscorr_window(&dataset.u, &residual.base, l)?, grid)?;
        let components = residual
            .components
            .iter()
            .map(|c| spectrum(&crosscorr_window(&dataset.u, c, l)?, grid))
            .collect::<Result<Vec<_>>>()?;
        let mut gu = crosscorr_window(&dataset.u, &dataset.u, l)?;
        // Symmetrize so the input spectrum is real.
        for i in 0..gu.len() / 2 {
            let j = gu.len() - 1 - i;
            let avg = 0.5 * (gu[i] + gu[j]);
            gu[i] = avg;
            gu[j] = avg;
        }
        let phi_u = spectrum(&gu, grid)?.iter().map(|z| z.re).collect();
        Ok(ConstraintSpectra { grid: grid.clone(), base, components, phi_u })
    }

    /// Residual cross-spectrum at one frequency for given weights.
    pub fn residual_at(&self, i: usize, alpha: &[f64]) -> Complex64 {
        let mut z = self.base[i];
        for (a, comp) in alpha.iter().zip(&self.components) {
            z -= a * comp[i];
        }
        z
    }

    /// `max_i |Phi_{u,e_s}(w_i; alpha)| / |Phi_u(w_i)|`.
    pub fn delta_hat(&self, alpha: &[f64]) -> Result<f64> {
        let mut best = 0.0f64;
        for i in 0..self.grid.frequencies.len() {
            let denom = self.phi_u[i].abs();
            if denom < 1e-12 {
                return Err(Error::NotExciting { omega: self.grid.frequencies[i] });
            }
            best = best.max(self.residual_at(i, alpha).norm() / denom);
        }
        Ok(best)
    }
}

/// Data-driven estimate of the stability index `||M - C(alpha) G Xi||_inf`.
pub fn delta_hat(
    dataset: &Dataset,
    m: &TransferFunction,
    controllers: &[TransferFunction],
    alpha: &[f64],
    grid: &SpectralGrid,
) -> Result<f64> {
    ConstraintSpectra::new(dataset, m, controllers, grid)?.delta_hat(alpha)
}

/// Screening check for a candidate meta-dataset controller: the estimated
/// `||Delta_k||_inf` must not exceed `delta_k`.
pub fn screen_meta_controller(
    dataset: &Dataset,
    m: &TransferFunction,
    c_k: &TransferFunction,
    delta_k: f64,
    grid: &SpectralGrid,
) -> Result<bool> {
    if !(0.0 < delta_k && delta_k < 1.0) {
        return Err(Error::InvalidArgument { detail: "delta_k must lie in (0, 1)".into() });
    }
    let est = delta_hat(dataset, m, std::slice::from_ref(c_k), &[1.0], grid)?;
    Ok(est <= delta_k)
}
