//! Experiment data: open-loop records, closed-loop runs with measurement
//! noise fed back, virtual references, and the VRFT prefilter.

use crate::error::{Error, Result};
use crate::lti::{self, Filter, TransferFunction, STABILITY_TOL};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

/// Divergence threshold for closed-loop runs.
const DIVERGENCE_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    OpenLoop,
    ClosedLoop,
}

/// Time-indexed input/output record of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub sample_time: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub kind: DatasetKind,
    pub reference: Option<Vec<f64>>,
    /// Set when a closed-loop run exceeded the divergence cap and the
    /// record was truncated at that point.
    pub diverged: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// CSV with header `t,u,y[,r]`, one row per sample, plus a JSON sidecar
    /// `<path>.json` holding `{ts, noise_std, seed, kind, diverged}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        if let Some(r) = &self.reference {
            writeln!(f, "t,u,y,r")?;
            for i in 0..self.len() {
                writeln!(
                    f,
                    "{},{},{},{}",
                    i as f64 * self.sample_time,
                    self.u[i],
                    self.y[i],
                    r[i]
                )?;
            }
        } else {
            writeln!(f, "t,u,y")?;
            for i in 0..self.len() {
                writeln!(f, "{},{},{}", i as f64 * self.sample_time, self.u[i], self.y[i])?;
            }
        }
        let sidecar = serde_json::json!({
            "ts": self.sample_time,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "kind": self.kind,
            "diverged": self.diverged,
        });
        let mut side = std::fs::File::create(path.with_extension("json"))?;
        writeln!(side, "{}", serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptySignal)?;
        let has_r = header.trim() == "t,u,y,r";
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut r = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::Io { detail: e.to_string() })
            };
            u.push(parse(cols[1])?);
            y.push(parse(cols[2])?);
            if has_r {
                r.push(parse(cols[3])?);
            }
        }
        let side = std::fs::read_to_string(path.with_extension("json"))?;
        let meta: serde_json::Value = serde_json::from_str(&side)?;
        let kind = if meta["kind"] == "closed_loop" {
            DatasetKind::ClosedLoop
        } else {
            DatasetKind::OpenLoop
        };
        Ok(Dataset {
            u,
            y,
            sample_time: meta["ts"].as_f64().unwrap_or(1.0),
            noise_std: meta["noise_std"].as_f64().unwrap_or(0.0),
            seed: meta["seed"].as_u64().unwrap_or(0),
            kind,
            reference: if has_r { Some(r) } else { None },
            diverged: meta["diverged"].as_bool().unwrap_or(false),
        })
    }
}

/// White Gaussian noise, reproducible from the seed.
pub fn gaussian_noise(std: f64, len: usize, seed: u64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Open-loop experiment: `y = G u + v` with white Gaussian `v`.
pub fn generate_open_loop(
    g: &TransferFunction,
    input: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument { detail: "noise_std must be >= 0".into() });
    }
    if !lti::is_stable(g, STABILITY_TOL)? {
        // Open-loop collection requires a stable plant.
        return Err(Error::Unstable);
    }
    let y0 = lti::simulate(g, input)?;
    let v = gaussian_noise(noise_std, input.len(), seed);
    let y = y0.iter().zip(&v).map(|(a, b)| a + b).collect();
    Ok(Dataset {
        u: input.to_vec(),
        y,
        sample_time: g.sample_time,
        noise_std,
        seed,
        kind: DatasetKind::OpenLoop,
        reference: None,
        diverged: false,
    })
}

/// Closed-loop run with the measurement noise fed back to the controller:
/// `e = r - (y0 + v)`, `u = C e`, `y0 = G u`, recorded `y = y0 + v`.
///
/// Runs that exceed the divergence cap are truncated and flagged rather
/// than rejected, so instability rates can be counted downstream.
pub fn simulate_closed_loop(
    g: &TransferFunction,
    c: &TransferFunction,
    reference: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if reference.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut cf = Filter::new(c);
    let mut gf = Filter::new(g);
    let hc = cf.feedthrough();
    let hg = gf.feedthrough();
    let well_posed = 1.0 + hg * hc;
    if well_posed.abs() < 1e-12 {
        return Err(Error::IllPosedLoop);
    }
    let v = gaussian_noise(noise_std, reference.len(), seed);
    let mut u = Vec::with_capacity(reference.len());
    let mut y = Vec::with_capacity(reference.len());
    let mut diverged = false;
    for (t, &rt) in reference.iter().enumerate() {
        let pc = cf.step_free();
        let pg = gf.step_free();
        let y0 = (pg + hg * pc + hg * hc * (rt - v[t])) / well_posed;
        let e = rt - y0 - v[t];
        let ut = pc + hc * e;
        cf.push(e, ut);
        gf.push(ut, y0);
        u.push(ut);
        y.push(y0 + v[t]);
        if !y0.is_finite() || y0.abs() > DIVERGENCE_CAP {
            diverged = true;
            break;
        }
    }
    let n = y.len();
    Ok(Dataset {
        u,
        y,
        sample_time: g.sample_time,
        noise_std,
        seed,
        kind: DatasetKind::ClosedLoop,
        reference: Some(reference[..n].to_vec()),
        diverged,
    })
}

/// Virtual reference: the set point that reproduces `y` through the
/// reference model. Entries past `valid` cannot be reconstructed (the
/// model's d-step delay eats the last d samples) and are left at zero.
#[derive(Debug, Clone)]
pub struct VirtualReference {
    pub r_v: Vec<f64>,
    pub valid: Range<usize>,
}

pub fn virtual_reference(m: &TransferFunction, y: &[f64]) -> Result<VirtualReference> {
    if y.is_empty() {
        return Err(Error::EmptySignal);
    }
    if !lti::is_stable(m, STABILITY_TOL)? {
        return Err(Error::Unstable);
    }
    if m.approx_eq(&TransferFunction::unit(m.sample_time), 1e-12) {
        return Err(Error::UnitReferenceModel);
    }
    let d = m.relative_degree().ok_or(Error::ZeroReferenceModel)?;
    let shifted: Vec<f64> = m.num[d..].to_vec();
    // Causal inversion demands minimum phase of the delay-free part.
    let shifted_tf = TransferFunction::new(shifted.clone(), vec![1.0], m.sample_time)?;
    if !shifted_tf
        .zeros()
        .iter()
        .all(|z| z.norm() < 1.0 - STABILITY_TOL)
    {
        return Err(Error::NonMinimumPhase);
    }
    let inv = TransferFunction::new(m.den.clone(), shifted, m.sample_time)?;
    let w = lti::simulate(&inv, y)?;
    let t = y.len();
    if t <= d {
        return Err(Error::WindowTooLong { len: t, lag: d });
    }
    let mut r_v = vec![0.0; t];
    r_v[..t - d].copy_from_slice(&w[d..]);
    Ok(VirtualReference { r_v, valid: 0..t - d })
}

/// VRFT prefilter `L = W * M * (1 - M) / Phi_u^(1/2)`.
///
/// In white-input mode the spectral density root is the scalar sample
/// standard deviation of `u`. Otherwise an AR model fitted by
/// Levinson-Durbin provides a minimum-phase spectral factor, which the
/// filter absorbs.
pub fn design_prefilter(
    m: &TransferFunction,
    w: &TransferFunction,
    u: &[f64],
    white_input: bool,
) -> Result<TransferFunction> {
    if u.is_empty() {
        return Err(Error::EmptySignal);
    }
    if !lti::is_stable(m, STABILITY_TOL)? {
        return Err(Error::Unstable);
    }
    if m.approx_eq(&TransferFunction::unit(m.sample_time), 1e-12) {
        return Err(Error::UnitReferenceModel);
    }
    let xi = TransferFunction::unit(m.sample_time).sub(m);
    let shape = w.mul(m).mul(&xi);
    if white_input {
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let var = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / u.len() as f64;
        if var <= 1e-24 {
            return Err(Error::ZeroVarianceInput);
        }
        Ok(shape.scale(1.0 / var.sqrt()))
    } else {
        let (a, sigma) = spectral_whitener(u)?;
        let whiten = TransferFunction::new(a, vec![1.0], m.sample_time)?;
        Ok(shape.mul(&whiten).scale(1.0 / sigma))
    }
}

/// AR fit of the input by Levinson-Durbin on the biased autocorrelation.
/// Returns the (minimum-phase) AR polynomial `[1, a1, ..., ap]` and the
/// innovation standard deviation, so `A(q^-1)/sigma` whitens the input.
pub fn spectral_whitener(u: &[f64]) -> Result<(Vec<f64>, f64)> {
    let t = u.len();
    let order = 24usize.min(t / 4).max(1);
    let mean = u.iter().sum::<f64>() / t as f64;
    let x: Vec<f64> = u.iter().map(|v| v - mean).collect();
    let mut r = vec![0.0; order + 1];
    for (tau, rt) in r.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in tau..t {
            acc += x[i] * x[i - tau];
        }
        *rt = acc / t as f64;
    }
    if r[0] <= 1e-24 {
        return Err(Error::ZeroVarianceInput);
    }
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut e = r[0];
    for k in 1..=order {
        let mut acc = r[k];
        for j in 1..k {
            acc += a[j] * r[k - j];
        }
        let refl = -acc / e;
        let mut new_a = a.clone();
        for j in 1..k {
            new_a[j] = a[j] + refl * a[k - j];
        }
        new_a[k] = refl;
        a = new_a;
        e *= 1.0 - refl * refl;
        if e <= 0.0 {
            return Err(Error::RankDeficient { detail: "Levinson recursion broke down".into() });
        }
    }
    Ok((a, e.sqrt()))
}

/// Deterministic sub-seed derivation: hashes `(master, label)` so adding new
/// experiments never shifts existing random streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}
