//! One-shot VRFT tuning of a fixed-structure controller, with optional
//! instrumental-variable correction and an optional data-driven stability
//! constraint (c-VRFT). Used standalone as a baseline and to populate the
//! meta-dataset.

use crate::error::{Error, Result};
use crate::lti::{self, Basis, ControllerParams, TransferFunction};
use crate::signals::{self, Dataset};
use crate::solver::{min_radius_level, polygon_rows, ConeCut, Qp};
use crate::spectral::{ConstraintSpectra, SpectralGrid};
use nalgebra::{DMatrix, DVector};

/// Stability constraint request for c-VRFT.
#[derive(Debug, Clone, Copy)]
pub struct StabilitySpec {
    pub delta: f64,
    pub window: usize,
}

/// A complete one-shot tuning problem.
#[derive(Debug, Clone)]
pub struct VrftProblem {
    pub dataset: Dataset,
    /// Repeated experiment with the same input and independent noise.
    pub dataset_iv: Option<Dataset>,
    pub m: TransferFunction,
    /// User weighting (the W/F filter of the matching loss). Unit leaves the
    /// classical VRFT filter; `low_freq_weighting` restores integral-action
    /// identifiability on short records.
    pub w: TransferFunction,
    pub basis: Basis,
    pub stability: Option<StabilitySpec>,
    /// Treat the input spectrum as flat (scalar prefilter normalization).
    pub white_input: bool,
}

#[derive(Debug, Clone)]
pub struct VrftOutcome {
    pub params: ControllerParams,
    /// Window length actually used when the stability constraint was active.
    pub ell: Option<usize>,
    /// Post-hoc stability index of the returned controller at that window.
    pub delta_hat: Option<f64>,
}

/// First-order low-frequency emphasis `1 / (1 - 0.999 q^-1)`.
///
/// The classical VRFT prefilter carries a factor `1 - M` that removes all
/// steady-state information from the regression, which on records much
/// shorter than the plant's dominant time constant leaves the integral gain
/// essentially unidentified. Weighting the loss toward the band below the
/// reference bandwidth restores it without using any plant knowledge.
pub fn low_freq_weighting(sample_time: f64) -> TransferFunction {
    TransferFunction::new(vec![1.0], vec![1.0, -0.999], sample_time).unwrap()
}

/// Filtered regression data shared by every tuning path.
struct Regression {
    u_l: Vec<f64>,
    /// Rows: time (valid range); columns: basis functions. phi(t) = beta(q^-1) e_v^L(t).
    phi: DMatrix<f64>,
    /// Instrument matrix from the repeated experiment, when available.
    zeta: Option<DMatrix<f64>>,
}

fn assemble(problem: &VrftProblem) -> Result<Regression> {
    let d = &problem.dataset;
    let l = signals::design_prefilter(&problem.m, &problem.w, &d.u, problem.white_input)?;
    let vr = signals::virtual_reference(&problem.m, &d.y)?;
    let valid = vr.valid.clone();
    let e_v: Vec<f64> = valid.clone().map(|t| vr.r_v[t] - d.y[t]).collect();
    let u_l_full = lti::simulate(&l, &d.u)?;
    let u_l = u_l_full[valid.clone()].to_vec();
    let e_v_l = lti::simulate(&l, &e_v)?;
    let beta = problem.basis.functions(problem.m.sample_time);
    let filt_bank = |sig: &[f64]| -> Result<DMatrix<f64>> {
        let cols = beta
            .iter()
            .map(|b| lti::simulate(b, sig))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(sig.len(), beta.len(), |r, c| cols[c][r]))
    };
    let phi = filt_bank(&e_v_l)?;
    let zeta = match &problem.dataset_iv {
        None => None,
        Some(div) => {
            if div.u.len() != d.u.len() {
                return Err(Error::LengthMismatch { left: div.u.len(), right: d.u.len() });
            }
            let max_du = div
                .u
                .iter()
                .zip(&d.u)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if max_du > 1e-12 {
                return Err(Error::InputMismatch { max_abs_diff: max_du });
            }
            let vr2 = signals::virtual_reference(&problem.m, &div.y)?;
            let e_v2: Vec<f64> = valid.clone().map(|t| vr2.r_v[t] - div.y[t]).collect();
            let e_v2_l = lti::simulate(&l, &e_v2)?;
            Some(filt_bank(&e_v2_l)?)
        }
    };
    Ok(Regression { u_l, phi, zeta })
}

fn check_rank(gram: &DMatrix<f64>, basis: Basis) -> Result<()> {
    let svd = gram.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax.max(1e-300) {
        // Name the weakest basis direction for the error message.
        let eig = gram.clone().symmetric_eigen();
        let (idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let v = eig.eigenvectors.column(idx);
        let (worst, _) = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        return Err(Error::RankDeficient {
            detail: format!("basis {basis:?} direction {worst} is unexcited"),
        });
    }
    Ok(())
}

/// Tune the controller. Plain least squares by default; instrumental
/// variable normal equations when a repeated experiment is present; and a
/// per-frequency stability-constrained minimization when requested.
pub fn vrft_tune(problem: &VrftProblem) -> Result<VrftOutcome> {
    let reg = assemble(problem)?;
    let ts = problem.m.sample_time;
    match &problem.stability {
        None => {
            let theta = match &reg.zeta {
                None => {
                    let gram = reg.phi.transpose() * &reg.phi;
                    check_rank(&gram, problem.basis)?;
                    let rhs = reg.phi.transpose() * DVector::from_vec(reg.u_l.clone());
                    gram.lu().solve(&rhs).ok_or_else(|| Error::RankDeficient {
                        detail: "normal equations singular".into(),
                    })?
                }
                Some(zeta) => {
                    let a = zeta.transpose() * &reg.phi;
                    check_rank(&a, problem.basis)?;
                    let rhs = zeta.transpose() * DVector::from_vec(reg.u_l.clone());
                    a.lu().solve(&rhs).ok_or_else(|| Error::RankDeficient {
                        detail: "IV normal equations singular".into(),
                    })?
                }
            };
            let params =
                ControllerParams::new(problem.basis, theta.iter().copied().collect(), ts)?;
            Ok(VrftOutcome { params, ell: None, delta_hat: None })
        }
        Some(spec) => constrained_tune(problem, &reg, spec),
    }
}

/// Weighted least squares (IV weights when available) under the polygonal
/// stability cuts, with the window fallback ladder: try the configured
/// window first, otherwise scan 10, 20, 40, ... and keep the largest
/// window the solver can handle.
fn constrained_tune(
    problem: &VrftProblem,
    reg: &Regression,
    spec: &StabilitySpec,
) -> Result<VrftOutcome> {
    let ts = problem.m.sample_time;
    let n = problem.basis.dimension();
    // Quadratic data: sum_t w_t (u_l - phi' theta)^2 with w_t = |zeta(t)|^2.
    let weights: Vec<f64> = match &reg.zeta {
        Some(z) => (0..z.nrows()).map(|t| z.row(t).norm_squared()).collect(),
        None => vec![1.0; reg.u_l.len()],
    };
    let mut q = DMatrix::zeros(n, n);
    let mut lin = DVector::zeros(n);
    let mut constant = 0.0;
    for t in 0..reg.u_l.len() {
        let w = weights[t];
        let row = reg.phi.row(t).transpose();
        q += w * &row * row.transpose();
        lin -= w * reg.u_l[t] * &row;
        constant += w * reg.u_l[t] * reg.u_l[t];
    }
    let scale = constant.max(q.amax()).max(1e-300);
    let q = q * (2.0 / scale);
    let lin = lin * (2.0 / scale);

    let basis_tfs = problem.basis.functions(ts);
    let max_window = (problem.dataset.len().saturating_sub(1)) / 2;
    let mut ladder = vec![spec.window.min(max_window)];
    let mut w = 10;
    while w < spec.window.min(max_window) {
        ladder.push(w);
        w *= 2;
    }
    let mut best: Option<(DVector<f64>, usize, f64)> = None;
    let mut min_feasible_seen = f64::INFINITY;
    for (rank, &ell) in ladder.iter().enumerate() {
        match attempt_window(problem, &q, &lin, &basis_tfs, ell, spec.delta) {
            Ok((theta, dh)) => {
                let better = match &best {
                    None => true,
                    Some((_, bl, _)) => ell > *bl,
                };
                if better {
                    best = Some((theta, ell, dh));
                }
                if rank == 0 {
                    break; // the configured window worked outright
                }
            }
            Err(Error::InfeasibleDelta { min_feasible, .. }) => {
                min_feasible_seen = min_feasible_seen.min(min_feasible);
            }
            Err(_) => {}
        }
    }
    match best {
        Some((theta, ell, dh)) => {
            let params =
                ControllerParams::new(problem.basis, theta.iter().copied().collect(), ts)?;
            Ok(VrftOutcome { params, ell: Some(ell), delta_hat: Some(dh) })
        }
        None => {
            if min_feasible_seen.is_finite() {
                Err(Error::InfeasibleDelta {
                    requested: spec.delta,
                    min_feasible: min_feasible_seen,
                })
            } else {
                Err(Error::SolverFailure {
                    detail: "stability-constrained tuning failed at every window".into(),
                })
            }
        }
    }
}

fn attempt_window(
    problem: &VrftProblem,
    q: &DMatrix<f64>,
    lin: &DVector<f64>,
    basis_tfs: &[TransferFunction],
    ell: usize,
    delta: f64,
) -> Result<(DVector<f64>, f64)> {
    let grid = SpectralGrid::new(ell);
    let spectra = ConstraintSpectra::new(&problem.dataset, &problem.m, basis_tfs, &grid)?;
    let n = basis_tfs.len();
    let mut cones = Vec::with_capacity(spectra.phi_u.len());
    for i in 0..spectra.phi_u.len() {
        let denom = spectra.phi_u[i].abs();
        if denom < 1e-12 {
            return Err(Error::NotExciting { omega: grid.frequencies[i] });
        }
        cones.push(ConeCut {
            base: spectra.base[i],
            components: spectra.components.iter().map(|c| c[i]).collect(),
            radius: delta * denom,
        });
    }
    // Feasibility probe before the constrained solve.
    let weights: Vec<f64> = spectra.phi_u.iter().map(|p| p.abs()).collect();
    let (_, t_min) = min_radius_level(
        &cones,
        &weights,
        n,
        &DMatrix::zeros(0, n),
        &DVector::zeros(0),
        &DMatrix::zeros(0, n),
        &DVector::zeros(0),
    )?;
    if t_min > delta {
        return Err(Error::InfeasibleDelta { requested: delta, min_feasible: t_min });
    }
    let (g_ineq, h_ineq) = polygon_rows(&cones, n);
    let qp = Qp {
        q: q.clone(),
        g: lin.clone(),
        g_ineq,
        h_ineq,
        a_eq: DMatrix::zeros(0, n),
        b_eq: DVector::zeros(0),
    };
    let sol = qp.solve(1e-10)?;
    let alpha: Vec<f64> = sol.x.iter().copied().collect();
    let dh = spectra.delta_hat(&alpha)?;
    Ok((sol.x, dh))
}

/// Configuration for building one meta-dataset entry.
#[derive(Debug, Clone)]
pub struct EntryConfig {
    pub m: TransferFunction,
    pub w: TransferFunction,
    pub basis: Basis,
    pub stability: Option<StabilitySpec>,
    /// Closed-loop test reference (the prefixed benchmark step).
    pub reference: Vec<f64>,
    pub test_noise_std: f64,
    pub test_seed: u64,
}

/// Tune a meta-dataset controller from its open-loop records and run the
/// closed-loop test. Entries whose test run diverges are rejected.
pub fn build_meta_controller_entry(
    plant: &TransferFunction,
    open_loop: &Dataset,
    open_loop_iv: &Dataset,
    cfg: &EntryConfig,
) -> Result<(ControllerParams, Dataset)> {
    let problem = VrftProblem {
        dataset: open_loop.clone(),
        dataset_iv: Some(open_loop_iv.clone()),
        m: cfg.m.clone(),
        w: cfg.w.clone(),
        basis: cfg.basis,
        stability: cfg.stability,
        white_input: true,
    };
    let outcome = vrft_tune(&problem)?;
    let ctf = outcome.params.to_tf();
    let closed = signals::simulate_closed_loop(
        plant,
        &ctf,
        &cfg.reference,
        cfg.test_noise_std,
        cfg.test_seed,
    )?;
    if closed.diverged || closed.len() < cfg.reference.len() {
        return Err(Error::Unstable);
    }
    Ok((outcome.params, closed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::poly_mul;
    use crate::signals::{gaussian_noise, generate_open_loop};

    const TS: f64 = 0.02;

    fn m_ref() -> TransferFunction {
        TransferFunction::new(vec![0.0, 0.0609], vec![1.0, -0.9391], TS).unwrap()
    }

    fn motor(k: f64, p2: f64) -> TransferFunction {
        TransferFunction::new(vec![0.0, 0.0, k], poly_mul(&[1.0, -0.9975], &[1.0, -p2]), TS)
            .unwrap()
    }

    fn problem(d: Dataset, iv: Option<Dataset>, w: TransferFunction) -> VrftProblem {
        VrftProblem {
            dataset: d,
            dataset_iv: iv,
            m: m_ref(),
            w,
            basis: Basis::Pi,
            stability: None,
            white_input: true,
        }
    }

    /// Plant whose ideal controller is exactly the PI (kp, ki):
    /// G = M / (C (1 - M)).
    fn plant_with_ideal_pi(kp: f64, ki: f64) -> TransferFunction {
        let m = m_ref();
        let xi = TransferFunction::unit(TS).sub(&m);
        let c = ControllerParams::new(Basis::Pi, vec![kp, ki], TS).unwrap().to_tf();
        m.mul(&c.inverse().unwrap()).mul(&xi.inverse().unwrap()).minimal()
    }

    #[test]
    fn recovers_ideal_controller_in_class() {
        let (kp, ki) = (0.05, 0.5);
        let g = plant_with_ideal_pi(kp, ki);
        let u = gaussian_noise(2.0, 2000, 3);
        let d = generate_open_loop(&g, &u, 0.0, 0).unwrap();
        let out = vrft_tune(&problem(d, None, TransferFunction::unit(TS))).unwrap();
        let th = &out.params.theta;
        assert!((th[0] - kp).abs() / kp < 1e-6, "kp {}", th[0]);
        assert!((th[1] - ki).abs() / ki < 1e-6, "ki {}", th[1]);
    }

    #[test]
    fn least_squares_is_scale_invariant() {
        let g = motor(3.0, 0.5);
        let u = gaussian_noise(2.0, 550, 5);
        let d = generate_open_loop(&g, &u, 0.0, 0).unwrap();
        let mut scaled = d.clone();
        scaled.u.iter_mut().for_each(|x| *x *= 7.0);
        scaled.y.iter_mut().for_each(|x| *x *= 7.0);
        let t1 = vrft_tune(&problem(d, None, TransferFunction::unit(TS))).unwrap();
        let t2 = vrft_tune(&problem(scaled, None, TransferFunction::unit(TS))).unwrap();
        for (a, b) in t1.params.theta.iter().zip(&t2.params.theta) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn iv_equals_least_squares_on_noise_free_data() {
        let g = motor(2.0, 0.3);
        let u = gaussian_noise(2.0, 550, 7);
        let d = generate_open_loop(&g, &u, 0.0, 0).unwrap();
        let ls = vrft_tune(&problem(d.clone(), None, TransferFunction::unit(TS))).unwrap();
        let iv = vrft_tune(&problem(d.clone(), Some(d), TransferFunction::unit(TS))).unwrap();
        for (a, b) in ls.params.theta.iter().zip(&iv.params.theta) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn normal_equation_residual_is_tiny_and_theta_locally_optimal() {
        let g = motor(4.0, 0.6);
        let u = gaussian_noise(2.0, 550, 9);
        let d = generate_open_loop(&g, &u, 10.0, 10).unwrap();
        let pr = problem(d, None, low_freq_weighting(TS));
        let out = vrft_tune(&pr).unwrap();
        let reg = assemble(&pr).unwrap();
        let theta = DVector::from_vec(out.params.theta.clone());
        let resid = reg.phi.transpose()
            * (DVector::from_vec(reg.u_l.clone()) - &reg.phi * &theta);
        let scale = (reg.phi.transpose() * &reg.phi).amax();
        assert!(resid.amax() <= 1e-8 * scale, "residual {}", resid.amax());

        let objective = |th: &DVector<f64>| {
            let r = DVector::from_vec(reg.u_l.clone()) - &reg.phi * th;
            r.norm_squared()
        };
        let j0 = objective(&theta);
        let mut state = 0xabcdef12345u64;
        for _ in 0..100 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let a = (state >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
            let dth = DVector::from_vec(vec![1e-3 * a.cos(), 1e-3 * a.sin()]);
            assert!(objective(&(&theta + dth)) >= j0 - 1e-12);
        }
    }

    #[test]
    fn unconstrained_vrft_destabilizes_often_constrained_rescues() {
        // Short noisy records leave the integral gain poorly identified;
        // the unconstrained baseline destabilizes a large share of motors.
        let mut unstable_plain = 0;
        let mut unstable_con = 0;
        let trials = 12;
        for i in 0..trials {
            let seed = 100 + i as u64;
            let k = 1.0 + 4.75 * (i as f64 / trials as f64);
            let p2 = 0.9 * ((i * 7 % trials) as f64 / trials as f64);
            let g = motor(k, p2);
            let u = gaussian_noise(2.0, 550, seed);
            let d = generate_open_loop(&g, &u, 10.0, seed + 1000).unwrap();
            let div = generate_open_loop(&g, &u, 10.0, seed + 2000).unwrap();
            let plain = problem(d.clone(), Some(div.clone()), TransferFunction::unit(TS));
            if let Ok(out) = vrft_tune(&plain) {
                let (cl, _) = lti::feedback(&out.params.to_tf(), &g).unwrap();
                if !lti::is_stable(&cl, 1e-9).unwrap() {
                    unstable_plain += 1;
                }
            }
            let mut con = problem(d, Some(div), low_freq_weighting(TS));
            con.stability = Some(StabilitySpec { delta: 0.5, window: 200 });
            if let Ok(out) = vrft_tune(&con) {
                let (cl, _) = lti::feedback(&out.params.to_tf(), &g).unwrap();
                if !lti::is_stable(&cl, 1e-9).unwrap() {
                    unstable_con += 1;
                }
            } else {
                unstable_con += 1;
            }
        }
        assert!(
            unstable_plain >= trials / 3,
            "plain VRFT unstable on only {unstable_plain}/{trials}"
        );
        assert!(
            unstable_con < unstable_plain,
            "constraint did not help: {unstable_con} vs {unstable_plain}"
        );
    }

    #[test]
    fn entry_builder_returns_closed_loop_record() {
        let g = motor(3.0, 0.4);
        let u = gaussian_noise(2.0, 550, 21);
        let d = generate_open_loop(&g, &u, 10.0, 22).unwrap();
        let div = generate_open_loop(&g, &u, 10.0, 23).unwrap();
        let cfg = EntryConfig {
            m: m_ref(),
            w: low_freq_weighting(TS),
            basis: Basis::Pi,
            stability: Some(StabilitySpec { delta: 0.5, window: 200 }),
            reference: vec![1000.0; 150],
            test_noise_std: 10.0,
            test_seed: 24,
        };
        let (params, closed) = build_meta_controller_entry(&g, &d, &div, &cfg).unwrap();
        assert_eq!(closed.len(), 150);
        assert!(!closed.diverged);
        assert_eq!(params.theta.len(), 2);
    }

    #[test]
    fn entry_builder_perfect_matching_when_ideal_in_class() {
        let (kp, ki) = (0.05, 0.5);
        let g = plant_with_ideal_pi(kp, ki);
        let u = gaussian_noise(2.0, 2000, 31);
        let d = generate_open_loop(&g, &u, 0.0, 0).unwrap();
        let cfg = EntryConfig {
            m: m_ref(),
            w: TransferFunction::unit(TS),
            basis: Basis::Pi,
            stability: None,
            reference: vec![1000.0; 300],
            test_noise_std: 0.0,
            test_seed: 0,
        };
        let (_, closed) = build_meta_controller_entry(&g, &d, &d, &cfg).unwrap();
        let y_d = lti::simulate(&m_ref(), &vec![1000.0; 300]).unwrap();
        // After the transient the loop tracks the reference model exactly.
        for t in 50..300 {
            assert!((closed.y[t] - y_d[t]).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn repeated_noise_seeds_give_comparable_matching() {
        let g = motor(2.5, 0.2);
        let u = gaussian_noise(2.0, 550, 41);
        let y_d = lti::simulate(&m_ref(), &vec![1000.0; 150]).unwrap();
        let mut errs = Vec::new();
        for s in [50u64, 60u64] {
            let d = generate_open_loop(&g, &u, 10.0, s).unwrap();
            let div = generate_open_loop(&g, &u, 10.0, s + 1).unwrap();
            let cfg = EntryConfig {
                m: m_ref(),
                w: low_freq_weighting(TS),
                basis: Basis::Pi,
                stability: Some(StabilitySpec { delta: 0.5, window: 200 }),
                reference: vec![1000.0; 150],
                test_noise_std: 10.0,
                test_seed: s + 2,
            };
            let (_, closed) = build_meta_controller_entry(&g, &d, &div, &cfg).unwrap();
            let err: f64 = closed
                .y
                .iter()
                .zip(&y_d)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        let ratio = errs[0].max(errs[1]) / errs[0].min(errs[1]);
        assert!(ratio < 2.0, "errors {errs:?}");
    }
}
