//! Assembly and solution of the data-driven meta-design problem: the
//! instrumental-variable matching loss over the simplex of controller
//! combinations, similarity and performance regularizers, and the optional
//! per-frequency stability constraints.

use crate::error::{Error, Result};
use crate::lti::{self, ControllerParams, TransferFunction};
use crate::signals::{self, Dataset};
use crate::solver::{min_radius_level, polygon_rows, ConeCut, Qp};
use crate::spectral::{ConstraintSpectra, SpectralGrid};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// One meta-dataset record: a tuned controller, the open-loop data used to
/// tune it, its closed-loop test record, and the stability level assumed
/// for it.
#[derive(Debug, Clone)]
pub struct MetaEntry {
    pub controller: ControllerParams,
    pub open_loop: Dataset,
    pub closed_loop: Dataset,
    pub delta_k: f64,
}

#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub entries: Vec<MetaEntry>,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn controller_tfs(&self) -> Vec<TransferFunction> {
        self.entries.iter().map(|e| e.controller.to_tf()).collect()
    }

    /// Nested prefix subset (the size-sweep protocol).
    pub fn prefix(&self, n: usize) -> MetaDataset {
        MetaDataset { entries: self.entries[..n.min(self.entries.len())].to_vec() }
    }
}

/// Convex-combination weights over the meta-dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaWeights {
    pub alpha: Vec<f64>,
}

impl MetaWeights {
    pub fn uniform(n: usize) -> Self {
        MetaWeights { alpha: vec![1.0 / n as f64; n] }
    }

    pub fn vertex(n: usize, k: usize) -> Self {
        let mut alpha = vec![0.0; n];
        alpha[k] = 1.0;
        MetaWeights { alpha }
    }

    /// Simplex feasibility within tolerance.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.alpha.iter().all(|a| *a >= -tol)
            && (self.alpha.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// All tunables of the meta-design step.
#[derive(Debug, Clone, Serialize)]
pub struct DesignConfig {
    pub lambda_j: f64,
    pub lambda_s: f64,
    /// Stability constraint level; `None` disables the constraint.
    pub delta: Option<f64>,
    /// Correlation window for the stability grid.
    pub ell: usize,
    pub solver_tol: f64,
    pub max_iter: usize,
    pub white_input: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            lambda_j: 30.0,
            lambda_s: 300.0,
            delta: None,
            ell: 200,
            solver_tol: 1e-10,
            max_iter: 80,
            white_input: true,
        }
    }
}

/// Similarity proxy: summed squared difference of the measured open-loop
/// outputs under the shared input.
pub fn similarity_index(d_new: &Dataset, d_k: &Dataset) -> Result<f64> {
    if d_new.len() != d_k.len() {
        return Err(Error::LengthMismatch { left: d_new.len(), right: d_k.len() });
    }
    let max_du = d_new
        .u
        .iter()
        .zip(&d_k.u)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if max_du > 1e-12 {
        return Err(Error::InputMismatch { max_abs_diff: max_du });
    }
    Ok(d_new
        .y
        .iter()
        .zip(&d_k.y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Performance proxy: summed squared closed-loop matching error against the
/// desired output.
pub fn performance_index(desired: &[f64], closed_loop: &Dataset) -> Result<f64> {
    if desired.len() != closed_loop.len() {
        return Err(Error::LengthMismatch { left: desired.len(), right: closed_loop.len() });
    }
    Ok(desired
        .iter()
        .zip(&closed_loop.y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Exact quadratic form of the IV matching loss:
/// `J(alpha) = alpha' H alpha - 2 f' alpha + c`.
#[derive(Debug, Clone)]
pub struct IvObjective {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: f64,
    /// Condition warning: `H` is near-singular beyond 1e12.
    pub ill_conditioned: bool,
}

impl IvObjective {
    pub fn eval(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        a.dot(&(&self.h * &a)) - 2.0 * self.f.dot(&a) + self.c
    }
}

/// Build the IV quadratic from the new plant's two experiments and the
/// meta-dataset's controllers. The regressor stacks the controllers applied
/// to the filtered virtual error of the first experiment; the instrument
/// repeats the construction on the second.
pub fn build_iv_objective(
    d_t: &Dataset,
    d_t_iv: &Dataset,
    meta: &MetaDataset,
    m: &TransferFunction,
    w: &TransferFunction,
    white_input: bool,
) -> Result<IvObjective> {
    if d_t.len() != d_t_iv.len() {
        return Err(Error::LengthMismatch { left: d_t.len(), right: d_t_iv.len() });
    }
    let max_du = d_t
        .u
        .iter()
        .zip(&d_t_iv.u)
        .fold(0.0f64, |mx, (a, b)| mx.max((a - b).abs()));
    if max_du > 1e-12 {
        return Err(Error::InputMismatch { max_abs_diff: max_du });
    }
    let l = signals::design_prefilter(m, w, &d_t.u, white_input)?;
    let vr = signals::virtual_reference(m, &d_t.y)?;
    let valid = vr.valid.clone();
    let e_v: Vec<f64> = valid.clone().map(|t| vr.r_v[t] - d_t.y[t]).collect();
    let u_l_full = lti::simulate(&l, &d_t.u)?;
    let u_l = &u_l_full[valid.clone()];
    let e_v_l = lti::simulate(&l, &e_v)?;
    let vr2 = signals::virtual_reference(m, &d_t_iv.y)?;
    let e_v2: Vec<f64> = valid.clone().map(|t| vr2.r_v[t] - d_t_iv.y[t]).collect();
    let e_v2_l = lti::simulate(&l, &e_v2)?;

    let ctfs = meta.controller_tfs();
    let n = ctfs.len();
    let phi: Vec<Vec<f64>> = ctfs
        .iter()
        .map(|c| lti::simulate(c, &e_v_l))
        .collect::<Result<Vec<_>>>()?;
    let zeta: Vec<Vec<f64>> = ctfs
        .iter()
        .map(|c| lti::simulate(c, &e_v2_l))
        .collect::<Result<Vec<_>>>()?;

    let mut h = DMatrix::zeros(n, n);
    let mut f = DVector::zeros(n);
    let mut c = 0.0;
    for t in 0..u_l.len() {
        let wt: f64 = (0..n).map(|k| zeta[k][t] * zeta[k][t]).sum();
        for i in 0..n {
            f[i] += wt * u_l[t] * phi[i][t];
            for j in 0..n {
                h[(i, j)] += wt * phi[i][t] * phi[j][t];
            }
        }
        c += wt * u_l[t] * u_l[t];
    }
    let svd = h.clone().svd(false, false);
    let ill = svd.singular_values.min() <= 1e-12 * svd.singular_values.max();
    Ok(IvObjective { h, f, c, ill_conditioned: ill })
}

/// Everything the solver reports alongside the weights.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    /// Normalized objective value (the solved objective divided by its data
    /// scale; positive scaling does not move the minimizer).
    pub objective: f64,
    /// Same objective in raw data units.
    pub objective_raw: f64,
    /// The normalization scale: `objective_raw = objective * scale`.
    pub scale: f64,
    /// Post-hoc stability index of the returned weights, when computable.
    pub delta_hat: Option<f64>,
    /// Window actually used by the stability constraint.
    pub ell: Option<usize>,
    pub active_constraints: Vec<usize>,
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub ill_conditioned: bool,
    pub timings_ms: f64,
    /// Similarity and performance index tables used by the regularizers.
    pub similarity: Vec<f64>,
    pub performance: Vec<f64>,
}

/// Solve the meta-design problem:
/// minimize `J_iv(alpha) + lambda_j sum_k Jt_k alpha_k^2 + lambda_s sum_k S_k alpha_k`
/// over the simplex, optionally under `|Phi_{u,e_s}(w_i)| <= delta |Phi_u(w_i)|`.
pub fn solve_meta(
    objective: &IvObjective,
    meta: &MetaDataset,
    config: &DesignConfig,
    d_t: &Dataset,
    m: &TransferFunction,
) -> Result<(MetaWeights, SolveReport)> {
    let start = std::time::Instant::now();
    if meta.is_empty() {
        return Err(Error::EmptyMetaDataset);
    }
    let n = meta.len();
    let similarity: Vec<f64> = meta
        .entries
        .iter()
        .map(|e| similarity_index(d_t, &e.open_loop))
        .collect::<Result<Vec<_>>>()?;
    let performance: Vec<f64> = meta
        .entries
        .iter()
        .map(|e| {
            let r = e
                .closed_loop
                .reference
                .as_ref()
                .ok_or(Error::InvalidArgument { detail: "closed-loop record lacks reference".into() })?;
            let desired = lti::simulate(m, r)?;
            performance_index(&desired, &e.closed_loop)
        })
        .collect::<Result<Vec<_>>>()?;

    // Normalize every term by one positive scale so the solver works near
    // unit magnitude; the minimizer is unaffected.
    let scale = objective
        .c
        .abs()
        .max(objective.h.amax())
        .max(config.lambda_j * performance.iter().fold(0.0f64, |a, b| a.max(*b)))
        .max(config.lambda_s * similarity.iter().fold(0.0f64, |a, b| a.max(*b)))
        .max(1e-300);

    let mut q = objective.h.clone() * (2.0 / scale);
    for k in 0..n {
        q[(k, k)] += 2.0 * config.lambda_j * performance[k] / scale;
    }
    let g = DVector::from_fn(n, |k, _| {
        (-2.0 * objective.f[k] + config.lambda_s * similarity[k]) / scale
    });

    let raw_objective = |alpha: &[f64]| -> f64 {
        objective.eval(alpha)
            + config.lambda_j
                * performance
                    .iter()
                    .zip(alpha)
                    .map(|(j, a)| j * a * a)
                    .sum::<f64>()
            + config.lambda_s
                * similarity
                    .iter()
                    .zip(alpha)
                    .map(|(s, a)| s * a)
                    .sum::<f64>()
    };

    if n == 1 {
        let alpha = MetaWeights { alpha: vec![1.0] };
        let raw = raw_objective(&alpha.alpha);
        let report = SolveReport {
            objective: raw / scale,
            objective_raw: raw,
            scale,
            delta_hat: post_hoc_delta(d_t, m, meta, &alpha.alpha, config.ell),
            ell: None,
            active_constraints: vec![],
            duality_gap: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            ill_conditioned: objective.ill_conditioned,
            timings_ms: start.elapsed().as_secs_f64() * 1e3,
            similarity,
            performance,
        };
        return Ok((alpha, report));
    }

    let neg_i = -DMatrix::<f64>::identity(n, n);
    let zeros_n = DVector::zeros(n);
    let ones_row = DMatrix::from_element(1, n, 1.0);
    let one = DVector::from_element(1, 1.0);

    let solve_at = |g_ineq: DMatrix<f64>, h_ineq: DVector<f64>| -> Result<crate::solver::QpSolution> {
        let qp = Qp {
            q: q.clone(),
            g: g.clone(),
            g_ineq,
            h_ineq,
            a_eq: ones_row.clone(),
            b_eq: one.clone(),
        };
        qp.solve(config.solver_tol)
    };

    let (solution, used_ell) = match config.delta {
        None => (solve_at(neg_i.clone(), zeros_n.clone())?, None),
        Some(delta) => {
            let max_window = d_t.len().saturating_sub(1) / 2;
            let mut ladder = vec![config.ell.min(max_window)];
            let mut wdw = 10;
            while wdw < config.ell.min(max_window) {
                ladder.push(wdw);
                wdw *= 2;
            }
            let ctfs = meta.controller_tfs();
            let mut best: Option<(crate::solver::QpSolution, usize)> = None;
            let mut min_feasible = f64::INFINITY;
            for (rank, &ell) in ladder.iter().enumerate() {
                match constrained_attempt(
                    d_t, m, &ctfs, ell, delta, &neg_i, &zeros_n, &ones_row, &one, &solve_at,
                ) {
                    Ok(sol) => {
                        let better = best.as_ref().map_or(true, |(_, bl)| ell > *bl);
                        if better {
                            best = Some((sol, ell));
                        }
                        if rank == 0 {
                            break;
                        }
                    }
                    Err(Error::InfeasibleDelta { min_feasible: t, .. }) => {
                        min_feasible = min_feasible.min(t);
                    }
                    Err(_) => {}
                }
            }
            match best {
                Some((sol, ell)) => (sol, Some(ell)),
                None => {
                    return Err(if min_feasible.is_finite() {
                        Error::InfeasibleDelta { requested: delta, min_feasible }
                    } else {
                        Error::SolverFailure {
                            detail: "constrained solve failed at every window".into(),
                        }
                    });
                }
            }
        }
    };

    // Clean tiny interior-point slack off the simplex.
    let mut alpha: Vec<f64> = solution.x.iter().map(|a| a.max(0.0)).collect();
    let sum: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= sum);
    let weights = MetaWeights { alpha };
    debug_assert!(weights.is_feasible(1e-8));

    let raw = raw_objective(&weights.alpha);
    let report = SolveReport {
        objective: raw / scale,
        objective_raw: raw,
        scale,
        delta_hat: post_hoc_delta(d_t, m, meta, &weights.alpha, used_ell.unwrap_or(config.ell)),
        ell: used_ell,
        active_constraints: solution.active,
        duality_gap: solution.duality_gap,
        primal_residual: solution.primal_residual,
        dual_residual: solution.dual_residual,
        iterations: solution.iterations,
        ill_conditioned: objective.ill_conditioned,
        timings_ms: start.elapsed().as_secs_f64() * 1e3,
        similarity,
        performance,
    };
    Ok((weights, report))
}

#[allow(clippy::too_many_arguments)]
fn constrained_attempt(
    d_t: &Dataset,
    m: &TransferFunction,
    ctfs: &[TransferFunction],
    ell: usize,
    delta: f64,
    neg_i: &DMatrix<f64>,
    zeros_n: &DVector<f64>,
    ones_row: &DMatrix<f64>,
    one: &DVector<f64>,
    solve_at: &dyn Fn(DMatrix<f64>, DVector<f64>) -> Result<crate::solver::QpSolution>,
) -> Result<crate::solver::QpSolution> {
    let n = ctfs.len();
    let grid = SpectralGrid::new(ell);
    let spectra = ConstraintSpectra::new(d_t, m, ctfs, &grid)?;
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
    // Feasibility probe over the simplex estimates the minimal level.
    let weights: Vec<f64> = spectra.phi_u.iter().map(|p| p.abs()).collect();
    let (_, t_min) = min_radius_level(&cones, &weights, n, neg_i, zeros_n, ones_row, one)?;
    if t_min > delta {
        return Err(Error::InfeasibleDelta { requested: delta, min_feasible: t_min });
    }
    let (g_cone, h_cone) = polygon_rows(&cones, n);
    let rows = n + g_cone.nrows();
    let mut g_all = DMatrix::zeros(rows, n);
    g_all.view_mut((0, 0), (n, n)).copy_from(neg_i);
    g_all.view_mut((n, 0), (g_cone.nrows(), n)).copy_from(&g_cone);
    let mut h_all = DVector::zeros(rows);
    h_all.rows_mut(n, h_cone.len()).copy_from(&h_cone);
    solve_at(g_all, h_all)
}

fn post_hoc_delta(
    d_t: &Dataset,
    m: &TransferFunction,
    meta: &MetaDataset,
    alpha: &[f64],
    ell: usize,
) -> Option<f64> {
    let grid = SpectralGrid::new(ell.min(d_t.len().saturating_sub(1) / 2));
    crate::spectral::delta_hat(d_t, m, &meta.controller_tfs(), alpha, &grid).ok()
}

/// The convex combination of the meta-dataset controllers. For a shared
/// parameterization this is the controller at the combined parameters.
pub fn materialize_meta_controller(meta: &MetaDataset, weights: &MetaWeights) -> TransferFunction {
    match materialize_params(meta, weights) {
        Some(p) => p.to_tf(),
        None => {
            let mut acc =
                TransferFunction::constant(0.0, meta.entries[0].controller.sample_time);
            for (a, e) in weights.alpha.iter().zip(&meta.entries) {
                acc = acc.add(&e.controller.to_tf().scale(*a));
            }
            acc
        }
    }
}

/// Combined parameters when all entries share one basis.
pub fn materialize_params(meta: &MetaDataset, weights: &MetaWeights) -> Option<ControllerParams> {
    let first = &meta.entries[0].controller;
    if !meta
        .entries
        .iter()
        .all(|e| e.controller.basis == first.basis && e.controller.sample_time == first.sample_time)
    {
        return None;
    }
    let dim = first.theta.len();
    let mut theta = vec![0.0; dim];
    for (a, e) in weights.alpha.iter().zip(&meta.entries) {
        for (acc, th) in theta.iter_mut().zip(&e.controller.theta) {
            *acc += a * th;
        }
    }
    ControllerParams::new(first.basis, theta, first.sample_time).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{poly_mul, Basis};
    use crate::signals::{gaussian_noise, generate_open_loop, simulate_closed_loop};

    const TS: f64 = 0.02;

    fn m_ref() -> TransferFunction {
        TransferFunction::new(vec![0.0, 0.0609], vec![1.0, -0.9391], TS).unwrap()
    }

    fn motor(k: f64, p2: f64) -> TransferFunction {
        TransferFunction::new(vec![0.0, 0.0, k], poly_mul(&[1.0, -0.9975], &[1.0, -p2]), TS)
            .unwrap()
    }

    fn pi(kp: f64, ki: f64) -> ControllerParams {
        ControllerParams::new(Basis::Pi, vec![kp, ki], TS).unwrap()
    }

    fn toy_meta(u: &[f64], plants: &[(f64, f64)], gains: &[(f64, f64)], seed0: u64) -> MetaDataset {
        let m = m_ref();
        let r = vec![1000.0; 150];
        let entries = plants
            .iter()
            .zip(gains)
            .enumerate()
            .map(|(k, (&(kk, p2), &(kp, ki)))| {
                let g = motor(kk, p2);
                let ol = generate_open_loop(&g, u, 10.0, seed0 + k as u64).unwrap();
                let ctrl = pi(kp, ki);
                let cl =
                    simulate_closed_loop(&g, &ctrl.to_tf(), &r, 10.0, seed0 + 100 + k as u64)
                        .unwrap();
                let _ = &m;
                MetaEntry { controller: ctrl, open_loop: ol, closed_loop: cl, delta_k: 0.5 }
            })
            .collect();
        MetaDataset { entries }
    }

    #[test]
    fn similarity_basics() {
        let g = motor(2.0, 0.3);
        let u = gaussian_noise(2.0, 400, 1);
        let d1 = generate_open_loop(&g, &u, 10.0, 2).unwrap();
        assert_eq!(similarity_index(&d1, &d1).unwrap(), 0.0);
        let mut other = d1.clone();
        other.u[3] += 1.0;
        assert!(matches!(similarity_index(&d1, &other), Err(Error::InputMismatch { .. })));
    }

    #[test]
    fn similarity_matches_plant_difference_oracle() {
        // Noise-free: S_k = sum ((G - G_k) u)^2.
        let g = motor(3.0, 0.5);
        let gk = motor(1.5, 0.2);
        let u = gaussian_noise(2.0, 500, 3);
        let dn = generate_open_loop(&g, &u, 0.0, 0).unwrap();
        let dk = generate_open_loop(&gk, &u, 0.0, 0).unwrap();
        let s = similarity_index(&dn, &dk).unwrap();
        let diff = g.sub(&gk);
        let dy = lti::simulate(&diff, &u).unwrap();
        let oracle: f64 = dy.iter().map(|x| x * x).sum();
        assert!((s - oracle).abs() <= 1e-8 * oracle, "{s} vs {oracle}");
    }

    #[test]
    fn performance_zero_for_exact_match() {
        let m = m_ref();
        let r = vec![1000.0; 150];
        let y_d = lti::simulate(&m, &r).unwrap();
        let fake = Dataset {
            u: vec![0.0; 150],
            y: y_d.clone(),
            sample_time: TS,
            noise_std: 0.0,
            seed: 0,
            kind: crate::signals::DatasetKind::ClosedLoop,
            reference: Some(r),
            diverged: false,
        };
        assert!(performance_index(&y_d, &fake).unwrap() < 1e-10);
    }

    #[test]
    fn iv_objective_vertex_matches_direct_sum_and_h_psd() {
        let u = gaussian_noise(2.0, 550, 5);
        let meta = toy_meta(
            &u,
            &[(2.0, 0.3), (3.0, 0.5), (4.0, 0.7)],
            &[(0.01, 0.001), (0.008, 0.0008), (0.006, 0.0006)],
            50,
        );
        let g = motor(2.5, 0.4);
        let d = generate_open_loop(&g, &u, 10.0, 60).unwrap();
        let div = generate_open_loop(&g, &u, 10.0, 61).unwrap();
        let m = m_ref();
        let w = TransferFunction::unit(TS);
        let obj = build_iv_objective(&d, &div, &meta, &m, &w, true).unwrap();

        // Basis-vector evaluation vs direct summation oracle.
        let l = signals::design_prefilter(&m, &w, &d.u, true).unwrap();
        let vr = signals::virtual_reference(&m, &d.y).unwrap();
        let e_v: Vec<f64> = vr.valid.clone().map(|t| vr.r_v[t] - d.y[t]).collect();
        let u_l = lti::simulate(&l, &d.u).unwrap()[vr.valid.clone()].to_vec();
        let e_v_l = lti::simulate(&l, &e_v).unwrap();
        let vr2 = signals::virtual_reference(&m, &div.y).unwrap();
        let e_v2: Vec<f64> = vr.valid.clone().map(|t| vr2.r_v[t] - div.y[t]).collect();
        let e_v2_l = lti::simulate(&l, &e_v2).unwrap();
        let ctfs = meta.controller_tfs();
        for k in 0..3 {
            let phik = lti::simulate(&ctfs[k], &e_v_l).unwrap();
            let mut direct = 0.0;
            for t in 0..u_l.len() {
                let mut znorm2 = 0.0;
                for c in &ctfs {
                    let z = lti::simulate(c, &e_v2_l).unwrap();
                    znorm2 += z[t] * z[t];
                }
                let r = u_l[t] - phik[t];
                direct += znorm2 * r * r;
            }
            let alpha = MetaWeights::vertex(3, k);
            let q = obj.eval(&alpha.alpha);
            assert!((q - direct).abs() <= 1e-9 * direct.abs().max(1.0), "k={k}: {q} vs {direct}");
        }
        let eig = obj.h.clone().symmetric_eigen();
        let lmin = eig.eigenvalues.min();
        assert!(lmin >= -1e-9 * obj.h.amax(), "H not PSD: {lmin}");
    }

    #[test]
    fn iv_objective_reduces_to_plain_on_identical_experiments() {
        let u = gaussian_noise(2.0, 550, 7);
        let meta = toy_meta(&u, &[(2.0, 0.3), (3.0, 0.5)], &[(0.01, 0.001), (0.008, 0.0008)], 70);
        let g = motor(2.2, 0.1);
        let d = generate_open_loop(&g, &u, 0.0, 0).unwrap();
        let m = m_ref();
        let w = TransferFunction::unit(TS);
        let obj = build_iv_objective(&d, &d, &meta, &m, &w, true).unwrap();
        // Independent plain construction with the instrument replaced by the
        // first-experiment regressor.
        let l = signals::design_prefilter(&m, &w, &d.u, true).unwrap();
        let vr = signals::virtual_reference(&m, &d.y).unwrap();
        let e_v: Vec<f64> = vr.valid.clone().map(|t| vr.r_v[t] - d.y[t]).collect();
        let u_l = lti::simulate(&l, &d.u).unwrap()[vr.valid.clone()].to_vec();
        let e_v_l = lti::simulate(&l, &e_v).unwrap();
        let ctfs = meta.controller_tfs();
        let phi: Vec<Vec<f64>> =
            ctfs.iter().map(|c| lti::simulate(c, &e_v_l).unwrap()).collect();
        for alpha in [[1.0, 0.0], [0.25, 0.75], [0.5, 0.5]] {
            let mut direct = 0.0;
            for t in 0..u_l.len() {
                let wt: f64 = phi.iter().map(|p| p[t] * p[t]).sum();
                let r = u_l[t] - alpha[0] * phi[0][t] - alpha[1] * phi[1][t];
                direct += wt * r * r;
            }
            let q = obj.eval(&alpha);
            assert!((q - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn single_entry_returns_unit_weight() {
        let u = gaussian_noise(2.0, 550, 9);
        let meta = toy_meta(&u, &[(2.0, 0.3)], &[(0.01, 0.001)], 90);
        let g = motor(2.5, 0.4);
        let d = generate_open_loop(&g, &u, 10.0, 91).unwrap();
        let div = generate_open_loop(&g, &u, 10.0, 92).unwrap();
        let m = m_ref();
        let obj =
            build_iv_objective(&d, &div, &meta, &m, &TransferFunction::unit(TS), true).unwrap();
        let (w, _) = solve_meta(&obj, &meta, &DesignConfig::default(), &d, &m).unwrap();
        assert_eq!(w.alpha, vec![1.0]);
    }

    #[test]
    fn huge_similarity_penalty_selects_most_similar_vertex() {
        let u = gaussian_noise(2.0, 550, 11);
        let meta = toy_meta(
            &u,
            &[(2.0, 0.3), (3.0, 0.5), (5.0, 0.8)],
            &[(0.01, 0.001), (0.008, 0.0008), (0.004, 0.0004)],
            110,
        );
        // New plant identical to meta-plant 1.
        let g = motor(3.0, 0.5);
        let d = generate_open_loop(&g, &u, 10.0, 111).unwrap();
        let div = generate_open_loop(&g, &u, 10.0, 112).unwrap();
        let m = m_ref();
        let obj =
            build_iv_objective(&d, &div, &meta, &m, &TransferFunction::unit(TS), true).unwrap();
        let config = DesignConfig { lambda_j: 0.0, lambda_s: 1e12, ..Default::default() };
        let (w, report) = solve_meta(&obj, &meta, &config, &d, &m).unwrap();
        let s_argmin = report
            .similarity
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(s_argmin, 1);
        assert!(w.alpha[1] > 0.999, "{:?}", w.alpha);
    }

    #[test]
    fn solver_beats_feasible_candidates_and_stays_feasible() {
        let u = gaussian_noise(2.0, 550, 13);
        let meta = toy_meta(
            &u,
            &[(2.0, 0.3), (3.0, 0.5), (4.0, 0.7)],
            &[(0.01, 0.001), (0.008, 0.0008), (0.006, 0.0006)],
            130,
        );
        let g = motor(2.8, 0.45);
        let d = generate_open_loop(&g, &u, 10.0, 131).unwrap();
        let div = generate_open_loop(&g, &u, 10.0, 132).unwrap();
        let m = m_ref();
        let obj =
            build_iv_objective(&d, &div, &meta, &m, &TransferFunction::unit(TS), true).unwrap();
        let config = DesignConfig::default();
        let (w, report) = solve_meta(&obj, &meta, &config, &d, &m).unwrap();
        assert!(w.is_feasible(1e-8));
        // Objective at the solution is no worse than at any vertex or uniform.
        let eval = |alpha: &[f64]| {
            obj.eval(alpha)
                + config.lambda_j
                    * report.performance.iter().zip(alpha).map(|(j, a)| j * a * a).sum::<f64>()
                + config.lambda_s
                    * report.similarity.iter().zip(alpha).map(|(s, a)| s * a).sum::<f64>()
        };
        // Optimality is asserted on the normalized objective: the solver's
        // value must not exceed any feasible candidate's by more than 1e-9.
        let ours = eval(&w.alpha);
        for k in 0..3 {
            let v = eval(&MetaWeights::vertex(3, k).alpha);
            assert!(
                (ours - v) / report.scale <= 1e-9,
                "k={k} normalized gap {:.3e}",
                (ours - v) / report.scale
            );
        }
        let vu = eval(&MetaWeights::uniform(3).alpha);
        assert!((ours - vu) / report.scale <= 1e-9);
    }

    #[test]
    fn constrained_solution_respects_delta_post_hoc() {
        let u = gaussian_noise(2.0, 550, 15);
        let meta = toy_meta(
            &u,
            &[(2.0, 0.3), (3.0, 0.5), (4.0, 0.7)],
            &[(0.012, 0.0012), (0.009, 0.0009), (0.007, 0.0007)],
            150,
        );
        let g = motor(3.2, 0.55);
        let d = generate_open_loop(&g, &u, 10.0, 151).unwrap();
        let div = generate_open_loop(&g, &u, 10.0, 152).unwrap();
        let m = m_ref();
        let obj =
            build_iv_objective(&d, &div, &meta, &m, &TransferFunction::unit(TS), true).unwrap();
        let config = DesignConfig { delta: Some(0.5), ..Default::default() };
        match solve_meta(&obj, &meta, &config, &d, &m) {
            Ok((w, report)) => {
                assert!(w.is_feasible(1e-8));
                let ell = report.ell.expect("constrained solve reports its window");
                let grid = SpectralGrid::new(ell);
                let dh =
                    crate::spectral::delta_hat(&d, &m, &meta.controller_tfs(), &w.alpha, &grid)
                        .unwrap();
                assert!(dh <= 0.5 + 1e-6, "delta_hat {dh}");
            }
            Err(Error::InfeasibleDelta { min_feasible, .. }) => {
                assert!(min_feasible > 0.5);
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn materialization_rules() {
        let u = gaussian_noise(2.0, 550, 17);
        let meta =
            toy_meta(&u, &[(2.0, 0.3), (3.0, 0.5)], &[(0.02, 0.002), (0.01, 0.001)], 170);
        let c0 = materialize_meta_controller(&meta, &MetaWeights::vertex(2, 0));
        assert!(c0.approx_eq(&meta.entries[0].controller.to_tf(), 1e-12));
        let cu = materialize_params(&meta, &MetaWeights::uniform(2)).unwrap();
        assert!((cu.theta[0] - 0.015).abs() < 1e-12);
        assert!((cu.theta[1] - 0.0015).abs() < 1e-12);
        let cm = materialize_params(&meta, &MetaWeights { alpha: vec![0.25, 0.75] }).unwrap();
        assert!((cm.theta[0] - (0.25 * 0.02 + 0.75 * 0.01)).abs() < 1e-12);
        assert!((cm.theta[1] - (0.25 * 0.002 + 0.75 * 0.001)).abs() < 1e-12);
    }
}
