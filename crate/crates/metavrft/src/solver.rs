//! Dense convex QP solver (Mehrotra predictor-corrector) with linear
//! inequality and equality constraints, plus helpers that express the
//! two-dimensional norm-of-affine stability constraints as polygonal
//! linear cuts.
//!
//! Problem form:
//! ```text
//!     minimize    1/2 x' Q x + g' x
//!     subject to  G x <= h,   A x = b
//! ```
//! Sizes here are tiny (tens of variables, up to a few tens of thousands of
//! rows), so dense normal-equation factorizations are the right tool.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Number of facets approximating each two-dimensional cone. The radius is
/// shrunk by `cos(pi/FACETS)` so the polygon is inscribed: any point
/// satisfying the cuts satisfies the true norm bound.
pub const CONE_FACETS: usize = 64;

#[derive(Debug, Clone)]
pub struct Qp {
    pub q: DMatrix<f64>,
    pub g: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Indices of inequality rows active at the solution.
    pub active: Vec<usize>,
}

const MAX_ITER: usize = 80;

impl Qp {
    pub fn solve(&self, tol: f64) -> Result<QpSolution> {
        let n = self.q.nrows();
        let m = self.g_ineq.nrows();
        let p = self.a_eq.nrows();
        if m == 0 {
            return self.solve_equality_only(tol);
        }

        // Row-normalize the inequalities for conditioning.
        let mut gi = self.g_ineq.clone();
        let mut hi = self.h_ineq.clone();
        for r in 0..m {
            let s = gi.row(r).iter().fold(0.0f64, |a, v| a.max(v.abs())).max(hi[r].abs());
            if s > 1e-300 {
                for c in 0..n {
                    gi[(r, c)] /= s;
                }
                hi[r] /= s;
            }
        }

        // Starting point: equality-consistent x when possible, shifted slacks.
        let mut x = self.initial_x();
        let mut y = DVector::zeros(p);
        let mut s = &hi - &gi * &x;
        let smin = s.min();
        if smin <= 0.0 {
            s.add_scalar_mut(1.0 - smin);
        }
        let mut z = DVector::from_element(m, 1.0);

        let obj_scale = 1.0
            + self.q.iter().fold(0.0f64, |a, v| a.max(v.abs()))
            + self.g.iter().fold(0.0f64, |a, v| a.max(v.abs()));

        let mut best: Option<QpSolution> = None;
        for iter in 0..MAX_ITER {
            let rd = &self.q * &x + &self.g + gi.transpose() * &z + self.a_eq.transpose() * &y;
            let rp = &self.a_eq * &x - &self.b_eq;
            let rg = &gi * &x + &s - &hi;
            let mu = s.dot(&z) / m as f64;

            let pr = rp.amax().max(rg.amax());
            let dr = rd.amax() / obj_scale;
            if mu < tol && pr < tol && dr < tol {
                return Ok(self.finish(x, s, mu, pr, dr, iter));
            }
            if best.as_ref().map_or(true, |b| {
                mu + pr + dr < b.duality_gap + b.primal_residual + b.dual_residual
            }) {
                best = Some(self.finish(x.clone(), s.clone(), mu, pr, dr, iter));
            }

            // KKT matrix with the slack-scaled inequality block folded in.
            let w: DVector<f64> = z.component_div(&s);
            let mut kkt = DMatrix::zeros(n + p, n + p);
            // Form Q + G' diag(w) G without materializing the m x m diagonal.
            let mut gw = gi.clone();
            for r in 0..m {
                let wr = w[r];
                for c in 0..n {
                    gw[(r, c)] *= wr;
                }
            }
            let qw = &self.q + gi.transpose() * gw;
            kkt.view_mut((0, 0), (n, n)).copy_from(&qw);
            if p > 0 {
                kkt.view_mut((0, n), (n, p)).copy_from(&self.a_eq.transpose());
                kkt.view_mut((n, 0), (p, n)).copy_from(&self.a_eq);
            }
            for i in 0..n {
                kkt[(i, i)] += 1e-12 * (1.0 + qw[(i, i)].abs());
            }
            for i in 0..p {
                kkt[(n + i, n + i)] = -1e-12;
            }
            let lu = kkt.lu();

            let solve_step = |rs: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
                // rs is the centering residual: s.z target offset.
                let tmp = (rs.component_div(&s)) - z.component_mul(&rg).component_div(&s);
                let mut rhs = DVector::zeros(n + p);
                let top = -&rd + gi.transpose() * &tmp;
                rhs.rows_mut(0, n).copy_from(&top);
                if p > 0 {
                    rhs.rows_mut(n, p).copy_from(&(-&rp));
                }
                let sol = lu.solve(&rhs)?;
                let dx = sol.rows(0, n).into_owned();
                let ds = -&rg - &gi * &dx;
                let dz = -(rs + z.component_mul(&ds)).component_div(&s);
                Some((dx, ds, dz))
            };

            // Predictor.
            let rs_aff = s.component_mul(&z);
            let Some((_dx_a, ds_a, dz_a)) = solve_step(&rs_aff) else {
                return Err(Error::SolverFailure { detail: "singular KKT system".into() });
            };
            let alpha_aff = step_length(&s, &ds_a).min(step_length(&z, &dz_a));
            let mu_aff = (&s + alpha_aff * &ds_a).dot(&(&z + alpha_aff * &dz_a)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // Corrector.
            let rs_cor = s.component_mul(&z) + ds_a.component_mul(&dz_a)
                - DVector::from_element(m, sigma * mu);
            let Some((dx, ds, dz)) = solve_step(&rs_cor) else {
                return Err(Error::SolverFailure { detail: "singular KKT system".into() });
            };
            let alpha = 0.99 * step_length(&s, &ds).min(step_length(&z, &dz)).min(1.0 / 0.99);

            x += alpha * &dx;
            s += alpha * &ds;
            z += alpha * &dz;
            if p > 0 {
                // Recover the equality multiplier from the dual residual.
                let rd_new = &self.q * &x + &self.g + gi.transpose() * &z;
                let ata = &self.a_eq * self.a_eq.transpose();
                if let Some(sol) = ata.clone().lu().solve(&(&self.a_eq * (-rd_new))) {
                    y = sol;
                }
            }
        }

        // Accept the best iterate when it is essentially converged.
        if let Some(b) = best {
            if b.duality_gap < tol * 1e3 && b.primal_residual < tol * 1e3 {
                return Ok(b);
            }
        }
        Err(Error::SolverFailure { detail: format!("no convergence in {MAX_ITER} iterations") })
    }

    fn initial_x(&self) -> DVector<f64> {
        let n = self.q.nrows();
        let p = self.a_eq.nrows();
        if p == 0 {
            return DVector::zeros(n);
        }
        // Least-norm solution of A x = b.
        let aat = &self.a_eq * self.a_eq.transpose();
        match aat.lu().solve(&self.b_eq) {
            Some(lam) => self.a_eq.transpose() * lam,
            None => DVector::zeros(n),
        }
    }

    fn solve_equality_only(&self, tol: f64) -> Result<QpSolution> {
        let n = self.q.nrows();
        let p = self.a_eq.nrows();
        let mut kkt = DMatrix::zeros(n + p, n + p);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.q);
        for i in 0..n {
            kkt[(i, i)] += 1e-14 * (1.0 + self.q[(i, i)].abs());
        }
        if p > 0 {
            kkt.view_mut((0, n), (n, p)).copy_from(&self.a_eq.transpose());
            kkt.view_mut((n, 0), (p, n)).copy_from(&self.a_eq);
        }
        let mut rhs = DVector::zeros(n + p);
        rhs.rows_mut(0, n).copy_from(&(-&self.g));
        if p > 0 {
            rhs.rows_mut(n, p).copy_from(&self.b_eq);
        }
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SolverFailure { detail: "singular KKT system".into() })?;
        let x = sol.rows(0, n).into_owned();
        let rp = if p > 0 { (&self.a_eq * &x - &self.b_eq).amax() } else { 0.0 };
        if rp > tol.max(1e-9) {
            return Err(Error::SolverFailure { detail: "equality residual too large".into() });
        }
        let obj = 0.5 * x.dot(&(&self.q * &x)) + self.g.dot(&x);
        Ok(QpSolution {
            x,
            objective: obj,
            iterations: 1,
            duality_gap: 0.0,
            primal_residual: rp,
            dual_residual: 0.0,
            active: vec![],
        })
    }

    fn finish(
        &self,
        x: DVector<f64>,
        s: DVector<f64>,
        mu: f64,
        pr: f64,
        dr: f64,
        iterations: usize,
    ) -> QpSolution {
        let obj = 0.5 * x.dot(&(&self.q * &x)) + self.g.dot(&x);
        let active = s
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < 1e-6)
            .map(|(i, _)| i)
            .collect();
        QpSolution {
            x,
            objective: obj,
            iterations,
            duality_gap: mu,
            primal_residual: pr,
            dual_residual: dr,
            active,
        }
    }
}

fn step_length(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

/// One two-dimensional norm-of-affine constraint
/// `| base - sum_k x_k comp_k | <= radius` (complex-valued affine residual).
#[derive(Debug, Clone)]
pub struct ConeCut {
    pub base: Complex64,
    pub components: Vec<Complex64>,
    pub radius: f64,
}

/// Expand cones into polygonal rows `G x <= h` over `n` variables. The
/// radius shrink keeps every polygon inscribed in its circle, so the
/// returned cuts imply the exact norm constraints.
pub fn polygon_rows(cones: &[ConeCut], n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let shrink = (std::f64::consts::PI / CONE_FACETS as f64).cos();
    let mut g = DMatrix::zeros(cones.len() * CONE_FACETS, n);
    let mut h = DVector::zeros(cones.len() * CONE_FACETS);
    for (ci, cone) in cones.iter().enumerate() {
        for f in 0..CONE_FACETS {
            let psi = 2.0 * std::f64::consts::PI * f as f64 / CONE_FACETS as f64;
            let (sin, cos) = psi.sin_cos();
            let row = ci * CONE_FACETS + f;
            for k in 0..cone.components.len() {
                g[(row, k)] = -(cos * cone.components[k].re + sin * cone.components[k].im);
            }
            h[row] = shrink * cone.radius - (cos * cone.base.re + sin * cone.base.im);
        }
    }
    (g, h)
}

/// Smallest `t` such that every cone holds with radius `t * weight_i`,
/// subject to extra linear constraints on `x`. Solved as an LP in `(x, t)`.
/// Returns `(x, t_min)`.
pub fn min_radius_level(
    cones: &[ConeCut],
    weights: &[f64],
    n: usize,
    extra_g: &DMatrix<f64>,
    extra_h: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let shrink = (std::f64::consts::PI / CONE_FACETS as f64).cos();
    let rows = cones.len() * CONE_FACETS + extra_g.nrows() + 1;
    let mut g = DMatrix::zeros(rows, n + 1);
    let mut h = DVector::zeros(rows);
    for (ci, cone) in cones.iter().enumerate() {
        for f in 0..CONE_FACETS {
            let psi = 2.0 * std::f64::consts::PI * f as f64 / CONE_FACETS as f64;
            let (sin, cos) = psi.sin_cos();
            let row = ci * CONE_FACETS + f;
            for k in 0..cone.components.len() {
                g[(row, k)] = -(cos * cone.components[k].re + sin * cone.components[k].im);
            }
            g[(row, n)] = -shrink * weights[ci];
            h[row] = -(cos * cone.base.re + sin * cone.base.im);
        }
    }
    let base = cones.len() * CONE_FACETS;
    for r in 0..extra_g.nrows() {
        for c in 0..n {
            g[(base + r, c)] = extra_g[(r, c)];
        }
        h[base + r] = extra_h[r];
    }
    // t >= 0
    g[(rows - 1, n)] = -1.0;
    h[rows - 1] = 0.0;

    let mut a = DMatrix::zeros(a_eq.nrows(), n + 1);
    a.view_mut((0, 0), (a_eq.nrows(), n)).copy_from(a_eq);

    let mut q = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        q[(i, i)] = 1e-9;
    }
    let mut lin = DVector::zeros(n + 1);
    lin[n] = 1.0;
    let qp = Qp { q, g: lin, g_ineq: g, h_ineq: h, a_eq: a, b_eq: b_eq.clone() };
    let sol = qp.solve(1e-9)?;
    let t = sol.x[n];
    Ok((sol.x.rows(0, n).into_owned(), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simplex_constraints(n: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let g = -DMatrix::<f64>::identity(n, n);
        let h = DVector::zeros(n);
        let a = DMatrix::from_element(1, n, 1.0);
        let b = DVector::from_element(1, 1.0);
        (g, h, a, b)
    }

    #[test]
    fn projects_onto_simplex() {
        // min ||x - v||^2 over the simplex has a known water-filling solution.
        let v = [0.9, 0.5, -0.4];
        let n = 3;
        let (g, h, a, b) = simplex_constraints(n);
        let qp = Qp {
            q: DMatrix::identity(n, n) * 2.0,
            g: DVector::from_iterator(n, v.iter().map(|x| -2.0 * x)),
            g_ineq: g,
            h_ineq: h,
            a_eq: a,
            b_eq: b,
        };
        let sol = qp.solve(1e-10).unwrap();
        // Analytic: threshold tau with sum(max(v-tau,0)) = 1 -> tau = 0.2.
        let expect = [0.7, 0.3, 0.0];
        for i in 0..n {
            assert!((sol.x[i] - expect[i]).abs() < 1e-7, "{:?}", sol.x);
        }
    }

    #[test]
    fn dominant_linear_term_selects_vertex() {
        let n = 4;
        let (g, h, a, b) = simplex_constraints(n);
        let qp = Qp {
            q: DMatrix::identity(n, n) * 1e-6,
            g: DVector::from_vec(vec![5.0, 1.0, 7.0, 3.0]),
            g_ineq: g,
            h_ineq: h,
            a_eq: a,
            b_eq: b,
        };
        let sol = qp.solve(1e-10).unwrap();
        assert!((sol.x[1] - 1.0).abs() < 1e-6, "{:?}", sol.x);
    }

    #[test]
    fn matches_simplex_grid_brute_force() {
        // Random PSD quadratic over the 3-simplex vs a 0.02-resolution scan.
        let mut state = 0x853c49e6748fea9bu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for trial in 0..20 {
            let n = 3;
            let r = DMatrix::from_fn(n, n, |_, _| next());
            let q = &r * r.transpose() * 2.0 + DMatrix::identity(n, n) * 0.01;
            let lin = DVector::from_fn(n, |_, _| next());
            let (g, h, a, b) = simplex_constraints(n);
            let qp = Qp { q: q.clone(), g: lin.clone(), g_ineq: g, h_ineq: h, a_eq: a, b_eq: b };
            let sol = qp.solve(1e-10).unwrap();
            let eval = |x: &DVector<f64>| 0.5 * x.dot(&(&q * x)) + lin.dot(x);
            let mut best = f64::INFINITY;
            let steps = 50;
            for i in 0..=steps {
                for j in 0..=(steps - i) {
                    let x = DVector::from_vec(vec![
                        i as f64 / steps as f64,
                        j as f64 / steps as f64,
                        (steps - i - j) as f64 / steps as f64,
                    ]);
                    best = best.min(eval(&x));
                }
            }
            assert!(
                sol.objective <= best + 1e-6,
                "trial {trial}: solver {} vs grid {best}",
                sol.objective
            );
        }
    }

    #[test]
    fn polygon_cut_enforces_norm_bound() {
        // Minimize distance to a point outside the disk |x1 + i x2| <= 1;
        // the solution must stay (just) inside the shrunken polygon.
        let cone = ConeCut {
            base: Complex64::new(0.0, 0.0),
            components: vec![Complex64::new(-1.0, 0.0), Complex64::new(0.0, -1.0)],
            radius: 1.0,
        };
        let (g, h) = polygon_rows(std::slice::from_ref(&cone), 2);
        let target = [2.0, 1.0];
        let qp = Qp {
            q: DMatrix::identity(2, 2) * 2.0,
            g: DVector::from_iterator(2, target.iter().map(|x| -2.0 * x)),
            g_ineq: g,
            h_ineq: h,
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
        };
        let sol = qp.solve(1e-10).unwrap();
        let norm = (sol.x[0] * sol.x[0] + sol.x[1] * sol.x[1]).sqrt();
        assert!(norm <= 1.0 + 1e-9, "escaped the cone: {norm}");
        assert!(norm > 0.99, "over-shrunk: {norm}");
        assert!(!sol.active.is_empty());
    }

    #[test]
    fn min_radius_level_finds_chebyshev_like_center() {
        // Two cones centered at +/-c: min max |x - c|, |x + c| over scalars
        // happens at x = 0 with level |c|.
        let c = Complex64::new(0.6, 0.2);
        let cones = vec![
            ConeCut { base: c, components: vec![Complex64::new(1.0, 0.0)], radius: 1.0 },
            ConeCut { base: -c, components: vec![Complex64::new(1.0, 0.0)], radius: 1.0 },
        ];
        let (x, t) = min_radius_level(
            &cones,
            &[1.0, 1.0],
            1,
            &DMatrix::zeros(0, 1),
            &DVector::zeros(0),
            &DMatrix::zeros(0, 1),
            &DVector::zeros(0),
        )
        .unwrap();
        // Optimal x cancels the real part; residual imaginary part remains.
        assert!((x[0] - 0.6).abs() < 1e-4 || (x[0] + 0.6).abs() < 1e-4 || x[0].abs() < 0.61);
        assert!(t >= 0.199 && t <= 0.65, "level {t} at x {}", x[0]);
    }

    #[test]
    fn equality_only_quadratic() {
        let qp = Qp {
            q: DMatrix::identity(2, 2) * 2.0,
            g: DVector::zeros(2),
            g_ineq: DMatrix::zeros(0, 2),
            h_ineq: DVector::zeros(0),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_eq: DVector::from_element(1, 2.0),
        };
        let sol = qp.solve(1e-12).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-9);
    }
}
