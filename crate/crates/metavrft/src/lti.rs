//! Discrete-time LTI algebra in the back-shift operator.
//!
//! Transfer functions are ratios of polynomials in `q^-1` with the sample
//! time attached. All interconnections (sum, product, feedback) are closed
//! form polynomial arithmetic; simulation is the direct difference equation.
//! Norm and stability computations first reduce to a minimal realization by
//! cancelling near-common root pairs, so expressions like `M - C*G*Xi` with
//! an integrator controller evaluate cleanly.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Relative threshold for trimming trailing coefficients into canonical form.
pub const TRIM_TOL: f64 = 1e-12;
/// Default stability margin on pole modulus.
pub const STABILITY_TOL: f64 = 1e-9;
/// Relative tolerance for pole/zero cancellation in minimal realizations.
const CANCEL_TOL: f64 = 1e-7;

/// Rational transfer function in `q^-1`.
///
/// `num[i]` and `den[i]` are the coefficients of `q^-i`. The canonical form
/// has `den[0] = 1` and no trailing (near-)zero coefficients, so equal
/// systems produced by different arithmetic routes compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    #[serde(rename = "ts")]
    pub sample_time: f64,
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>, sample_time: f64) -> Result<Self> {
        if den.is_empty() || den.iter().all(|a| *a == 0.0) {
            return Err(Error::ZeroDenominator);
        }
        if den[0] == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        let mut tf = TransferFunction { num, den, sample_time };
        tf.canonicalize();
        Ok(tf)
    }

    /// Static gain `k` as a transfer function.
    pub fn constant(k: f64, sample_time: f64) -> Self {
        TransferFunction { num: vec![k], den: vec![1.0], sample_time }
    }

    /// Unit gain.
    pub fn unit(sample_time: f64) -> Self {
        Self::constant(1.0, sample_time)
    }

    /// Normalize `den[0] = 1` and trim trailing coefficients below
    /// `TRIM_TOL` relative to the largest coefficient magnitude.
    fn canonicalize(&mut self) {
        let a0 = self.den[0];
        if a0 != 1.0 {
            for b in &mut self.num {
                *b /= a0;
            }
            for a in &mut self.den {
                *a /= a0;
            }
        }
        let scale = self
            .num
            .iter()
            .chain(self.den.iter())
            .fold(0.0f64, |m, c| m.max(c.abs()))
            .max(1.0);
        let tol = TRIM_TOL * scale;
        while self.num.len() > 1 && self.num.last().unwrap().abs() <= tol {
            self.num.pop();
        }
        while self.den.len() > 1 && self.den.last().unwrap().abs() <= tol {
            self.den.pop();
        }
        if self.num.iter().all(|b| b.abs() <= tol) {
            self.num = vec![0.0];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.num.iter().all(|b| *b == 0.0)
    }

    /// Steady-state gain `num(1)/den(1)`.
    pub fn dc_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    /// Relative degree: index of the first non-negligible numerator
    /// coefficient. Zero systems have no finite relative degree.
    pub fn relative_degree(&self) -> Option<usize> {
        let scale = self.num.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
        self.num.iter().position(|b| b.abs() > TRIM_TOL * scale)
    }

    /// Coefficient-wise comparison of canonical forms.
    pub fn approx_eq(&self, other: &TransferFunction, tol: f64) -> bool {
        let cmp = |a: &[f64], b: &[f64]| {
            let n = a.len().max(b.len());
            (0..n).all(|i| {
                let x = a.get(i).copied().unwrap_or(0.0);
                let y = b.get(i).copied().unwrap_or(0.0);
                (x - y).abs() <= tol
            })
        };
        cmp(&self.num, &other.num) && cmp(&self.den, &other.den)
    }

    pub fn add(&self, other: &TransferFunction) -> TransferFunction {
        // Shared denominators add numerators directly; this keeps convex
        // combinations of same-basis systems in a common canonical form.
        if poly_approx_eq(&self.den, &other.den) {
            let num = poly_add(&self.num, &other.num);
            return TransferFunction::new(num, self.den.clone(), self.sample_time).unwrap();
        }
        let num = poly_add(
            &poly_mul(&self.num, &other.den),
            &poly_mul(&other.num, &self.den),
        );
        let den = poly_mul(&self.den, &other.den);
        TransferFunction::new(num, den, self.sample_time).unwrap()
    }

    pub fn sub(&self, other: &TransferFunction) -> TransferFunction {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &TransferFunction) -> TransferFunction {
        TransferFunction::new(
            poly_mul(&self.num, &other.num),
            poly_mul(&self.den, &other.den),
            self.sample_time,
        )
        .unwrap()
    }

    pub fn scale(&self, k: f64) -> TransferFunction {
        let num = self.num.iter().map(|b| b * k).collect();
        TransferFunction { num, den: self.den.clone(), sample_time: self.sample_time }
    }

    pub fn inverse(&self) -> Result<TransferFunction> {
        if self.is_zero() {
            return Err(Error::ZeroDenominator);
        }
        TransferFunction::new(self.den.clone(), self.num.clone(), self.sample_time)
    }

    /// Frequency response at `omega` rad/sample: evaluates at `q^-1 = e^{-j omega}`.
    pub fn freq_response(&self, omega: f64) -> Complex64 {
        let x = Complex64::new(0.0, -omega).exp();
        horner(&self.num, x) / horner(&self.den, x)
    }

    /// Poles in the `z` plane (roots of the denominator read as a descending
    /// polynomial in `z`).
    pub fn poles(&self) -> Vec<Complex64> {
        poly_roots_desc(&self.den)
    }

    /// Finite zeros in the `z` plane.
    pub fn zeros(&self) -> Vec<Complex64> {
        let d = self.relative_degree().unwrap_or(0);
        poly_roots_desc(&self.num[d..])
    }

    /// Minimal realization: cancels near-common pole/zero pairs. Needed for
    /// norms and stability tests of differences like `M - C*G*Xi` where an
    /// integrator pole is cancelled algebraically by a differentiator zero.
    pub fn minimal(&self) -> TransferFunction {
        if self.is_zero() {
            return self.clone();
        }
        let d = self.relative_degree().unwrap_or(0);
        let lead = self.num[d];
        let mut zeros = poly_roots_desc(&self.num[d..]);
        let mut poles = self.poles();
        let mut cancelled = false;
        let mut i = 0;
        while i < poles.len() {
            let p = poles[i];
            let tol = CANCEL_TOL * p.norm().max(1.0);
            if let Some(j) = zeros
                .iter()
                .position(|z| (z - p).norm() <= tol)
            {
                zeros.remove(j);
                poles.remove(i);
                cancelled = true;
            } else {
                i += 1;
            }
        }
        if !cancelled {
            return self.clone();
        }
        let mut num = poly_from_roots_desc(&zeros);
        for b in &mut num {
            *b *= lead;
        }
        let mut shifted = vec![0.0; d];
        shifted.extend_from_slice(&num);
        let den = poly_from_roots_desc(&poles);
        TransferFunction::new(shifted, den, self.sample_time).unwrap()
    }
}

fn horner(coeffs: &[f64], x: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * x + c)
}

pub(crate) fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0))
        .collect()
}

pub(crate) fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_approx_eq(a: &[f64], b: &[f64]) -> bool {
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1.0);
    let n = a.len().max(b.len());
    (0..n).all(|i| {
        let x = a.get(i).copied().unwrap_or(0.0);
        let y = b.get(i).copied().unwrap_or(0.0);
        (x - y).abs() <= TRIM_TOL * scale
    })
}

/// Roots of `c[0] z^n + c[1] z^(n-1) + ... + c[n]` via the companion matrix.
fn poly_roots_desc(coeffs: &[f64]) -> Vec<Complex64> {
    // Trim the trailing zeros first: they contribute roots at z = 0 exactly.
    let mut c: Vec<f64> = coeffs.to_vec();
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut zero_roots = 0usize;
    while c.len() > 1 && c.last().unwrap().abs() <= TRIM_TOL * scale {
        c.pop();
        zero_roots += 1;
    }
    let n = c.len() - 1;
    let mut roots = vec![Complex64::new(0.0, 0.0); zero_roots];
    if n == 0 {
        return roots;
    }
    let c0 = c[0];
    let comp = DMatrix::from_fn(n, n, |i, j| {
        if j == n - 1 {
            -c[n - i] / c0
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    let eig = comp.complex_eigenvalues();
    roots.extend(eig.iter().copied());
    roots
}

/// Monic polynomial with the given roots, descending coefficients.
fn poly_from_roots_desc(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.iter().map(|z| z.re).collect()
}

/// Zero-initial-condition simulation of the difference equation
/// `den(q^-1) y = num(q^-1) u`.
pub fn simulate(tf: &TransferFunction, input: &[f64]) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::EmptySignal);
    }
    if input.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFiniteSignal);
    }
    let mut filter = Filter::new(tf);
    Ok(input.iter().map(|&u| filter.step(u)).collect())
}

/// Stateful one-sample-at-a-time filter (direct form, canonical `a0 = 1`).
pub struct Filter {
    b: Vec<f64>,
    a: Vec<f64>,
    u_hist: Vec<f64>,
    y_hist: Vec<f64>,
}

impl Filter {
    pub fn new(tf: &TransferFunction) -> Self {
        Filter {
            b: tf.num.clone(),
            a: tf.den.clone(),
            u_hist: vec![0.0; tf.num.len()],
            y_hist: vec![0.0; tf.den.len()],
        }
    }

    /// Direct feedthrough coefficient `b0 / a0`.
    pub fn feedthrough(&self) -> f64 {
        self.b[0] / self.a[0]
    }

    /// Output contribution of past samples only (input at this step taken as 0).
    pub fn step_free(&self) -> f64 {
        let mut acc = 0.0;
        for i in 1..self.b.len() {
            acc += self.b[i] * self.u_hist[i - 1];
        }
        for i in 1..self.a.len() {
            acc -= self.a[i] * self.y_hist[i - 1];
        }
        acc / self.a[0]
    }

    /// Commit the step with known input and output (used after resolving an
    /// algebraic loop with `step_free` + `feedthrough`).
    pub fn push(&mut self, u: f64, y: f64) {
        self.u_hist.rotate_right(1);
        if !self.u_hist.is_empty() {
            self.u_hist[0] = u;
        }
        self.y_hist.rotate_right(1);
        if !self.y_hist.is_empty() {
            self.y_hist[0] = y;
        }
    }

    pub fn step(&mut self, u: f64) -> f64 {
        let y = self.step_free() + self.feedthrough() * u;
        self.push(u, y);
        y
    }
}

/// Closed-loop map `C*G / (1 + C*G)` and the sensitivity `1 / (1 + C*G)`.
pub fn feedback(c: &TransferFunction, g: &TransferFunction) -> Result<(TransferFunction, TransferFunction)> {
    let open_num = poly_mul(&c.num, &g.num);
    let open_den = poly_mul(&c.den, &g.den);
    let closed_den = poly_add(&open_den, &open_num);
    let scale = closed_den.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale <= TRIM_TOL {
        return Err(Error::ZeroDenominator);
    }
    let closed = TransferFunction::new(open_num, closed_den.clone(), g.sample_time)?;
    let sens = TransferFunction::new(open_den, closed_den, g.sample_time)?;
    Ok((closed, sens))
}

/// True iff every pole of the minimal realization has modulus `< 1 - tolerance`.
pub fn is_stable(tf: &TransferFunction, tolerance: f64) -> Result<bool> {
    if tf.is_zero() {
        return Ok(true);
    }
    let min = tf.minimal();
    Ok(min.poles().iter().all(|p| p.norm() < 1.0 - tolerance))
}

/// Impulse-response l2 norm. The horizon starts at `horizon` samples and
/// doubles until the energy of the last block falls below `1e-12` of the
/// accumulated total.
pub fn norm_h2(tf: &TransferFunction, horizon: usize) -> Result<f64> {
    let min = tf.minimal();
    if min.is_zero() {
        return Ok(0.0);
    }
    if !is_stable(&min, STABILITY_TOL)? {
        return Err(Error::Unstable);
    }
    let mut filter = Filter::new(&min);
    let mut total = 0.0f64;
    let mut n = 0usize;
    let mut block = horizon.max(256);
    const MAX_SAMPLES: usize = 50_000_000;
    loop {
        let mut block_energy = 0.0;
        for i in 0..block {
            let u = if n + i == 0 { 1.0 } else { 0.0 };
            let y = filter.step(u);
            block_energy += y * y;
        }
        n += block;
        total += block_energy;
        if block_energy <= 1e-12 * total || n >= MAX_SAMPLES {
            break;
        }
        block = (block * 2).min(MAX_SAMPLES - n).max(1);
    }
    Ok(total.sqrt())
}

/// Peak gain over frequency: max of `|tf(e^{j w})|` on a uniform grid on
/// `[0, pi]`, refined around the maximizer.
pub fn norm_hinf(tf: &TransferFunction, grid_size: usize) -> Result<f64> {
    let min = tf.minimal();
    if min.is_zero() {
        return Ok(0.0);
    }
    if !is_stable(&min, STABILITY_TOL)? {
        return Err(Error::Unstable);
    }
    let n = grid_size.max(64);
    let eval = |w: f64| min.freq_response(w).norm();
    let mut best_w = 0.0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        let w = std::f64::consts::PI * i as f64 / n as f64;
        let v = eval(w);
        if v > best {
            best = v;
            best_w = w;
        }
    }
    // Local refinement around the coarse maximizer.
    let mut half = std::f64::consts::PI / n as f64;
    for _ in 0..6 {
        let lo = (best_w - half).max(0.0);
        let hi = (best_w + half).min(std::f64::consts::PI);
        for i in 0..=64 {
            let w = lo + (hi - lo) * i as f64 / 64.0;
            let v = eval(w);
            if v > best {
                best = v;
                best_w = w;
            }
        }
        half /= 16.0;
    }
    Ok(best)
}

/// Fixed controller bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Discrete PI with trapezoidal integrator:
    /// `C = Kp + Ki*(Ts/2)*(1 + q^-1)/(1 - q^-1)`, `theta = [Kp, Ki]`.
    Pi,
}

impl Basis {
    pub fn dimension(&self) -> usize {
        match self {
            Basis::Pi => 2,
        }
    }

    /// The basis transfer functions `beta(q^-1)`.
    pub fn functions(&self, sample_time: f64) -> Vec<TransferFunction> {
        match self {
            Basis::Pi => vec![
                TransferFunction::unit(sample_time),
                TransferFunction::new(
                    vec![sample_time / 2.0, sample_time / 2.0],
                    vec![1.0, -1.0],
                    sample_time,
                )
                .unwrap(),
            ],
        }
    }
}

/// Parameter vector over a fixed basis; materializes to `theta' * beta(q^-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub basis: Basis,
    pub theta: Vec<f64>,
    #[serde(rename = "ts")]
    pub sample_time: f64,
}

impl ControllerParams {
    pub fn new(basis: Basis, theta: Vec<f64>, sample_time: f64) -> Result<Self> {
        if theta.len() != basis.dimension() {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "basis {:?} needs {} parameters, got {}",
                    basis,
                    basis.dimension(),
                    theta.len()
                ),
            });
        }
        Ok(ControllerParams { basis, theta, sample_time })
    }

    pub fn to_tf(&self) -> TransferFunction {
        let funcs = self.basis.functions(self.sample_time);
        let mut acc = TransferFunction::constant(0.0, self.sample_time);
        for (w, f) in self.theta.iter().zip(funcs.iter()) {
            acc = acc.add(&f.scale(*w));
        }
        acc
    }
}
