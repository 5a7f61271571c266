//! Exact softmax fixed point of one distillation round.
//!
//! Round `t` outputs satisfy, for every sample `i`,
//!
//! `y_i = σ(Σ_j G_ij (y_j^prev − y_j))`, with `G = Φ/(Knλ)`,
//!
//! which is the stationarity condition of the ridge-regularised
//! cross-entropy fit without the softmax linearisation. The solver minimises
//! `L(Y) = ‖Y − F(Y)‖²_F` where `F` is the right-hand side above, and reports
//! convergence on the ℓ∞ residual.
//!
//! Two descent methods are provided. Plain gradient descent follows the
//! textbook procedure but its step size is limited by `‖G‖`, which reaches
//! the hundreds at small `λ`; the default Newton method solves the linearised
//! residual equation with conjugate gradients on an equivalent SPD system and
//! globalises with a backtracking line search on `L`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{trajectory, OutputMatrix};
use crate::error::{Error, Result};
use crate::gram::{analytic_eigensystem, build_gram, numeric_eigensystem, GramModel};
use crate::noise::LabelAssignment;

/// Softmax with temperature: `exp((v_k − max v)/τ) / Σ`.
pub fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

/// First-order softmax around zero, `1/K + v/K`, for zero-mean logits.
pub fn linearized_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let k = v.len() as f64;
    let sum: f64 = v.iter().sum();
    if sum.abs() > 1e-9 {
        return Err(Error::invalid(format!("logits must be zero-mean (sum = {sum:.3e})")));
    }
    Ok(v.iter().map(|x| 1.0 / k + x / k).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Newton steps on the residual equation with an Armijo line search.
    Newton,
    /// Fixed-step gradient descent on `‖Y − F(Y)‖²_F`.
    GradientDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Step size for gradient descent (Newton always tries the full step first).
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the ℓ∞ fixed-point residual.
    pub epsilon: f64,
    pub seed: u64,
    pub method: SolverMethod,
    /// Start from the linearised prediction instead of random columns.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_iterations: 50_000,
            epsilon: 1e-10,
            seed: 0,
            method: SolverMethod::Newton,
            warm_start: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub outputs: OutputMatrix,
    pub converged: bool,
    /// ℓ∞ fixed-point residual of `outputs`.
    pub final_loss: f64,
    pub iterations_used: usize,
}

/// The JSON convergence summary written next to oracle outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub final_loss: f64,
    pub iterations_used: usize,
}

impl OracleResult {
    pub fn report(&self) -> ConvergenceReport {
        ConvergenceReport {
            converged: self.converged,
            final_loss: self.final_loss,
            iterations_used: self.iterations_used,
        }
    }
}

/// One round's fixed-point problem.
pub struct FixedPoint<'a> {
    /// `Φ/(Knλ)`.
    coupling: DMatrix<f64>,
    y_prev: &'a DMatrix<f64>,
    tau: f64,
}

/// Map value, residual and softmax Jacobian blocks at an iterate.
struct Evaluation {
    f: DMatrix<f64>,
    residual: DMatrix<f64>,
    objective: f64,
    linf: f64,
}

impl<'a> FixedPoint<'a> {
    pub fn new(y_prev: &'a DMatrix<f64>, gram: &DMatrix<f64>, lambda: f64, k: usize, n: usize, tau: f64) -> Result<Self> {
        if gram.nrows() != y_prev.ncols() || !gram.is_square() {
            return Err(Error::invalid(format!(
                "Gram matrix is {}x{} but there are {} samples",
                gram.nrows(),
                gram.ncols(),
                y_prev.ncols()
            )));
        }
        if y_prev.nrows() != k || y_prev.ncols() != k * n {
            return Err(Error::invalid(format!("previous outputs must be {k}x{}", k * n)));
        }
        if !(lambda > 0.0 && tau > 0.0) {
            return Err(Error::invalid("need λ > 0 and τ > 0"));
        }
        for (i, col) in y_prev.column_iter().enumerate() {
            if (col.sum() - 1.0).abs() > 1e-9 || col.iter().any(|&x| x < -1e-12) {
                return Err(Error::invalid(format!("previous output column {i} is not a distribution")));
            }
        }
        Ok(Self { coupling: gram / ((k * n) as f64 * lambda), y_prev, tau })
    }

    /// Per-sample logits of the right-hand side (temperature-scaled).
    pub fn logits(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        ((self.y_prev - y) * &self.coupling) * self.tau
    }

    pub fn map(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.logits(y);
        let mut f = DMatrix::zeros(z.nrows(), z.ncols());
        for (i, col) in z.column_iter().enumerate() {
            let v: Vec<f64> = col.iter().copied().collect();
            f.set_column(i, &DVector::from_vec(softmax(&v, self.tau)));
        }
        f
    }

    /// Largest |Σ_k logit| over samples; zero up to rounding whenever both
    /// output matrices have unit column sums.
    pub fn max_logit_sum(&self, y: &DMatrix<f64>) -> f64 {
        self.logits(y).column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max)
    }

    fn evaluate(&self, y: &DMatrix<f64>) -> Result<Evaluation> {
        let z = self.logits(y);
        let drift = z.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max);
        let scale = z.amax().max(1.0);
        if drift > 1e-9 * scale {
            return Err(Error::numerical(format!(
                "logits lost their zero mean (max |Σ_k v_k| = {drift:.3e})"
            )));
        }
        let mut f = DMatrix::zeros(z.nrows(), z.ncols());
        for (i, col) in z.column_iter().enumerate() {
            let v: Vec<f64> = col.iter().copied().collect();
            f.set_column(i, &DVector::from_vec(softmax(&v, self.tau)));
        }
        let residual = y - &f;
        let objective = residual.norm_squared();
        let linf = residual.amax();
        Ok(Evaluation { f, residual, objective, linf })
    }

    /// `(L, ∇L)` for `L = ‖Y − F(Y)‖²_F`:
    /// `∇L = 2(R + (S ⊙ R)G)` with `S_i = diag(f_i) − f_i f_iᵀ`.
    pub fn objective_and_gradient(&self, y: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let f = self.map(y);
        let r = y - &f;
        let sr = jacobian_apply(&f, &r);
        let g = (&r + sr * &self.coupling) * 2.0;
        (r.norm_squared(), g)
    }

    /// ℓ∞ residual `‖Y − F(Y)‖∞`.
    pub fn residual_linf(&self, y: &DMatrix<f64>) -> f64 {
        (y - self.map(y)).amax()
    }
}

/// Columnwise `S_i x_i` with `S_i = diag(f_i) − f_i f_iᵀ`.
fn jacobian_apply(f: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.ncols() {
        let fx: f64 = (0..x.nrows()).map(|k| f[(k, i)] * x[(k, i)]).sum();
        for k in 0..x.nrows() {
            out[(k, i)] = f[(k, i)] * (x[(k, i)] - fx);
        }
    }
    out
}

/// Factor `B_i = D_i^{1/2}(I − u_i u_iᵀ)` of `S_i = B_i B_iᵀ`, with
/// `u_i = √f_i` (a unit vector since `Σ f = 1`).
struct JacobianFactor {
    sqrt_f: DMatrix<f64>,
}

impl JacobianFactor {
    fn new(f: &DMatrix<f64>) -> Self {
        Self { sqrt_f: f.map(|x| x.max(0.0).sqrt()) }
    }

    /// Normalised `u_i` (guards against rounding in `Σ f`).
    fn unit(&self, i: usize) -> DVector<f64> {
        let u = self.sqrt_f.column(i).into_owned();
        let norm = u.norm();
        if norm > 0.0 { u / norm } else { u }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.ncols() {
            let u = self.unit(i);
            let proj = x.column(i) - &u * u.dot(&x.column(i));
            for k in 0..x.nrows() {
                out[(k, i)] = self.sqrt_f[(k, i)] * proj[k];
            }
        }
        out
    }

    fn apply_transpose(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(w.nrows(), w.ncols());
        for i in 0..w.ncols() {
            let u = self.unit(i);
            let dw = w.column(i).component_mul(&self.sqrt_f.column(i));
            let proj = &dw - &u * u.dot(&dw);
            out.set_column(i, &proj);
        }
        out
    }
}

enum NewtonStep {
    Direction(DMatrix<f64>),
    /// CG met non-positive curvature (indefinite coupling).
    Indefinite,
}

/// Solves `(I + S∘G) δ = b` through the SPD system
/// `(I + BᵀGB) x = Bᵀ(bG)`, `δ = b − Bx`.
fn newton_direction(b: &DMatrix<f64>, factor: &JacobianFactor, coupling: &DMatrix<f64>, tol: f64) -> NewtonStep {
    let op = |x: &DMatrix<f64>| -> DMatrix<f64> { x + factor.apply_transpose(&(factor.apply(x) * coupling)) };
    let rhs = factor.apply_transpose(&(b * coupling));
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return NewtonStep::Direction(b.clone());
    }
    let mut x = DMatrix::zeros(b.nrows(), b.ncols());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let max_iter = 10 * b.len().max(50);
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * rhs_norm {
            break;
        }
        let ap = op(&p);
        let curvature = p.dot(&ap);
        if curvature <= 0.0 {
            return NewtonStep::Indefinite;
        }
        let alpha = rr / curvature;
        x += &p * alpha;
        r -= &ap * alpha;
        let rr_new = r.norm_squared();
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    NewtonStep::Direction(b - factor.apply(&x))
}

/// Dense fallback for `(I + S∘G) δ = b` when the coupling is indefinite.
fn dense_newton_direction(b: &DMatrix<f64>, f: &DMatrix<f64>, coupling: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (k, m) = (b.nrows(), b.ncols());
    let dim = k * m;
    if dim > 3000 {
        return None;
    }
    // Unknown δ[(a, i)] at index i*k + a.
    let mut jac = DMatrix::identity(dim, dim);
    for i in 0..m {
        for a in 0..k {
            for c in 0..k {
                let s = if a == c { f[(a, i)] - f[(a, i)] * f[(c, i)] } else { -f[(a, i)] * f[(c, i)] };
                if s == 0.0 {
                    continue;
                }
                for j in 0..m {
                    jac[(i * k + a, j * k + c)] += s * coupling[(j, i)];
                }
            }
        }
    }
    let rhs = DVector::from_iterator(dim, (0..m).flat_map(|i| (0..k).map(move |a| b[(a, i)])));
    let sol = jac.lu().solve(&rhs)?;
    Some(DMatrix::from_fn(k, m, |a, i| sol[i * k + a]))
}

fn initial_iterate(problem: &FixedPoint, gram: &DMatrix<f64>, lambda: f64, k: usize, n: usize, config: &SolverConfig) -> DMatrix<f64> {
    if config.warm_start {
        // Linearised one-round prediction: (Y − U)(κI + Φ) = (Y_prev − U)Φ.
        let kappa = (k * k * n) as f64 * lambda;
        let shifted = gram + DMatrix::identity(gram.nrows(), gram.nrows()) * kappa;
        if let Some(chol) = Cholesky::new(shifted) {
            let u = 1.0 / k as f64;
            let rhs = (problem.y_prev.map(|x| x - u) * gram).transpose();
            let sol = chol.solve(&rhs).transpose();
            return sol.map(|x| x + u);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y = DMatrix::from_fn(k, k * n, |_, _| rng.random::<f64>());
    for mut col in y.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    y
}

/// Solves one round's softmax fixed point starting from normalised uniform
/// random columns (or the linearised prediction with `warm_start`).
pub fn solve_round(
    y_prev: &OutputMatrix,
    gram: &DMatrix<f64>,
    lambda: f64,
    k: usize,
    n: usize,
    config: &SolverConfig,
    tau: f64,
) -> Result<OracleResult> {
    config.validate()?;
    let problem = FixedPoint::new(&y_prev.values, gram, lambda, k, n, tau)?;
    let mut y = initial_iterate(&problem, gram, lambda, k, n, config);
    let mut eval = problem.evaluate(&y)?;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        if !eval.objective.is_finite() {
            return Err(Error::numerical(format!("loss became non-finite at iteration {iterations}")));
        }
        if eval.linf < config.epsilon {
            break;
        }
        iterations += 1;
        let next = match config.method {
            SolverMethod::GradientDescent => {
                let sr = jacobian_apply(&eval.f, &eval.residual);
                let grad = (&eval.residual + sr * &problem.coupling) * 2.0;
                let y_new = &y - grad * config.learning_rate;
                Some((problem.evaluate(&y_new)?, y_new))
            }
            SolverMethod::Newton => newton_update(&problem, &y, &eval)?,
        };
        match next {
            Some((e, y_new)) => {
                y = y_new;
                eval = e;
            }
            None => break, // no further decrease possible at working precision
        }
    }
    if !eval.objective.is_finite() {
        return Err(Error::numerical(format!("loss became non-finite at iteration {iterations}")));
    }
    let converged = eval.linf < config.epsilon;
    Ok(OracleResult {
        outputs: OutputMatrix::new(y, y_prev.round + 1),
        converged,
        final_loss: eval.linf,
        iterations_used: iterations,
    })
}

fn newton_update(problem: &FixedPoint, y: &DMatrix<f64>, eval: &Evaluation) -> Result<Option<(Evaluation, DMatrix<f64>)>> {
    let b = -&eval.residual;
    let factor = JacobianFactor::new(&eval.f);
    let tol = eval.objective.sqrt().clamp(1e-14, 1e-2);
    let dir = match newton_direction(&b, &factor, &problem.coupling, tol) {
        NewtonStep::Direction(d) => d,
        NewtonStep::Indefinite => match dense_newton_direction(&b, &eval.f, &problem.coupling) {
            Some(d) => d,
            None => {
                return Err(Error::numerical(
                    "indefinite coupling: the Newton system is not positive definite and too large for a dense solve",
                ))
            }
        },
    };
    // Armijo on L: the Newton direction has directional derivative −2L.
    let mut step = 1.0;
    for _ in 0..60 {
        let y_new = y + &dir * step;
        let e = problem.evaluate(&y_new)?;
        if e.objective.is_finite() && e.objective <= (1.0 - 2e-4 * step) * eval.objective {
            return Ok(Some((e, y_new)));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Exact-vs-linearised gap over a multi-round run.
#[derive(Clone, Debug, Serialize)]
pub struct ApproxError {
    pub max_linf: f64,
    /// Max ℓ∞ gap at each round `1..=t`.
    pub per_round: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// Runs the oracle for rounds `1..=t` (each round starting from the
/// previous oracle outputs) and compares against the closed-form
/// trajectory from the same one-hot targets.
pub fn measure_approx_error(
    model: &GramModel,
    labels: &LabelAssignment,
    lambda: f64,
    t: u32,
    config: &SolverConfig,
) -> Result<ApproxError> {
    model.validate()?;
    if labels.k() != model.k || labels.n() != model.n {
        return Err(Error::invalid("label assignment does not match the Gram model's K and n"));
    }
    let gram = build_gram(model)?;
    let eig = if model.is_perturbed() { numeric_eigensystem(&gram)? } else { analytic_eigensystem(model)? };
    let y0 = OutputMatrix::one_hot(&labels.given_labels, model.k)?;
    let closed = trajectory(&y0, &eig, lambda, model.n, t)?;
    let mut prev = y0;
    let mut per_round = Vec::new();
    let mut iterations = Vec::new();
    for round in 1..=t {
        let res = solve_round(&prev, &gram, lambda, model.k, model.n, config, 1.0)?;
        if !res.converged {
            return Err(Error::numerical(format!(
                "oracle did not converge at round {round} (residual {:.3e} after {} iterations)",
                res.final_loss, res.iterations_used
            )));
        }
        per_round.push((&res.outputs.values - &closed[round as usize].values).amax());
        iterations.push(res.iterations_used);
        prev = res.outputs;
    }
    Ok(ApproxError {
        max_linf: per_round.iter().copied().fold(0.0, f64::max),
        per_round,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4], 1.0), vec![0.25; 4]);
        let s = softmax(&[2f64.ln(), 0.0], 1.0);
        assert_abs_diff_eq!(s[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 1.0 / 3.0, epsilon = 1e-15);
        let a = softmax(&[1.0, 2.0, 3.0], 2.0);
        let b = softmax(&[0.5, 1.0, 1.5], 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        let big = softmax(&[1000.0, 0.0, -1000.0], 1.0);
        assert_abs_diff_eq!(big.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn linearized_examples() {
        assert_eq!(linearized_softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let l = linearized_softmax(&[0.4, -0.4]).unwrap();
        assert_abs_diff_eq!(l[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(l[1], 0.3, epsilon = 1e-15);
        let l = linearized_softmax(&[0.1, 0.1, -0.2]).unwrap();
        assert_abs_diff_eq!(l[0], 0.366667, epsilon = 1e-6);
        assert_abs_diff_eq!(l[2], 0.266667, epsilon = 1e-6);
        assert!(linearized_softmax(&[0.1, 0.1]).is_err());
    }

    #[test]
    fn uniform_previous_is_a_fixed_point() {
        let prev = OutputMatrix::new(DMatrix::from_element(3, 6, 1.0 / 3.0), 0);
        let gram = DMatrix::identity(6, 6);
        let cfg = SolverConfig { warm_start: true, ..SolverConfig::default() };
        let res = solve_round(&prev, &gram, 0.1, 3, 2, &cfg, 1.0).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations_used, 0);
        assert!(res.final_loss < 1e-15);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 { hi = mid } else { lo = mid }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_class_scalar_fixed_point() {
        // K = 2, n = 1, identity Gram, λ = 0.25: y = σ(2(e − y)), and by
        // symmetry y_1 = σ_1(2((1 − y_1) − (0 − y_2))) reduces to the scalar
        // equation y = 1/(1 + exp(−4(1 − 2y)·... )) solved by bisection.
        let prev = OutputMatrix::one_hot(&[0, 1], 2).unwrap();
        let gram = DMatrix::identity(2, 2);
        for method in [SolverMethod::Newton, SolverMethod::GradientDescent] {
            let cfg = SolverConfig { method, learning_rate: 0.2, ..SolverConfig::default() };
            let res = solve_round(&prev, &gram, 0.25, 2, 1, &cfg, 1.0).unwrap();
            assert!(res.converged, "{method:?}");
            // Column 0: logits 2(e_1 − y); logit difference = 2((1 − y1) − (0 − (1 − y1))) = 4(1 − y1).
            let y1 = bisect(|y| y - 1.0 / (1.0 + (-4.0 * (1.0 - y)).exp()), 0.0, 1.0);
            assert_abs_diff_eq!(res.outputs.values[(0, 0)], y1, epsilon = 1e-9);
            assert_abs_diff_eq!(res.outputs.values[(1, 1)], y1, epsilon = 1e-9);
        }
    }

    #[test]
    fn newton_and_gradient_descent_agree() {
        let gram = DMatrix::from_row_slice(4, 4, &[1.0, 0.5, 0.1, 0.1, 0.5, 1.0, 0.1, 0.1, 0.1, 0.1, 1.0, 0.5, 0.1, 0.1, 0.5, 1.0]);
        let prev = OutputMatrix::one_hot(&[0, 1, 0, 1], 2).unwrap();
        let newton = solve_round(&prev, &gram, 0.3, 2, 2, &SolverConfig::default(), 1.0).unwrap();
        let gd = solve_round(
            &prev,
            &gram,
            0.3,
            2,
            2,
            &SolverConfig { method: SolverMethod::GradientDescent, learning_rate: 0.2, ..SolverConfig::default() },
            1.0,
        )
        .unwrap();
        assert!(newton.converged && gd.converged);
        assert!((&newton.outputs.values - &gd.outputs.values).amax() < 1e-9);
        assert!(newton.iterations_used < gd.iterations_used);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(6, 4, |_, _| rng.random::<f64>() - 0.5);
        let mut gram = &x * x.transpose();
        let d = gram.diagonal().map(|v| 1.0 / v.sqrt());
        gram = DMatrix::from_fn(6, 6, |i, j| gram[(i, j)] * d[i] * d[j]);
        let prev = OutputMatrix::one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let problem = FixedPoint::new(&prev.values, &gram, 0.05, 3, 2, 1.0).unwrap();
        let y = DMatrix::from_fn(3, 6, |_, _| rng.random::<f64>());
        let (_, g) = problem.objective_and_gradient(&y);
        let h = 1e-6;
        for idx in 0..y.len() {
            let mut plus = y.clone();
            let mut minus = y.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (problem.objective_and_gradient(&plus).0 - problem.objective_and_gradient(&minus).0) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-4 * g[idx].abs().max(1e-3), "{idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let gram = DMatrix::identity(4, 4) * 0.6 + DMatrix::from_element(4, 4, 0.4);
        let prev = OutputMatrix::one_hot(&[0, 0, 1, 1], 2).unwrap();
        let cfg = SolverConfig { seed: 11, ..SolverConfig::default() };
        let a = solve_round(&prev, &gram, 0.05, 2, 2, &cfg, 1.0).unwrap();
        let b = solve_round(&prev, &gram, 0.05, 2, 2, &cfg, 1.0).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.iterations_used, b.iterations_used);
    }

    #[test]
    fn non_distribution_previous_rejected() {
        let prev = OutputMatrix::new(DMatrix::from_element(2, 2, 0.7), 0);
        assert!(solve_round(&prev, &DMatrix::identity(2, 2), 0.1, 2, 1, &SolverConfig::default(), 1.0).is_err());
    }
}
