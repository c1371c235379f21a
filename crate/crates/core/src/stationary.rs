//! Stationary action eigenvalues λ₀(x₀, x_T, T).
//!
//! λ is stationarized over the initial coefficients by quasi-Newton root
//! finding on its finite-difference gradient. By default only the linear block
//! `(s1, ρ1)` is searched: the quadratic block `(s2, ρ2)` of each guess is held
//! fixed as the wavepacket shape. With the x-independent residual
//! `f = |s1|²/2m − (ħ²/2m)(|ρ1|² + tr ρ2) + U0` the derivative of λ along `ρ2`
//! never vanishes, so a search over the full block has no finite root.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::dynamics::{evolve, evolve_summary, CoefficientState, DEFAULT_STEPS};
use crate::error::{QapError, Result};
use crate::model::{PhysicalParams, PolynomialField, PotentialSchedule};
use crate::oracle::{auto_domain, expectation, propagate_grid_observed, GridState};
use crate::quadrature::simpson;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-7;
pub const DEFAULT_MAX_ITERATIONS: usize = 50;
/// Relative disagreement allowed between the probe derivative at α and α/2.
pub const RICHARDSON_TOL: f64 = 1e-3;
/// Points of the bracket scan in [`predict_endpoint`].
pub const BRACKET_SCAN_POINTS: usize = 16;
/// Step of the endpoint derivatives of λ₀.
pub const ENDPOINT_FD_STEP: f64 = 1e-4;
const CAUSTIC_SIN_TOL: f64 = 1e-9;

/// Initial data `(s1, s2, ρ1, ρ2)` at t = 0, symmetric blocks packed upper
/// triangle row by row. ρ₀(0) is fixed to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCoefficientVector {
    dim: usize,
    values: Vec<f64>,
}

fn sym_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

fn pack_sym(m: &[f64], dim: usize) -> impl Iterator<Item = f64> + '_ {
    (0..dim).flat_map(move |i| (i..dim).map(move |j| m[i * dim + j]))
}

fn unpack_sym(packed: &[f64], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            m[i * dim + j] = packed[k];
            m[j * dim + i] = packed[k];
            k += 1;
        }
    }
    m
}

impl InitialCoefficientVector {
    pub fn len_for(dim: usize) -> usize {
        2 * dim + dim * (dim + 1)
    }

    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::len_for(dim) {
            return Err(QapError::DimensionMismatch {
                expected: Self::len_for(dim),
                got: values.len(),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; Self::len_for(dim)],
        }
    }

    /// `(s1, s2, ρ1, ρ2)` in one dimension.
    pub fn scalar(s1: f64, s2: f64, rho1: f64, rho2: f64) -> Self {
        Self {
            dim: 1,
            values: vec![s1, s2, rho1, rho2],
        }
    }

    /// Packs the quadratic part of a state; ρ₀ and higher orders are dropped.
    pub fn from_state(state: &CoefficientState) -> Self {
        let d = state.dim();
        let values = state
            .s1()
            .iter()
            .copied()
            .chain(pack_sym(state.s2(), d))
            .chain(state.rho1().iter().copied())
            .chain(pack_sym(state.rho2(), d))
            .collect();
        Self { dim: d, values }
    }

    pub fn to_state(&self) -> CoefficientState {
        let d = self.dim;
        let q = sym_len(d);
        let v = &self.values;
        let mut st = CoefficientState::zero(d);
        st.s.c1 = v[..d].to_vec();
        st.s.c2 = unpack_sym(&v[d..d + q], d);
        st.rho.c1 = v[d + q..2 * d + q].to_vec();
        st.rho.c2 = unpack_sym(&v[2 * d + q..], d);
        st
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn s1(&self) -> &[f64] {
        &self.values[..self.dim]
    }

    pub fn rho1(&self) -> &[f64] {
        let q = sym_len(self.dim);
        &self.values[self.dim + q..2 * self.dim + q]
    }

    /// Positions of `s1` and `ρ1` in the packed vector.
    pub fn linear_indices(&self) -> Vec<usize> {
        let d = self.dim;
        let q = sym_len(d);
        (0..d).chain(d + q..2 * d + q).collect()
    }

    /// Same vector with the linear block replaced by that of `other`.
    pub fn with_linear_block_of(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for i in self.linear_indices() {
            out.values[i] = other.values[i];
        }
        out
    }
}

/// Which coefficients the stationary search varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchBlock {
    /// `s1` and `ρ1`; the quadratic block is a fixed shape.
    #[default]
    Linear,
    /// Every packed coefficient.
    Full,
}

impl SearchBlock {
    fn indices(self, c: &InitialCoefficientVector) -> Vec<usize> {
        match self {
            SearchBlock::Linear => c.linear_indices(),
            SearchBlock::Full => (0..c.values.len()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub fd_step: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub block: SearchBlock,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            fd_step: DEFAULT_FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            block: SearchBlock::Linear,
        }
    }
}

/// Endpoints, duration, potential and integrator resolution of one λ₀ query.
#[derive(Debug, Clone)]
pub struct StationaryProblem {
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    pub duration: f64,
    pub potential: PotentialSchedule,
    pub params: PhysicalParams,
    pub steps: usize,
}

impl StationaryProblem {
    pub fn new(
        x0: Vec<f64>,
        x_t: Vec<f64>,
        duration: f64,
        potential: PotentialSchedule,
        params: PhysicalParams,
    ) -> Self {
        Self {
            x0,
            x_t,
            duration,
            potential,
            params,
            steps: DEFAULT_STEPS,
        }
    }

    fn with_endpoints(&self, x0: f64, x_t: f64) -> Self {
        Self {
            x0: vec![x0],
            x_t: vec![x_t],
            ..self.clone()
        }
    }

    fn with_potential(&self, potential: PotentialSchedule) -> Self {
        Self {
            potential,
            ..self.clone()
        }
    }

    pub fn lambda(&self, c: &InitialCoefficientVector) -> Result<f64> {
        lambda_of_initial(
            c,
            &self.x0,
            &self.x_t,
            self.duration,
            &self.potential,
            &self.params,
            self.steps,
        )
    }
}

/// λ(c) = s(x_T,T) − s(x₀,0) − ∫f dt for the flow started from `c`.
pub fn lambda_of_initial(
    c: &InitialCoefficientVector,
    x0: &[f64],
    x_t: &[f64],
    duration: f64,
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    steps: usize,
) -> Result<f64> {
    evolve_summary(&c.to_state(), potential, duration, params, steps)?.lambda(x0, x_t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryResult {
    pub c_star: InitialCoefficientVector,
    pub lambda0: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub multistart_index: usize,
}

/// Every guess of a multistart search.
#[derive(Debug, Clone, PartialEq)]
pub struct MultistartOutcome {
    /// Smallest gradient norm among guesses that were not abandoned.
    pub best: StationaryResult,
    /// Guesses abandoned on a numerical error, with the reason.
    pub abandoned: Vec<(usize, String)>,
}

/// Quadratic block `(s2, ρ2)` used by the default guesses: no chirp and the
/// ground-state width `ρ2 = −(mU2)^{1/2}/ħ` of the t = 0 potential. Negative
/// curvature directions get zero width, i.e. a plane-wave direction.
pub fn default_shape(
    potential: &PotentialSchedule,
    params: &PhysicalParams,
) -> (Vec<f64>, Vec<f64>) {
    let d = params.dimension;
    let u2 = DMatrix::from_row_slice(d, d, &potential.lookup(0.0).c2);
    let eig = SymmetricEigen::new(u2);
    let roots = eig
        .eigenvalues
        .map(|l| (params.mass * l.max(0.0)).sqrt() / params.hbar);
    let rho2 = -(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose());
    let rho2: Vec<f64> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| rho2[(i, j)])
        .collect();
    (vec![0.0; d * d], rho2)
}

/// Zero-momentum and classical-momentum (p = mΔx/T) guesses, both carrying
/// [`default_shape`].
pub fn default_guesses(problem: &StationaryProblem) -> Vec<InitialCoefficientVector> {
    let d = problem.params.dimension;
    let (s2, rho2) = default_shape(&problem.potential, &problem.params);
    let mut base = CoefficientState::zero(d);
    base.s.c2 = s2;
    base.rho.c2 = rho2;
    let zero = InitialCoefficientVector::from_state(&base);
    let mut moving = base;
    moving.s.c1 = problem
        .x0
        .iter()
        .zip(&problem.x_t)
        .map(|(a, b)| problem.params.mass * (b - a) / problem.duration)
        .collect();
    vec![zero, InitialCoefficientVector::from_state(&moving)]
}

struct Objective<'a> {
    problem: &'a StationaryProblem,
    base: InitialCoefficientVector,
    free: Vec<usize>,
    fd_step: f64,
}

impl Objective<'_> {
    fn point(&self, z: &DVector<f64>) -> InitialCoefficientVector {
        let mut c = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            c.values[i] = z[k];
        }
        c
    }

    fn lambda(&self, z: &DVector<f64>) -> Result<f64> {
        self.problem.lambda(&self.point(z))
    }

    fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(z.len());
        let mut w = z.clone();
        for k in 0..z.len() {
            let h = self.fd_step * z[k].abs().max(1.0);
            w[k] = z[k] + h;
            let plus = self.lambda(&w)?;
            w[k] = z[k] - h;
            let minus = self.lambda(&w)?;
            w[k] = z[k];
            g[k] = (plus - minus) / (2.0 * h);
        }
        Ok(g)
    }

    fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = z.len();
        let mut j = DMatrix::zeros(n, n);
        let mut w = z.clone();
        for k in 0..n {
            let h = 1e-3 * z[k].abs().max(1.0);
            w[k] = z[k] + h;
            let plus = self.gradient(&w)?;
            w[k] = z[k] - h;
            let minus = self.gradient(&w)?;
            w[k] = z[k];
            j.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        Ok(j)
    }
}

/// Quasi-Newton iteration from one guess. Errors abandon the guess.
fn search_one(
    problem: &StationaryProblem,
    guess: &InitialCoefficientVector,
    options: &SearchOptions,
    index: usize,
) -> Result<StationaryResult> {
    let obj = Objective {
        problem,
        base: guess.clone(),
        free: options.block.indices(guess),
        fd_step: options.fd_step,
    };
    let mut z = DVector::from_iterator(obj.free.len(), obj.free.iter().map(|&i| guess.values[i]));
    let mut g = obj.gradient(&z)?;
    let mut jac: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let mut fresh_jacobian = false;

    while g.norm() >= options.tolerance && iterations < options.max_iterations {
        let j = match jac.take() {
            Some(j) => j,
            None => {
                fresh_jacobian = true;
                obj.jacobian(&z)?
            }
        };
        let step = match j.clone().lu().solve(&(-&g)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ if !fresh_jacobian => {
                // a degenerate Broyden matrix; rebuild it
                jac = None;
                continue;
            }
            _ => break,
        };
        iterations += 1;
        let g_norm = g.norm();
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..8 {
            let trial = &z + alpha * &step;
            let g_trial = obj.gradient(&trial)?;
            if g_trial.norm() < (1.0 - 1e-4 * alpha) * g_norm {
                accepted = Some((trial, g_trial));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((z_new, g_new)) => {
                let dz = &z_new - &z;
                let dg = &g_new - &g;
                let denom = dz.dot(&dz);
                let mut j = j;
                if denom > 0.0 {
                    j += (&dg - &j * &dz) * dz.transpose() / denom;
                }
                jac = Some(j);
                fresh_jacobian = false;
                z = z_new;
                g = g_new;
            }
            None if !fresh_jacobian => jac = None,
            None => break,
        }
    }
    let c_star = obj.point(&z);
    let grad_norm = g.norm();
    Ok(StationaryResult {
        lambda0: problem.lambda(&c_star)?,
        c_star,
        grad_norm,
        iterations,
        converged: grad_norm < options.tolerance,
        multistart_index: index,
    })
}

/// Runs every guess in parallel and keeps the smallest gradient norm (ties to
/// the lower index). Fails only when every guess is abandoned.
pub fn search_stationary(
    problem: &StationaryProblem,
    guesses: &[InitialCoefficientVector],
    options: &SearchOptions,
) -> Result<MultistartOutcome> {
    if guesses.is_empty() {
        return Err(QapError::Input(
            "at least one initial guess is required".into(),
        ));
    }
    if let Some(g) = guesses.iter().find(|g| g.dim != problem.params.dimension) {
        return Err(QapError::DimensionMismatch {
            expected: problem.params.dimension,
            got: g.dim,
        });
    }
    if problem.x0.len() != problem.params.dimension || problem.x_t.len() != problem.params.dimension
    {
        return Err(QapError::DimensionMismatch {
            expected: problem.params.dimension,
            got: problem.x0.len().max(problem.x_t.len()),
        });
    }
    let runs: Vec<Result<StationaryResult>> = guesses
        .par_iter()
        .enumerate()
        .map(|(i, c)| search_one(problem, c, options, i))
        .collect();
    let mut best: Option<StationaryResult> = None;
    let mut abandoned = Vec::new();
    let mut last_err = None;
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.grad_norm < b.grad_norm) {
                    best = Some(r);
                }
            }
            Err(e) => {
                abandoned.push((i, e.to_string()));
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(best) => Ok(MultistartOutcome { best, abandoned }),
        None => Err(last_err.expect("at least one guess ran")),
    }
}

/// Best converged stationary point, or a non-convergence error.
pub fn find_stationary(
    problem: &StationaryProblem,
    guesses: &[InitialCoefficientVector],
    options: &SearchOptions,
) -> Result<StationaryResult> {
    let out = search_stationary(problem, guesses, options)?;
    if out.best.converged {
        Ok(out.best)
    } else {
        Err(QapError::NonConvergence {
            best_grad_norm: out.best.grad_norm,
        })
    }
}

/// Potentials with a closed-form classical action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassicalScenario {
    Free,
    /// U = αx.
    Linear {
        alpha: f64,
    },
    /// U = ½mω²x².
    Harmonic {
        omega: f64,
    },
}

impl ClassicalScenario {
    pub fn potential(&self, mass: f64) -> PolynomialField {
        match *self {
            ClassicalScenario::Free => PolynomialField::zero(1),
            ClassicalScenario::Linear { alpha } => PolynomialField::quadratic_1d(0.0, alpha, 0.0),
            ClassicalScenario::Harmonic { omega } => {
                PolynomialField::quadratic_1d(0.0, 0.0, mass * omega * omega)
            }
        }
    }

    pub fn schedule(&self, mass: f64) -> PotentialSchedule {
        PotentialSchedule::constant(self.potential(mass))
    }
}

/// Classical action I(x₀, x_T, T) along the classical path.
pub fn classical_action_reference(
    scenario: ClassicalScenario,
    mass: f64,
    x0: f64,
    x_t: f64,
    duration: f64,
) -> Result<f64> {
    let dx = x_t - x0;
    let free = mass * dx * dx / (2.0 * duration);
    match scenario {
        ClassicalScenario::Free => Ok(free),
        ClassicalScenario::Linear { alpha } => Ok(free
            - alpha * duration * (x0 + x_t) / 2.0
            - alpha * alpha * duration.powi(3) / (24.0 * mass)),
        ClassicalScenario::Harmonic { omega } => {
            let wt = omega * duration;
            if wt.sin().abs() < CAUSTIC_SIN_TOL {
                return Err(QapError::Caustic(format!("sin(ωT) vanishes at ωT = {wt}")));
            }
            Ok(mass * omega / (2.0 * wt.sin())
                * ((x0 * x0 + x_t * x_t) * wt.cos() - 2.0 * x0 * x_t))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub hbar: f64,
    pub lambda0: f64,
    pub classical: f64,
    pub rel_error: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// λ₀ against the classical action for decreasing ħ, each row warm-started
/// from the linear block of the previous converged row.
#[allow(clippy::too_many_arguments)]
pub fn classical_limit_sweep(
    hbar_list: &[f64],
    scenario: ClassicalScenario,
    mass: f64,
    x0: f64,
    x_t: f64,
    duration: f64,
    steps: usize,
    options: &SearchOptions,
) -> Result<Vec<SweepRow>> {
    if hbar_list.windows(2).any(|w| w[0] <= w[1]) {
        return Err(QapError::Input(
            "hbar list must be strictly descending".into(),
        ));
    }
    if hbar_list.is_empty() {
        return Ok(Vec::new());
    }
    let classical = classical_action_reference(scenario, mass, x0, x_t, duration)?;
    let mut rows = Vec::with_capacity(hbar_list.len());
    let mut warm: Option<InitialCoefficientVector> = None;
    for &hbar in hbar_list {
        let params = PhysicalParams::new(mass, hbar, 1);
        let mut problem = StationaryProblem::new(
            vec![x0],
            vec![x_t],
            duration,
            scenario.schedule(mass),
            params,
        );
        problem.steps = steps;
        let defaults = default_guesses(&problem);
        let guesses = match &warm {
            Some(prev) => vec![defaults[0].with_linear_block_of(prev)],
            None => defaults,
        };
        let best = search_stationary(&problem, &guesses, options)?.best;
        let err = (best.lambda0 - classical).abs();
        rows.push(SweepRow {
            hbar,
            lambda0: best.lambda0,
            classical,
            rel_error: if classical != 0.0 {
                err / classical.abs()
            } else {
                err
            },
            grad_norm: best.grad_norm,
            iterations: best.iterations,
            converged: best.converged,
        });
        warm = best.converged.then_some(best.c_star);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointPrediction {
    pub x_t: f64,
    pub p_t: f64,
    /// Evaluations of ∂λ₀/∂x₀ + p₀ after the scan.
    pub refinements: usize,
}

/// λ₀ at the given endpoints with the default guesses.
fn lambda0_at(
    problem: &StationaryProblem,
    x0: f64,
    x_t: f64,
    options: &SearchOptions,
) -> Result<f64> {
    let p = problem.with_endpoints(x0, x_t);
    Ok(find_stationary(&p, &default_guesses(&p), options)?.lambda0)
}

fn endpoint_derivative(
    problem: &StationaryProblem,
    x0: f64,
    x_t: f64,
    wrt_start: bool,
    options: &SearchOptions,
) -> Result<f64> {
    let (x, shift) = if wrt_start { (x0, true) } else { (x_t, false) };
    let h = ENDPOINT_FD_STEP * x.abs().max(1.0);
    let at = |d: f64| {
        if shift {
            lambda0_at(problem, x0 + d, x_t, options)
        } else {
            lambda0_at(problem, x0, x_t + d, options)
        }
    };
    Ok((at(h)? - at(-h)?) / (2.0 * h))
}

/// Solves ∂λ₀/∂x₀(x₀, x_T, T) = −p₀ for x_T in `bracket` and returns x_T with
/// p_T = ∂λ₀/∂x_T. `problem.x0`/`x_t` are ignored.
pub fn predict_endpoint(
    problem: &StationaryProblem,
    x0: f64,
    p0: f64,
    bracket: (f64, f64),
    options: &SearchOptions,
) -> Result<EndpointPrediction> {
    if problem.params.dimension != 1 {
        return Err(QapError::Precondition(
            "endpoint prediction is one-dimensional".into(),
        ));
    }
    let (lo, hi) = bracket;
    if !(hi > lo) {
        return Err(QapError::Input(format!("empty bracket [{lo}, {hi}]")));
    }
    let g = |x_t: f64| endpoint_derivative(problem, x0, x_t, true, options).map(|d| d + p0);
    let xs: Vec<f64> = (0..BRACKET_SCAN_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (BRACKET_SCAN_POINTS - 1) as f64)
        .collect();
    let gs: Vec<f64> = xs.par_iter().map(|&x| g(x)).collect::<Result<_>>()?;

    let mut intervals = Vec::new();
    let mut exact = Vec::new();
    for k in 0..xs.len() {
        if gs[k] == 0.0 {
            exact.push(xs[k]);
        } else if k + 1 < xs.len() && gs[k + 1] != 0.0 && (gs[k] < 0.0) != (gs[k + 1] < 0.0) {
            intervals.push((xs[k], xs[k + 1]));
        }
    }
    if intervals.len() + exact.len() == 0 {
        return Err(QapError::Bracket(format!(
            "no sign change of ∂λ₀/∂x₀ + p₀ on [{lo}, {hi}]"
        )));
    }
    if intervals.len() + exact.len() > 1 {
        intervals.extend(exact.iter().map(|&x| (x, x)));
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        return Err(QapError::Ambiguous { intervals });
    }

    let mut refinements = 0;
    let x_t = if let Some(&x) = exact.first() {
        x
    } else {
        let (mut a, mut b) = intervals[0];
        let mut ga = gs[xs.iter().position(|&x| x == a).expect("scan point")];
        let mut gb = gs[xs.iter().position(|&x| x == b).expect("scan point")];
        // a few bisections to get inside the basin, then secant
        for _ in 0..4 {
            let m = 0.5 * (a + b);
            let gm = g(m)?;
            refinements += 1;
            if gm == 0.0 {
                a = m;
                b = m;
                break;
            }
            if (gm < 0.0) == (ga < 0.0) {
                a = m;
                ga = gm;
            } else {
                b = m;
                gb = gm;
            }
        }
        let tol = 1e-10 * (hi - lo).abs().max(1.0);
        let (mut x_prev, mut g_prev, mut x, mut gx) = (a, ga, b, gb);
        for _ in 0..50 {
            if gx == 0.0 || (x - x_prev).abs() < tol || gx == g_prev {
                break;
            }
            let next = x - gx * (x - x_prev) / (gx - g_prev);
            let next = if next.is_finite() && next > lo - (hi - lo) && next < hi + (hi - lo) {
                next
            } else {
                0.5 * (a + b)
            };
            x_prev = x;
            g_prev = gx;
            x = next;
            gx = g(x)?;
            refinements += 1;
        }
        x
    };
    let p_t = endpoint_derivative(problem, x0, x_t, false, options)?;
    Ok(EndpointPrediction {
        x_t,
        p_t,
        refinements,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeMode {
    /// Initial coefficients held at the given vector.
    AtFixedC(InitialCoefficientVector),
    /// λ₀ re-solved at every α.
    AtStationary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Richardson-extrapolated dλ/dα at α = 0.
    pub derivative: f64,
    /// Central difference with step α.
    pub coarse: f64,
    /// Central difference with step α/2.
    pub fine: f64,
}

/// dλ/dα at α = 0 for the potential U + αg.
pub fn probe_sensitivity(
    problem: &StationaryProblem,
    probe: &PolynomialField,
    alpha_step: f64,
    mode: &ProbeMode,
    options: &SearchOptions,
) -> Result<ProbeResult> {
    if !(alpha_step > 0.0) {
        return Err(QapError::Input("probe step must be positive".into()));
    }
    if probe.dim() != problem.params.dimension {
        return Err(QapError::DimensionMismatch {
            expected: problem.params.dimension,
            got: probe.dim(),
        });
    }
    let guesses = default_guesses(problem);
    let lambda = |alpha: f64| -> Result<f64> {
        let p = problem.with_potential(problem.potential.with_added(alpha, probe)?);
        match mode {
            ProbeMode::AtFixedC(c) => p.lambda(c),
            ProbeMode::AtStationary => Ok(find_stationary(&p, &guesses, options)?.lambda0),
        }
    };
    let central = |a: f64| -> Result<f64> { Ok((lambda(a)? - lambda(-a)?) / (2.0 * a)) };
    let coarse = central(alpha_step)?;
    let fine = central(0.5 * alpha_step)?;
    if (coarse - fine).abs() > RICHARDSON_TOL * fine.abs().max(coarse.abs()) {
        return Err(QapError::StepSize { coarse, fine });
    }
    Ok(ProbeResult {
        derivative: (4.0 * fine - coarse) / 3.0,
        coarse,
        fine,
    })
}

/// −∫₀ᵀ ⟨g⟩ dt along the grid evolution of the packet `initial`.
pub fn probe_expectation_integral(
    initial: &CoefficientState,
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    duration: f64,
    probe: &PolynomialField,
    grid_points: usize,
    steps: usize,
) -> Result<f64> {
    let flow = evolve(initial, potential, duration, params, steps)?;
    let (xmin, xmax) = auto_domain(&flow)?;
    let start = GridState::from_coefficients(initial, params, xmin, xmax, grid_points)?;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut failure = None;
    propagate_grid_observed(
        &start,
        potential,
        params,
        duration,
        steps,
        |state| match expectation(state, probe) {
            Ok(v) => samples.push(v),
            Err(e) => failure = failure.take().or(Some(e)),
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(-simpson(&samples, duration / steps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_problem(x0: f64, x_t: f64, t: f64) -> StationaryProblem {
        StationaryProblem::new(
            vec![x0],
            vec![x_t],
            t,
            PotentialSchedule::free(1),
            PhysicalParams::unit(1),
        )
    }

    fn harmonic_problem(hbar: f64) -> StationaryProblem {
        let s = ClassicalScenario::Harmonic { omega: 1.0 };
        StationaryProblem::new(
            vec![0.0],
            vec![1.0],
            1.0,
            s.schedule(1.0),
            PhysicalParams::new(1.0, hbar, 1),
        )
    }

    #[test]
    fn packing_round_trip() {
        for d in 1..=3 {
            let n = InitialCoefficientVector::len_for(d);
            assert_eq!(n, 2 * d + d * (d + 1));
            let c =
                InitialCoefficientVector::new(d, (0..n).map(|i| i as f64 * 0.5 - 1.0).collect())
                    .unwrap();
            let back = InitialCoefficientVector::from_state(&c.to_state());
            assert_eq!(back, c);
            assert_eq!(c.to_state().rho0(), 0.0);
        }
        assert!(InitialCoefficientVector::new(2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn free_lambda_of_momentum() {
        let p = free_problem(0.0, 1.0, 1.0);
        for mom in [-1.0, 0.0, 0.5, 1.0, 2.5] {
            let c = InitialCoefficientVector::scalar(mom, 0.0, 0.0, 0.0);
            let got = p.lambda(&c).unwrap();
            assert!(
                (got - (mom - mom * mom / 2.0)).abs() < 1e-12,
                "p = {mom}: {got}"
            );
        }
        assert_eq!(p.lambda(&InitialCoefficientVector::zeros(1)).unwrap(), 0.0);
    }

    #[test]
    fn free_stationary_from_zero() {
        let p = free_problem(0.0, 1.0, 1.0);
        let r = find_stationary(
            &p,
            &[InitialCoefficientVector::zeros(1)],
            &SearchOptions::default(),
        )
        .unwrap();
        assert!((r.lambda0 - 0.5).abs() < 1e-8);
        assert!(r.grad_norm < 1e-7);
        let c = r.c_star.values();
        assert!(
            (c[0] - 1.0).abs() < 1e-6 && c[1..].iter().all(|v| v.abs() < 1e-6),
            "{c:?}"
        );
        let p2 = free_problem(0.0, 2.0, 1.0);
        let r2 = find_stationary(&p2, &default_guesses(&p2), &SearchOptions::default()).unwrap();
        assert!((r2.lambda0 - 2.0).abs() < 2e-8);
    }

    #[test]
    fn warm_start_is_a_fixed_point() {
        let p = harmonic_problem(0.5);
        let opts = SearchOptions::default();
        let r = find_stationary(&p, &default_guesses(&p), &opts).unwrap();
        let again = find_stationary(&p, std::slice::from_ref(&r.c_star), &opts).unwrap();
        assert!(again.iterations <= 2);
        for (a, b) in again.c_star.values().iter().zip(r.c_star.values()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn harmonic_eigenvalue_is_shifted_by_zero_point_phase() {
        let reference = classical_action_reference(
            ClassicalScenario::Harmonic { omega: 1.0 },
            1.0,
            0.0,
            1.0,
            1.0,
        )
        .unwrap();
        for hbar in [1.0, 0.25] {
            let p = harmonic_problem(hbar);
            let r = find_stationary(&p, &default_guesses(&p), &SearchOptions::default()).unwrap();
            assert!(
                (r.lambda0 - (reference - hbar / 2.0)).abs() < 1e-9,
                "{}",
                r.lambda0
            );
        }
    }

    #[test]
    fn full_block_has_no_stationary_point() {
        let p = free_problem(0.0, 1.0, 1.0);
        let opts = SearchOptions {
            block: SearchBlock::Full,
            max_iterations: 10,
            ..SearchOptions::default()
        };
        let err = find_stationary(
            &p,
            &[InitialCoefficientVector::scalar(1.0, 0.0, 0.0, 0.0)],
            &opts,
        );
        assert!(matches!(err, Err(QapError::NonConvergence { .. })));
    }

    #[test]
    fn empty_guess_list_is_rejected() {
        let p = free_problem(0.0, 1.0, 1.0);
        assert!(find_stationary(&p, &[], &SearchOptions::default()).is_err());
    }

    #[test]
    fn default_shape_follows_the_potential() {
        let params = PhysicalParams::new(2.0, 0.5, 1);
        let (s2, rho2) = default_shape(
            &ClassicalScenario::Harmonic { omega: 3.0 }.schedule(2.0),
            &params,
        );
        assert_eq!(s2, vec![0.0]);
        assert!((rho2[0] + 2.0 * 3.0 / 0.5).abs() < 1e-12);
        let (_, rho2) = default_shape(&PotentialSchedule::free(1), &params);
        assert_eq!(rho2, vec![0.0]);
    }

    #[test]
    fn classical_references() {
        let free = classical_action_reference(ClassicalScenario::Free, 1.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(free, 0.5);
        let h = classical_action_reference(
            ClassicalScenario::Harmonic { omega: 1.0 },
            1.0,
            0.0,
            1.0,
            1.0,
        )
        .unwrap();
        assert!((h - 1f64.cos() / (2.0 * 1f64.sin())).abs() < 1e-15);
        let caustic = classical_action_reference(
            ClassicalScenario::Harmonic { omega: 1.0 },
            1.0,
            0.0,
            1.0,
            std::f64::consts::PI,
        );
        assert!(matches!(caustic, Err(QapError::Caustic(_))));
    }

    /// Stationary value of the trapezoid-discretized classical action over
    /// broken lines with fixed ends; the stationarity system is tridiagonal.
    fn brute_force_action(scenario: ClassicalScenario, x0: f64, x_t: f64, t: f64, n: usize) -> f64 {
        let m = 1.0;
        let eps = t / n as f64;
        let (a1, a2) = match scenario {
            ClassicalScenario::Free => (0.0, 0.0),
            ClassicalScenario::Linear { alpha } => (alpha, 0.0),
            ClassicalScenario::Harmonic { omega } => (0.0, m * omega * omega),
        };
        let u = |x: f64| a1 * x + 0.5 * a2 * x * x;
        // ∂S/∂x_k = m(2x_k − x_{k−1} − x_{k+1})/ε − ε U'(x_k) = 0 for interior k
        let k = n - 1;
        let diag = 2.0 * m / eps - eps * a2;
        let off = -m / eps;
        let mut rhs = vec![eps * a1; k];
        rhs[0] -= off * x0;
        rhs[k - 1] -= off * x_t;
        let mut cp = vec![0.0; k];
        let mut d = diag;
        cp[0] = off / d;
        rhs[0] /= d;
        for i in 1..k {
            d = diag - off * cp[i - 1];
            cp[i] = off / d;
            rhs[i] = (rhs[i] - off * rhs[i - 1]) / d;
        }
        for i in (0..k - 1).rev() {
            rhs[i] -= cp[i] * rhs[i + 1];
        }
        let mut xs = vec![x0];
        xs.extend(rhs);
        xs.push(x_t);
        let mut s = 0.0;
        for i in 0..n {
            let v = (xs[i + 1] - xs[i]) / eps;
            s += eps * (0.5 * m * v * v - 0.5 * (u(xs[i]) + u(xs[i + 1])));
        }
        s
    }

    #[test]
    fn closed_forms_match_brute_force_extremization() {
        for scenario in [
            ClassicalScenario::Free,
            ClassicalScenario::Linear { alpha: 0.7 },
            ClassicalScenario::Harmonic { omega: 1.0 },
            ClassicalScenario::Harmonic { omega: 2.3 },
        ] {
            let (x0, x_t, t) = (0.3, -1.1, 1.0);
            let exact = classical_action_reference(scenario, 1.0, x0, x_t, t).unwrap();
            let brute = brute_force_action(scenario, x0, x_t, t, 4000);
            assert!(
                (exact - brute).abs() < 1e-6,
                "{scenario:?}: {exact} vs {brute}"
            );
        }
    }

    #[test]
    fn sweep_validates_and_handles_empty_lists() {
        let opts = SearchOptions::default();
        assert!(classical_limit_sweep(
            &[],
            ClassicalScenario::Free,
            1.0,
            0.0,
            1.0,
            1.0,
            512,
            &opts
        )
        .unwrap()
        .is_empty());
        assert!(classical_limit_sweep(
            &[0.5, 1.0],
            ClassicalScenario::Free,
            1.0,
            0.0,
            1.0,
            1.0,
            512,
            &opts
        )
        .is_err());
        let rows = classical_limit_sweep(
            &[1.0, 0.5],
            ClassicalScenario::Free,
            1.0,
            0.0,
            1.0,
            1.0,
            512,
            &opts,
        )
        .unwrap();
        assert!(rows.iter().all(|r| r.converged && r.rel_error < 1e-9));
    }

    #[test]
    fn free_endpoint_prediction() {
        let p = free_problem(0.0, 0.0, 1.0);
        let opts = SearchOptions::default();
        let e = predict_endpoint(&p, 0.0, 1.0, (-3.0, 3.0), &opts).unwrap();
        assert!(
            (e.x_t - 1.0).abs() < 1e-6 && (e.p_t - 1.0).abs() < 1e-6,
            "{e:?}"
        );
        let e = predict_endpoint(&p, 0.4, 0.0, (-3.0, 3.0), &opts).unwrap();
        assert!((e.x_t - 0.4).abs() < 1e-6);
        assert!(matches!(
            predict_endpoint(&p, 0.0, 1.0, (2.0, 3.0), &opts),
            Err(QapError::Bracket(_))
        ));
    }

    #[test]
    fn probe_examples() {
        let p = free_problem(0.0, 1.0, 1.0);
        let opts = SearchOptions::default();
        let c = InitialCoefficientVector::scalar(1.0, 0.0, 0.0, 0.0);
        let zero = probe_sensitivity(
            &p,
            &PolynomialField::zero(1),
            0.1,
            &ProbeMode::AtFixedC(c.clone()),
            &opts,
        )
        .unwrap();
        assert_eq!(zero.derivative, 0.0);
        let one = probe_sensitivity(
            &p,
            &PolynomialField::constant(1, 1.0),
            0.1,
            &ProbeMode::AtFixedC(c),
            &opts,
        )
        .unwrap();
        assert!((one.derivative + 1.0).abs() < 1e-10);
        let x = PolynomialField::quadratic_1d(0.0, 1.0, 0.0);
        let lin = probe_sensitivity(&p, &x, 0.1, &ProbeMode::AtStationary, &opts).unwrap();
        assert!((lin.derivative + 0.5).abs() < 1e-4, "{lin:?}");
        assert!(probe_sensitivity(&p, &x, 0.0, &ProbeMode::AtStationary, &opts).is_err());
    }
}
