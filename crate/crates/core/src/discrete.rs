//! Broken-line discretization of trajectories, the multiplicative wave
//! functional `Ψ[x] = ∏ₙ ψ(xₙ, tₙ)`, the discrete action operator and the
//! path probability quadratures.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{rhs, CoefficientState, EvolutionResult};
use crate::error::{QapError, Result};
use crate::model::{
    eval_poly_jet, DiscretizationContext, Jet, PhysicalParams, PotentialSchedule, TimeGrid,
};
use crate::quadrature::GaussLegendre;

/// Central-difference step of the finite-difference operator mode.
pub const FD_STEP: f64 = 1e-5;
/// Gauss–Legendre nodes per axis.
pub const QUADRATURE_NODES: usize = 64;
/// Half-width of the effective support in units of the density width σ.
pub const SUPPORT_SIGMAS: f64 = 8.0;
/// Largest slice count accepted by the probability quadratures.
pub const MAX_PROBABILITY_SLICES: usize = 6;
/// Largest number of points of the dense tensor quadrature.
pub const TENSOR_POINT_BUDGET: usize = 1 << 27;
/// Agreement required between the factorized and dense endpoint probability.
pub const FACTORIZATION_TOL: f64 = 1e-6;

/// A piecewise linear trajectory through `x₀ … x_N` at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenLine {
    grid: TimeGrid,
    vertices: Vec<Vec<f64>>,
}

impl BrokenLine {
    pub fn new(grid: TimeGrid, vertices: Vec<Vec<f64>>) -> Result<Self> {
        if vertices.len() != grid.slices() + 1 {
            return Err(QapError::DimensionMismatch {
                expected: grid.slices() + 1,
                got: vertices.len(),
            });
        }
        let dim = vertices[0].len();
        if let Some(v) = vertices.iter().find(|v| v.len() != dim) {
            return Err(QapError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        Ok(Self { grid, vertices })
    }

    /// The path resting at `x` for the whole interval.
    pub fn constant(grid: TimeGrid, x: &[f64]) -> Self {
        Self {
            grid,
            vertices: vec![x.to_vec(); grid.slices() + 1],
        }
    }

    /// Every vertex drawn independently and uniformly from `[lo, hi]^D`.
    pub fn random(grid: TimeGrid, dim: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let vertices = (0..=grid.slices())
            .map(|_| (0..dim).map(|_| rng.random_range(lo..=hi)).collect())
            .collect();
        Self { grid, vertices }
    }

    /// Straight line from `x0` to `x_t`.
    pub fn straight(grid: TimeGrid, x0: &[f64], x_t: &[f64]) -> Result<Self> {
        if x0.len() != x_t.len() {
            return Err(QapError::DimensionMismatch {
                expected: x0.len(),
                got: x_t.len(),
            });
        }
        let n = grid.slices();
        let vertices = (0..=n)
            .map(|k| {
                let a = k as f64 / n as f64;
                x0.iter().zip(x_t).map(|(p, q)| p + a * (q - p)).collect()
            })
            .collect();
        Ok(Self { grid, vertices })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }
}

/// Per-node coefficient states sampled from an evolution on a coarser grid.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub context: DiscretizationContext,
    /// States at `t₀ … t_N`.
    pub nodes: Vec<CoefficientState>,
    /// f(tₙ) at the same nodes.
    pub f_values: Vec<f64>,
    /// ∫₀ᵀ f dt of the underlying continuous evolution.
    pub f_integral: f64,
}

impl SliceSet {
    pub fn slices(&self) -> usize {
        self.context.grid.slices()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].dim()
    }

    /// χ(x, tₙ) = (i/ħ) s + ρ.
    pub fn chi(&self, n: usize, x: &[f64]) -> Result<Complex64> {
        self.nodes[n].chi(x, self.context.hbar)
    }

    /// The continuum eigenvalue λ = s(x_T,T) − s(x₀,0) − ∫f dt.
    pub fn lambda_continuum(&self, x0: &[f64], x_t: &[f64]) -> Result<f64> {
        let n = self.slices();
        Ok(s_at(&self.nodes[n], x_t)? - s_at(&self.nodes[0], x0)? - self.f_integral)
    }
}

fn s_at(state: &CoefficientState, x: &[f64]) -> Result<f64> {
    Ok(eval_poly_jet(&state.s, x)?.value)
}

/// Samples an evolution at the nodes of `context.grid`.
pub fn build_slices(result: &EvolutionResult, context: &DiscretizationContext) -> Result<SliceSet> {
    let grid = context.grid;
    let steps = result.stats.steps;
    let n = grid.slices();
    let duration_gap = (result.duration() - grid.duration()).abs();
    if duration_gap > 1e-12 * grid.duration().max(1.0) {
        return Err(QapError::Input(format!(
            "evolution covers T = {} but the grid covers T = {}",
            result.duration(),
            grid.duration()
        )));
    }
    if !steps.is_multiple_of(n) {
        return Err(QapError::Input(format!(
            "{steps} integrator steps cannot be subsampled onto {n} slices"
        )));
    }
    let stride = steps / n;
    let nodes = (0..=n).map(|k| result.states[k * stride].clone()).collect();
    let f_values = (0..=n).map(|k| result.f_samples[k * stride]).collect();
    Ok(SliceSet {
        context: *context,
        nodes,
        f_values,
        f_integral: result.f_integral,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorMode {
    Analytic,
    FiniteDifference,
}

/// `Λ[x] = ÎΨ/Ψ` split into the path-independent eigenvalue and the residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaDecomposition {
    pub lambda_re: f64,
    /// Reported for inspection only; never folded into λ.
    pub lambda_im: f64,
    /// The discrete eigenvalue λ_N for this path's endpoints.
    pub lambda_discrete: f64,
    /// `chain_rule_re + schrodinger_re`.
    pub residual_re: f64,
    /// Σ ε(v·∇s + ṡ) − s|₀ᵀ: the error of replacing a total derivative by a sum.
    pub chain_rule_re: f64,
    /// Σ ε(Schrödinger residual of the slice), zero for an exact coefficient flow.
    pub schrodinger_re: f64,
    /// −ħ(ρ(x_N, T) − ρ(x₀, 0)).
    pub boundary_im: f64,
}

fn check_path(slices: &SliceSet, path: &BrokenLine) -> Result<()> {
    let (a, b) = (slices.context.grid, path.grid);
    if a.slices() != b.slices() || (a.duration() - b.duration()).abs() > 1e-12 * a.duration() {
        return Err(QapError::Input(
            "path grid differs from the slice grid".into(),
        ));
    }
    if path.dim() != slices.dim() {
        return Err(QapError::DimensionMismatch {
            expected: slices.dim(),
            got: path.dim(),
        });
    }
    Ok(())
}

/// Applies the discrete action operator to `Ψ[x]` along `path`.
pub fn apply_action_operator(
    slices: &SliceSet,
    path: &BrokenLine,
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    mode: OperatorMode,
) -> Result<LambdaDecomposition> {
    check_path(slices, path)?;
    let grid = slices.context.grid;
    let eps = grid.epsilon();
    let hbar = params.hbar;
    let m = params.mass;
    let n_slices = grid.slices();
    let xs = path.vertices();

    let s_jets: Vec<Jet> = (0..=n_slices)
        .map(|n| eval_poly_jet(&slices.nodes[n].s, &xs[n]))
        .collect::<Result<_>>()?;
    let r_jets: Vec<Jet> = (0..=n_slices)
        .map(|n| eval_poly_jet(&slices.nodes[n].rho, &xs[n]))
        .collect::<Result<_>>()?;

    let lambda = match mode {
        OperatorMode::Analytic => {
            analytic_operator(&s_jets, &r_jets, xs, potential, params, &grid)?
        }
        OperatorMode::FiniteDifference => fd_operator(slices, xs, potential, params)?,
    };

    let mut chain = 0.0;
    let mut sch = 0.0;
    for n in 1..=n_slices {
        let t = grid.node(n);
        let u = potential.lookup(t);
        let u_val = eval_poly_jet(u, &xs[n])?.value;
        let s_dot = eval_poly_jet(&rhs(&slices.nodes[n], u, params).derivative.s, &xs[n])?.value;
        let (sj, rj) = (&s_jets[n], &r_jets[n]);
        let v_dot_grad: f64 = (0..xs[n].len())
            .map(|k| (xs[n][k] - xs[n - 1][k]) / eps * sj.gradient[k])
            .sum();
        let grad_s_sq: f64 = sj.gradient.iter().map(|g| g * g).sum();
        let grad_r_sq: f64 = rj.gradient.iter().map(|g| g * g).sum();
        chain += eps * (v_dot_grad + s_dot);
        sch += eps
            * (-s_dot - grad_s_sq / (2.0 * m)
                + hbar * hbar / (2.0 * m) * (grad_r_sq + rj.laplacian)
                - u_val
                + slices.f_values[n]);
    }
    let s_gap = s_jets[n_slices].value - s_jets[0].value;
    chain -= s_gap;
    let f_sum: f64 = slices.f_values[1..].iter().sum::<f64>() * eps;
    Ok(LambdaDecomposition {
        lambda_re: lambda.re,
        lambda_im: lambda.im,
        lambda_discrete: s_gap - f_sum,
        residual_re: chain + sch,
        chain_rule_re: chain,
        schrodinger_re: sch,
        boundary_im: -hbar * (r_jets[n_slices].value - r_jets[0].value),
    })
}

fn analytic_operator(
    s_jets: &[Jet],
    r_jets: &[Jet],
    xs: &[Vec<f64>],
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    grid: &TimeGrid,
) -> Result<Complex64> {
    let eps = grid.epsilon();
    let hbar = params.hbar;
    let kinetic = hbar * hbar / (2.0 * params.mass);
    let mut total = Complex64::new(0.0, 0.0);
    for n in 1..s_jets.len() {
        let u = eval_poly_jet(potential.lookup(grid.node(n)), &xs[n])?.value;
        let mut drift = Complex64::new(0.0, 0.0);
        let mut grad_sq = Complex64::new(0.0, 0.0);
        for (k, (&x, &prev)) in xs[n].iter().zip(&xs[n - 1]).enumerate() {
            let d = Complex64::new(r_jets[n].gradient[k], s_jets[n].gradient[k] / hbar);
            drift += (x - prev) / eps * d;
            grad_sq += d * d;
        }
        let lap = Complex64::new(r_jets[n].laplacian, s_jets[n].laplacian / hbar);
        // (ħ/i) z = −iħ z
        let term = Complex64::new(0.0, -hbar) * drift + kinetic * (grad_sq + lap) - u;
        total += eps * term;
    }
    Ok(total)
}

/// Ψ at the vertices with vertex `moved` replaced by `x`. The factor of the
/// moved vertex is multiplied last, so the other factors round identically
/// across the perturbed evaluations.
fn psi_product(slices: &SliceSet, xs: &[Vec<f64>], moved: usize, x: &[f64]) -> Result<Complex64> {
    let mut psi = Complex64::new(1.0, 0.0);
    for (n, v) in xs.iter().enumerate() {
        if n != moved {
            psi *= slices.chi(n, v)?.exp();
        }
    }
    Ok(psi * slices.chi(moved, x)?.exp())
}

fn fd_operator(
    slices: &SliceSet,
    xs: &[Vec<f64>],
    potential: &PotentialSchedule,
    params: &PhysicalParams,
) -> Result<Complex64> {
    let grid = slices.context.grid;
    let eps = grid.epsilon();
    let hbar = params.hbar;
    let kinetic = hbar * hbar / (2.0 * params.mass);
    let check = |psi: Complex64, n: usize| -> Result<Complex64> {
        let norm = psi.norm();
        if !norm.is_finite() || norm < f64::MIN_POSITIVE {
            return Err(QapError::Evaluation(format!(
                "|Ψ| under- or overflows near vertex {n}; use the analytic operator mode"
            )));
        }
        Ok(psi)
    };
    let mut total = Complex64::new(0.0, 0.0);
    for n in 1..xs.len() {
        let u = eval_poly_jet(potential.lookup(grid.node(n)), &xs[n])?.value;
        let psi0 = check(psi_product(slices, xs, n, &xs[n])?, n)?;
        let mut moved = xs[n].clone();
        let mut drift = Complex64::new(0.0, 0.0);
        let mut second = Complex64::new(0.0, 0.0);
        for k in 0..moved.len() {
            moved[k] = xs[n][k] + FD_STEP;
            let plus = check(psi_product(slices, xs, n, &moved)?, n)?;
            moved[k] = xs[n][k] - FD_STEP;
            let minus = check(psi_product(slices, xs, n, &moved)?, n)?;
            moved[k] = xs[n][k];
            let v = (xs[n][k] - xs[n - 1][k]) / eps;
            drift += v * (plus - minus) / (2.0 * FD_STEP * psi0);
            second += (plus - 2.0 * psi0 + minus) / (FD_STEP * FD_STEP * psi0);
        }
        total += eps * (Complex64::new(0.0, -hbar) * drift + kinetic * second - u);
    }
    Ok(total)
}

/// λ_N = s(x_T,T) − s(x₀,0) − Σₙ₌₁ᴺ ε f(tₙ).
pub fn lambda_discrete(slices: &SliceSet, x0: &[f64], x_t: &[f64]) -> Result<f64> {
    let eps = slices.context.grid.epsilon();
    let n = slices.slices();
    let f_sum: f64 = slices.f_values[1..].iter().sum::<f64>() * eps;
    Ok(s_at(&slices.nodes[n], x_t)? - s_at(&slices.nodes[0], x0)? - f_sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub slices: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStudy {
    pub rows: Vec<ResidualRow>,
    /// Least-squares slope of −log(max residual) against log N; `None` when
    /// fewer than two residuals are positive.
    pub fitted_order: Option<f64>,
    pub seed: u64,
}

impl ResidualStudy {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].max_residual < w[0].max_residual)
    }
}

/// Vertex sampler of [`residual_convergence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathSampler {
    /// Every vertex uniform in `[lo, hi]^D`.
    Uniform { lo: f64, hi: f64 },
    /// All vertices equal to one point drawn uniformly from `[lo, hi]^D`.
    Constant { lo: f64, hi: f64 },
}

fn path_seed(seed: u64, n: usize, sample: usize) -> u64 {
    seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (sample as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Residual |Λ_re − λ_N| over random broken lines for every N in `n_list`.
pub fn residual_convergence(
    result: &EvolutionResult,
    params: &PhysicalParams,
    potential: &PotentialSchedule,
    n_list: &[usize],
    samples: usize,
    seed: u64,
    sampler: PathSampler,
) -> Result<ResidualStudy> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(QapError::Input(
            "N list must be non-empty and strictly ascending".into(),
        ));
    }
    if samples < 10 {
        return Err(QapError::Input(format!(
            "need at least 10 samples, got {samples}"
        )));
    }
    let dim = params.dimension;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TimeGrid::new(result.duration(), n)?;
        let context = DiscretizationContext::new(grid, params);
        let slices = build_slices(result, &context)?;
        let residuals: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, n, i));
                let path = match sampler {
                    PathSampler::Uniform { lo, hi } => {
                        BrokenLine::random(grid, dim, lo, hi, &mut rng)
                    }
                    PathSampler::Constant { lo, hi } => {
                        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
                        BrokenLine::constant(grid, &x)
                    }
                };
                let d = apply_action_operator(
                    &slices,
                    &path,
                    potential,
                    params,
                    OperatorMode::Analytic,
                )?;
                Ok((d.lambda_re - d.lambda_discrete).abs())
            })
            .collect::<Result<_>>()?;
        let max_residual = residuals.iter().copied().fold(0.0, f64::max);
        let mean_residual = residuals.iter().sum::<f64>() / samples as f64;
        rows.push(ResidualRow {
            slices: n,
            max_residual,
            mean_residual,
        });
    }
    let fitted_order = fit_order(&rows);
    Ok(ResidualStudy {
        rows,
        fitted_order,
        seed,
    })
}

fn fit_order(rows: &[ResidualRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.max_residual > 0.0)
        .map(|r| ((r.slices as f64).ln(), r.max_residual.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(-sxy / sxx)
}

/// Interval `[center − delta, center + delta]` for one vertex. An infinite
/// `delta` means the whole line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeBox {
    pub center: f64,
    pub delta: f64,
}

impl NodeBox {
    pub fn new(center: f64, delta: f64) -> Self {
        Self { center, delta }
    }

    pub fn everywhere() -> Self {
        Self::new(0.0, f64::INFINITY)
    }
}

/// Per-node density `e^{2ρ}` written as `e^{2ρ(c)} · exp(−(x−c)²/2σ²)`.
#[derive(Debug, Clone, Copy)]
struct NodeDensity {
    center: f64,
    sigma: f64,
    log_peak: f64,
    rho1: f64,
    rho2: f64,
}

impl NodeDensity {
    fn of(state: &CoefficientState) -> Result<Self> {
        let (rho0, rho1, rho2) = (state.rho0(), state.rho1()[0], state.rho2()[0]);
        if !(rho2 < 0.0) {
            return Err(QapError::Precondition(format!(
                "slice at t = {} is not normalizable (rho2 = {rho2})",
                state.t
            )));
        }
        let center = -rho1 / rho2;
        Ok(Self {
            center,
            sigma: (-0.5 / rho2).sqrt(),
            log_peak: 2.0 * (rho0 + rho1 * center + 0.5 * rho2 * center * center),
            rho1,
            rho2,
        })
    }

    /// 2ρ(x) − 2ρ(c), exact in the polynomial rather than the completed square.
    fn log_shape(&self, x: f64) -> f64 {
        let c = self.center;
        2.0 * (self.rho1 * (x - c) + 0.5 * self.rho2 * (x * x - c * c))
    }

    /// Integration interval: the box clipped to the effective support.
    fn interval(&self, b: &NodeBox) -> Option<(f64, f64)> {
        let lo = (self.center - SUPPORT_SIGMAS * self.sigma).max(b.center - b.delta);
        let hi = (self.center + SUPPORT_SIGMAS * self.sigma).min(b.center + b.delta);
        (hi > lo).then_some((lo, hi))
    }

    /// ∫_box e^{2ρ(x) − 2ρ(c)} dx.
    fn box_integral(&self, gl: &GaussLegendre, b: &NodeBox) -> f64 {
        match self.interval(b) {
            Some((lo, hi)) => gl.integrate(lo, hi, |x| self.log_shape(x).exp()),
            None => 0.0,
        }
    }
}

fn densities(slices: &SliceSet, boxes: &[NodeBox]) -> Result<Vec<NodeDensity>> {
    if slices.dim() != 1 {
        return Err(QapError::Precondition(
            "probability quadratures support D = 1 only".into(),
        ));
    }
    if slices.slices() > MAX_PROBABILITY_SLICES {
        return Err(QapError::Precondition(format!(
            "probability quadratures support N <= {MAX_PROBABILITY_SLICES}, got {}",
            slices.slices()
        )));
    }
    if boxes.len() != slices.nodes.len() {
        return Err(QapError::DimensionMismatch {
            expected: slices.nodes.len(),
            got: boxes.len(),
        });
    }
    if let Some(b) = boxes
        .iter()
        .find(|b| b.delta.is_nan() || b.delta < 0.0 || !b.center.is_finite())
    {
        return Err(QapError::Input(format!(
            "invalid box half-width {}",
            b.delta
        )));
    }
    slices.nodes.iter().map(NodeDensity::of).collect()
}

/// ∫…∫ over the boxes of |Ψ|² = ∏ₙ e^{2ρ(xₙ,tₙ)}, nodes `0 … N`.
///
/// The integrand factorizes per vertex, so this is a product of 1-D integrals.
/// With `normalize` the result is divided by the all-space integral.
pub fn path_probability(slices: &SliceSet, boxes: &[NodeBox], normalize: bool) -> Result<f64> {
    let dens = densities(slices, boxes)?;
    let gl = GaussLegendre::new(QUADRATURE_NODES);
    let mut p = 1.0;
    for (d, b) in dens.iter().zip(boxes) {
        let inside = d.box_integral(&gl, b);
        p *= if normalize {
            inside / d.box_integral(&gl, &NodeBox::everywhere())
        } else {
            inside * d.log_peak.exp()
        };
    }
    Ok(p)
}

/// The same probability by a dense tensor-product quadrature over all N+1
/// axes, without using the factorization. Always normalized.
pub fn tensor_probability(slices: &SliceSet, boxes: &[NodeBox]) -> Result<f64> {
    let dens = densities(slices, boxes)?;
    let axes = dens.len();
    if QUADRATURE_NODES
        .checked_pow(axes as u32)
        .is_none_or(|p| p > TENSOR_POINT_BUDGET)
    {
        return Err(QapError::Precondition(format!(
            "dense quadrature over {axes} axes exceeds the point budget"
        )));
    }
    let inside = tensor_integral(&dens, boxes);
    let all = tensor_integral(&dens, &vec![NodeBox::everywhere(); axes]);
    Ok(if all > 0.0 { inside / all } else { 0.0 })
}

fn tensor_integral(dens: &[NodeDensity], boxes: &[NodeBox]) -> f64 {
    let gl = GaussLegendre::new(QUADRATURE_NODES);
    // per-axis tables of (weight, exponent); the integrand itself is
    // exp(Σ exponents) at each tensor point
    let mut tables: Vec<Vec<(f64, f64)>> = Vec::with_capacity(dens.len());
    for (d, b) in dens.iter().zip(boxes) {
        match d.interval(b) {
            Some((lo, hi)) => tables.push(
                gl.mapped(lo, hi)
                    .map(|(x, w)| (w, d.log_shape(x)))
                    .collect(),
            ),
            None => return 0.0,
        }
    }
    let (first, rest) = tables.split_first().expect("at least one axis");
    // parallel over the first axis, odometer over the remaining ones
    first
        .par_iter()
        .map(|&(w0, e0)| {
            let mut idx = vec![0usize; rest.len()];
            let mut acc = 0.0;
            loop {
                let mut w = w0;
                let mut e = e0;
                for (axis, &i) in rest.iter().zip(&idx) {
                    w *= axis[i].0;
                    e += axis[i].1;
                }
                acc += w * e.exp();
                let mut k = 0;
                while k < idx.len() {
                    idx[k] += 1;
                    if idx[k] < rest[k].len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == idx.len() {
                    break;
                }
            }
            acc
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointProbability {
    /// Product of the normalized endpoint box integrals.
    pub probability: f64,
    /// Dense quadrature with interior nodes over all space; `None` when the
    /// tensor grid exceeds the point budget.
    pub tensor: Option<f64>,
    /// Relative gap between the unnormalized path integral and the product of
    /// the unnormalized endpoint integrals, i.e. how far the interior slices
    /// are from unit norm.
    pub raw_discrepancy: f64,
}

/// Probability of starting in `x₀ ± δ₀` and ending in `x_T ± δ_T`, interior
/// vertices unconstrained.
pub fn endpoint_probability(
    slices: &SliceSet,
    start: NodeBox,
    end: NodeBox,
) -> Result<EndpointProbability> {
    let n = slices.slices();
    let mut boxes = vec![NodeBox::everywhere(); n + 1];
    boxes[0] = start;
    boxes[n] = end;
    let dens = densities(slices, &boxes)?;
    let gl = GaussLegendre::new(QUADRATURE_NODES);
    let norm = |d: &NodeDensity| d.box_integral(&gl, &NodeBox::everywhere());
    let (d0, dn) = (&dens[0], &dens[n]);
    let probability =
        d0.box_integral(&gl, &start) / norm(d0) * (dn.box_integral(&gl, &end) / norm(dn));

    let raw_rhs = d0.box_integral(&gl, &start)
        * d0.log_peak.exp()
        * dn.box_integral(&gl, &end)
        * dn.log_peak.exp();
    let raw_lhs = path_probability(slices, &boxes, false)?;
    let raw_discrepancy = if raw_rhs > 0.0 {
        (raw_lhs - raw_rhs).abs() / raw_rhs
    } else {
        0.0
    };

    let tensor = match tensor_probability(slices, &boxes) {
        Ok(t) => Some(t),
        Err(QapError::Precondition(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(t) = tensor {
        if (t - probability).abs() > FACTORIZATION_TOL {
            return Err(QapError::Evaluation(format!(
                "factorized endpoint probability {probability} disagrees with dense quadrature {t}"
            )));
        }
    }
    Ok(EndpointProbability {
        probability,
        tensor,
        raw_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::evolve;
    use crate::model::PolynomialField;

    fn unit() -> PhysicalParams {
        PhysicalParams::unit(1)
    }

    fn oscillator() -> PotentialSchedule {
        PotentialSchedule::constant(PolynomialField::quadratic_1d(0.0, 0.0, 1.0))
    }

    fn slices_of(
        initial: CoefficientState,
        potential: &PotentialSchedule,
        t: f64,
        steps: usize,
        n: usize,
    ) -> SliceSet {
        let result = evolve(&initial, potential, t, &unit(), steps).unwrap();
        let context = DiscretizationContext::new(TimeGrid::new(t, n).unwrap(), &unit());
        build_slices(&result, &context).unwrap()
    }

    fn ground(n: usize) -> SliceSet {
        slices_of(
            CoefficientState::gaussian_1d(0.0, 0.0, 0.0, -1.0),
            &oscillator(),
            1.0,
            192,
            n,
        )
    }

    #[test]
    fn ground_state_slices_are_identical() {
        let sl = ground(8);
        assert_eq!(sl.nodes.len(), 9);
        for n in 0..=8 {
            let chi = sl.chi(n, &[1.5]).unwrap();
            assert_eq!(chi, Complex64::new(-1.125, 0.0));
        }
    }

    #[test]
    fn plane_wave_slices() {
        let sl = slices_of(
            CoefficientState::gaussian_1d(1.0, 0.0, 0.0, 0.0),
            &PotentialSchedule::free(1),
            1.0,
            64,
            4,
        );
        for n in 0..=4 {
            assert_eq!(sl.chi(n, &[0.7]).unwrap(), Complex64::new(0.0, 0.7));
        }
    }

    #[test]
    fn incompatible_grid_is_rejected() {
        let result = evolve(
            &CoefficientState::zero(1),
            &PotentialSchedule::free(1),
            1.0,
            &unit(),
            64,
        )
        .unwrap();
        let context = DiscretizationContext::new(TimeGrid::new(1.0, 5).unwrap(), &unit());
        assert!(matches!(
            build_slices(&result, &context),
            Err(QapError::Input(_))
        ));
        let context = DiscretizationContext::new(TimeGrid::new(2.0, 8).unwrap(), &unit());
        assert!(matches!(
            build_slices(&result, &context),
            Err(QapError::Input(_))
        ));
    }

    #[test]
    fn zero_state_gives_zero_operator() {
        let sl = slices_of(
            CoefficientState::zero(1),
            &PotentialSchedule::free(1),
            1.0,
            64,
            8,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path = BrokenLine::random(sl.context.grid, 1, -2.0, 2.0, &mut rng);
        for mode in [OperatorMode::Analytic, OperatorMode::FiniteDifference] {
            let d = apply_action_operator(&sl, &path, &PotentialSchedule::free(1), &unit(), mode)
                .unwrap();
            assert_eq!(d.lambda_re, 0.0);
            assert_eq!(d.lambda_im, 0.0);
        }
    }

    #[test]
    fn lambda_discrete_examples() {
        let free = slices_of(
            CoefficientState::gaussian_1d(1.0, 0.0, 0.0, 0.0),
            &PotentialSchedule::free(1),
            1.0,
            64,
            4,
        );
        assert!((lambda_discrete(&free, &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        for n in [1, 2, 8, 64] {
            let g = ground(n);
            assert!((lambda_discrete(&g, &[0.0], &[0.0]).unwrap() + 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn decomposition_identity() {
        let sl = slices_of(
            CoefficientState::gaussian_1d(0.4, 0.3, 0.2, -0.8),
            &oscillator(),
            1.0,
            256,
            8,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let path = BrokenLine::random(sl.context.grid, 1, -2.0, 2.0, &mut rng);
            let d =
                apply_action_operator(&sl, &path, &oscillator(), &unit(), OperatorMode::Analytic)
                    .unwrap();
            let gap = d.lambda_re - (d.lambda_discrete + d.residual_re);
            assert!(gap.abs() < 1e-12 * d.lambda_re.abs().max(1.0), "gap {gap}");
        }
    }

    #[test]
    fn boundary_term_tracks_rho() {
        let sl = ground(4);
        let path = BrokenLine::straight(sl.context.grid, &[0.0], &[1.0]).unwrap();
        let d = apply_action_operator(&sl, &path, &oscillator(), &unit(), OperatorMode::Analytic)
            .unwrap();
        assert!((d.boundary_im - 0.5).abs() < 1e-15);
    }

    #[test]
    fn modes_agree_on_a_coherent_state() {
        let sl = slices_of(
            CoefficientState::gaussian_1d(0.0, 0.0, 1.0, -1.0),
            &oscillator(),
            1.0,
            256,
            8,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let path = BrokenLine::random(sl.context.grid, 1, -1.0, 1.0, &mut rng);
        let a = apply_action_operator(&sl, &path, &oscillator(), &unit(), OperatorMode::Analytic)
            .unwrap();
        let f = apply_action_operator(
            &sl,
            &path,
            &oscillator(),
            &unit(),
            OperatorMode::FiniteDifference,
        )
        .unwrap();
        assert!((a.lambda_re - f.lambda_re).abs() < 1e-6 * a.lambda_re.abs().max(1.0));
        assert!((a.lambda_im - f.lambda_im).abs() < 1e-6 * a.lambda_im.abs().max(1.0));
    }

    #[test]
    fn fd_mode_reports_underflow() {
        let sl = ground(4);
        let path = BrokenLine::constant(sl.context.grid, &[30.0]);
        let err = apply_action_operator(
            &sl,
            &path,
            &oscillator(),
            &unit(),
            OperatorMode::FiniteDifference,
        );
        assert!(matches!(err, Err(QapError::Evaluation(_))));
        assert!(
            apply_action_operator(&sl, &path, &oscillator(), &unit(), OperatorMode::Analytic)
                .is_ok()
        );
    }

    #[test]
    fn residual_study_is_deterministic_and_validated() {
        let result = evolve(
            &CoefficientState::gaussian_1d(1.0, 0.0, 0.0, 0.0),
            &PotentialSchedule::free(1),
            1.0,
            &unit(),
            64,
        )
        .unwrap();
        let sampler = PathSampler::Uniform { lo: -2.0, hi: 2.0 };
        let run = |seed| {
            residual_convergence(
                &result,
                &unit(),
                &PotentialSchedule::free(1),
                &[4, 8, 16],
                10,
                seed,
                sampler,
            )
            .unwrap()
        };
        assert_eq!(run(7), run(7));
        assert!(residual_convergence(
            &result,
            &unit(),
            &PotentialSchedule::free(1),
            &[8, 4],
            10,
            0,
            sampler
        )
        .is_err());
        assert!(residual_convergence(
            &result,
            &unit(),
            &PotentialSchedule::free(1),
            &[4, 8],
            9,
            0,
            sampler
        )
        .is_err());
    }

    #[test]
    fn plane_wave_residual_is_only_the_chain_rule_error() {
        // s = x exactly, so v·∇s sums to x_N − x₀ and the residual vanishes
        let sl = slices_of(
            CoefficientState::gaussian_1d(1.0, 0.0, 0.0, 0.0),
            &PotentialSchedule::free(1),
            1.0,
            64,
            8,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = BrokenLine::random(sl.context.grid, 1, -2.0, 2.0, &mut rng);
        let d = apply_action_operator(
            &sl,
            &path,
            &PotentialSchedule::free(1),
            &unit(),
            OperatorMode::Analytic,
        )
        .unwrap();
        assert!(d.schrodinger_re.abs() < 1e-14);
        assert!(d.residual_re.abs() < 1e-13);
    }

    fn erf1() -> f64 {
        libm::erf(1.0)
    }

    #[test]
    fn ground_state_box_probabilities() {
        let sl = ground(2);
        let all = vec![NodeBox::everywhere(); 3];
        assert!((path_probability(&sl, &all, true).unwrap() - 1.0).abs() < 1e-12);
        let unit_boxes = vec![NodeBox::new(0.0, 1.0); 3];
        let p = path_probability(&sl, &unit_boxes, true).unwrap();
        assert!((p - erf1().powi(3)).abs() < 1e-10, "{p}");
        let mut zero = unit_boxes.clone();
        zero[1].delta = 0.0;
        assert_eq!(path_probability(&sl, &zero, true).unwrap(), 0.0);
        let mut bad = unit_boxes;
        bad[2].delta = -1.0;
        assert!(matches!(
            path_probability(&sl, &bad, true),
            Err(QapError::Input(_))
        ));
    }

    #[test]
    fn probability_guards() {
        let sl = slices_of(
            CoefficientState::gaussian_1d(1.0, 0.0, 0.0, 0.0),
            &PotentialSchedule::free(1),
            1.0,
            64,
            2,
        );
        let all = vec![NodeBox::everywhere(); 3];
        assert!(matches!(
            path_probability(&sl, &all, true),
            Err(QapError::Precondition(_))
        ));
        let big = ground(8);
        let all = vec![NodeBox::everywhere(); 9];
        assert!(matches!(
            path_probability(&big, &all, true),
            Err(QapError::Precondition(_))
        ));
    }

    #[test]
    fn endpoint_probability_factorizes() {
        let sl = ground(3);
        let ep = endpoint_probability(&sl, NodeBox::new(0.0, 1.0), NodeBox::new(0.0, 1.0)).unwrap();
        assert!((ep.probability - erf1().powi(2)).abs() < 1e-10);
        let t = ep.tensor.expect("N = 3 fits the budget");
        assert!((t - ep.probability).abs() < 1e-6);
        let ep = endpoint_probability(&sl, NodeBox::everywhere(), NodeBox::everywhere()).unwrap();
        assert!((ep.probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_matches_factorized_path_probability() {
        let sl = slices_of(
            CoefficientState::gaussian_1d(0.5, 0.2, 0.3, -0.7),
            &oscillator(),
            1.0,
            64,
            2,
        );
        let boxes = [
            NodeBox::new(0.1, 0.8),
            NodeBox::new(0.4, 1.2),
            NodeBox::new(-0.3, 0.5),
        ];
        let f = path_probability(&sl, &boxes, true).unwrap();
        let t = tensor_probability(&sl, &boxes).unwrap();
        assert!((f - t).abs() < 1e-10, "{f} vs {t}");
    }
}
