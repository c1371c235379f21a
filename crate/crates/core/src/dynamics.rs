//! Coefficient flow of exponential wave functions.
//!
//! A per-slice wave function is `ψ = exp(χ)`, `χ = (i/ħ) s(x,t) + ρ(x,t)`, with
//! `s` and `ρ` real polynomials in `x`. Requiring the Schrödinger residual to
//! vanish order by order in `x` gives a closed ODE system for the coefficients
//! when the potential is at most quadratic:
//!
//! ```text
//! ṡ1 = −(1/m) s2·s1 + (ħ²/m) ρ2·ρ1 − U1
//! ṡ2 = −(1/m) s2·s2 + (ħ²/m) ρ2·ρ2 − U2
//! ρ̇0 = −(1/m) s1·ρ1 − (1/2m) tr s2
//! ρ̇1 = −(1/m)(s2·ρ1 + ρ2·s1)
//! ρ̇2 = −(1/m)(s2·ρ2 + ρ2·s2)
//! ```
//!
//! The constant term of `s` is not tracked: the dynamical phase it would carry
//! is `−∫f dt`, booked into the action eigenvalue instead.

use num_complex::Complex64;

use crate::error::{QapError, Result};
use crate::model::{eval_poly_jet, PhysicalParams, PolynomialField, PotentialSchedule};
use crate::poly::Poly;
use crate::quadrature::simpson;

/// Entries above this magnitude are treated as a Riccati blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;
/// Default number of RK4 steps.
pub const DEFAULT_STEPS: usize = 4096;
pub const MIN_STEPS: usize = 8;

/// Coefficients of `s` (phase) and `ρ` (log-amplitude) at one instant.
///
/// `s.c0` is always zero; `rho.c0` is the log-norm bookkeeping term ρ₀.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientState {
    pub t: f64,
    pub s: PolynomialField,
    pub rho: PolynomialField,
}

impl CoefficientState {
    pub fn zero(dim: usize) -> Self {
        Self::zero_of_order(dim, 2)
    }

    pub fn zero_of_order(dim: usize, order: usize) -> Self {
        Self {
            t: 0.0,
            s: PolynomialField::zero_of_order(dim, order),
            rho: PolynomialField::zero_of_order(dim, order),
        }
    }

    /// One-dimensional Gaussian `exp((i/ħ)(s1 x + ½ s2 x²) + ρ1 x + ½ ρ2 x²)`.
    pub fn gaussian_1d(s1: f64, s2: f64, rho1: f64, rho2: f64) -> Self {
        Self {
            t: 0.0,
            s: PolynomialField::quadratic_1d(0.0, s1, s2),
            rho: PolynomialField::quadratic_1d(0.0, rho1, rho2),
        }
    }

    pub fn dim(&self) -> usize {
        self.s.dim()
    }

    pub fn order(&self) -> usize {
        self.s.degree().max(self.rho.degree())
    }

    pub fn s1(&self) -> &[f64] {
        &self.s.c1
    }

    pub fn s2(&self) -> &[f64] {
        &self.s.c2
    }

    pub fn rho0(&self) -> f64 {
        self.rho.c0
    }

    pub fn rho1(&self) -> &[f64] {
        &self.rho.c1
    }

    pub fn rho2(&self) -> &[f64] {
        &self.rho.c2
    }

    pub fn max_abs(&self) -> f64 {
        self.s.max_abs().max(self.rho.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite() && self.rho.is_finite()
    }

    /// χ(x) = (i/ħ) s(x) + ρ(x).
    pub fn chi(&self, x: &[f64], hbar: f64) -> Result<Complex64> {
        let s = eval_poly_jet(&self.s, x)?.value;
        let r = eval_poly_jet(&self.rho, x)?.value;
        Ok(Complex64::new(r, s / hbar))
    }

    fn flat_len(&self) -> usize {
        // s has no constant term in the packed layout
        self.s.coefficients().count() - 1 + self.rho.coefficients().count()
    }

    /// Packed layout: `s.c1, s.c2, [s.c3], [s.c4], rho.c0, rho.c1, rho.c2, [rho.c3], [rho.c4]`.
    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend(self.s.coefficients().skip(1));
        out.extend(self.rho.coefficients());
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat), reusing `self` as the shape template.
    pub(crate) fn fill_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        fn fill(f: &mut PolynomialField, it: &mut impl Iterator<Item = f64>, with_c0: bool) {
            if with_c0 {
                f.c0 = it.next().expect("flat length");
            }
            for v in
                f.c1.iter_mut()
                    .chain(f.c2.iter_mut())
                    .chain(f.c3.iter_mut().flatten())
                    .chain(f.c4.iter_mut().flatten())
            {
                *v = it.next().expect("flat length");
            }
        }
        fill(&mut self.s, &mut it, false);
        fill(&mut self.rho, &mut it, true);
    }

    fn check_shape(&self, params: &PhysicalParams) -> Result<()> {
        let d = params.dimension;
        for f in [&self.s, &self.rho] {
            if !f.issues(d).is_empty() {
                return Err(QapError::Input(format!(
                    "coefficient state is not a valid symmetric field of dimension {d}"
                )));
            }
        }
        if self.s.degree() != self.rho.degree() {
            return Err(QapError::Input(
                "s and rho must share a truncation order".into(),
            ));
        }
        Ok(())
    }
}

/// Time derivative of the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Rhs {
    pub derivative: CoefficientState,
    /// Generated (or potential) orders above the state's order were dropped.
    pub truncated: bool,
}

/// Time derivative of `state` under the instantaneous potential `u`.
///
/// Quadratic states use the closed form; higher orders use polynomial algebra
/// with truncation of generated orders above K.
pub fn rhs(state: &CoefficientState, u: &PolynomialField, params: &PhysicalParams) -> Rhs {
    if state.order() == 2 && u.degree() == 2 {
        let y = state.to_flat();
        let mut dy = vec![0.0; y.len()];
        rhs_quadratic(state.dim(), params, u, &y, &mut dy);
        let mut derivative = state.clone();
        derivative.fill_from_flat(&dy);
        Rhs {
            derivative,
            truncated: false,
        }
    } else {
        rhs_general(state, u, params)
    }
}

fn rhs_quadratic(
    d: usize,
    params: &PhysicalParams,
    u: &PolynomialField,
    y: &[f64],
    dy: &mut [f64],
) {
    let inv_m = 1.0 / params.mass;
    let h2m = params.hbar * params.hbar * inv_m;
    let dd = d * d;
    let (s1, rest) = y.split_at(d);
    let (s2, rest) = rest.split_at(dd);
    let (_r0, rest) = rest.split_at(1);
    let (r1, r2) = rest.split_at(d);

    let (ds1, rest) = dy.split_at_mut(d);
    let (ds2, rest) = rest.split_at_mut(dd);
    let (dr0, rest) = rest.split_at_mut(1);
    let (dr1, dr2) = rest.split_at_mut(d);

    let mut dot_s1r1 = 0.0;
    let mut tr_s2 = 0.0;
    for i in 0..d {
        dot_s1r1 += s1[i] * r1[i];
        tr_s2 += s2[i * d + i];
        let mut s2s1 = 0.0;
        let mut r2r1 = 0.0;
        let mut s2r1 = 0.0;
        let mut r2s1 = 0.0;
        for k in 0..d {
            s2s1 += s2[i * d + k] * s1[k];
            r2r1 += r2[i * d + k] * r1[k];
            s2r1 += s2[i * d + k] * r1[k];
            r2s1 += r2[i * d + k] * s1[k];
        }
        ds1[i] = -inv_m * s2s1 + h2m * r2r1 - u.c1[i];
        dr1[i] = -inv_m * (s2r1 + r2s1);
    }
    dr0[0] = -inv_m * dot_s1r1 - 0.5 * inv_m * tr_s2;

    for i in 0..d {
        for j in i..d {
            let mut ss = 0.0;
            let mut rr = 0.0;
            let mut sr = 0.0;
            let mut rs = 0.0;
            for k in 0..d {
                ss += s2[i * d + k] * s2[k * d + j];
                rr += r2[i * d + k] * r2[k * d + j];
                sr += s2[i * d + k] * r2[k * d + j];
                rs += r2[i * d + k] * s2[k * d + j];
            }
            let mut ss_t = 0.0;
            let mut rr_t = 0.0;
            let mut sr_t = 0.0;
            let mut rs_t = 0.0;
            for k in 0..d {
                ss_t += s2[j * d + k] * s2[k * d + i];
                rr_t += r2[j * d + k] * r2[k * d + i];
                sr_t += s2[j * d + k] * r2[k * d + i];
                rs_t += r2[j * d + k] * s2[k * d + i];
            }
            let u2 = 0.5 * (u.c2[i * d + j] + u.c2[j * d + i]);
            let v_s = -inv_m * 0.5 * (ss + ss_t) + h2m * 0.5 * (rr + rr_t) - u2;
            let v_r = -inv_m * 0.5 * (sr + rs + sr_t + rs_t);
            ds2[i * d + j] = v_s;
            ds2[j * d + i] = v_s;
            dr2[i * d + j] = v_r;
            dr2[j * d + i] = v_r;
        }
    }
}

/// Order-by-order residual matching with polynomial algebra (any K ≤ 4).
pub(crate) fn rhs_general(
    state: &CoefficientState,
    u: &PolynomialField,
    params: &PhysicalParams,
) -> Rhs {
    let order = state.order();
    let m = params.mass;
    let hbar2 = params.hbar * params.hbar;
    let s = Poly::from_field(&state.s);
    let r = Poly::from_field(&state.rho);
    let (u_trunc, u_dropped) = u.truncated(order);
    let up = Poly::from_field(&u_trunc);

    // ṡ = −|∇s|²/2m + (ħ²/2m)(|∇ρ|² + Δρ) − U, constant term dropped
    let mut ds = Poly::zero(state.dim());
    ds.add_scaled(-0.5 / m, &s.grad_dot(&s));
    ds.add_scaled(0.5 * hbar2 / m, &r.grad_dot(&r));
    ds.add_scaled(0.5 * hbar2 / m, &r.laplacian());
    ds.add_scaled(-1.0, &up);
    ds.drop_constant();

    // ρ̇ = −(1/m) ∇s·∇ρ − (1/2m) Δs
    let mut dr = Poly::zero(state.dim());
    dr.add_scaled(-1.0 / m, &s.grad_dot(&r));
    dr.add_scaled(-0.5 / m, &s.laplacian());

    let (ds_field, ds_dropped) = ds.to_field(order);
    let (dr_field, dr_dropped) = dr.to_field(order);
    Rhs {
        derivative: CoefficientState {
            t: state.t,
            s: ds_field,
            rho: dr_field,
        },
        truncated: u_dropped || ds_dropped || dr_dropped,
    }
}

/// The x-independent residual f(t) = (1/2m)|s1|² − (ħ²/2m)(|ρ1|² + tr ρ2) + U0.
pub fn f_internal(state: &CoefficientState, u: &PolynomialField, params: &PhysicalParams) -> f64 {
    let s1sq: f64 = state.s1().iter().map(|v| v * v).sum();
    let r1sq: f64 = state.rho1().iter().map(|v| v * v).sum();
    let m = params.mass;
    s1sq / (2.0 * m) - params.hbar * params.hbar / (2.0 * m) * (r1sq + state.rho.trace_c2()) + u.c0
}

/// Integrand of the Hermiticity condition, (1/m)(s1·ρ1 + ½ tr s2).
fn hermiticity_integrand(state: &CoefficientState, params: &PhysicalParams) -> f64 {
    let dot: f64 = state
        .s1()
        .iter()
        .zip(state.rho1())
        .map(|(a, b)| a * b)
        .sum();
    (dot + 0.5 * state.s.trace_c2()) / params.mass
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorStats {
    pub steps: usize,
    pub step_size: f64,
    /// Step-doubling estimate of the RK4 local error, sampled at a few steps.
    pub max_local_error: f64,
    /// Number of RHS evaluations in which non-zero orders above K were dropped.
    pub truncation_warnings: usize,
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub states: Vec<CoefficientState>,
    /// f(t) at every integrator node, aligned with `states`.
    pub f_samples: Vec<f64>,
    /// ∫₀ᵀ f dt (composite Simpson).
    pub f_integral: f64,
    pub hermiticity_defect: f64,
    /// |defect + (ρ₀(T) − ρ₀(0))|; zero up to integrator error.
    pub defect_identity_gap: f64,
    pub stats: IntegratorStats,
}

impl EvolutionResult {
    pub fn initial(&self) -> &CoefficientState {
        &self.states[0]
    }

    pub fn last(&self) -> &CoefficientState {
        self.states.last().expect("non-empty evolution")
    }

    pub fn duration(&self) -> f64 {
        self.last().t
    }

    pub fn step_size(&self) -> f64 {
        self.stats.step_size
    }
}

/// Endpoint-only summary of a flow, for objective evaluations that do not
/// need the full trajectory.
#[derive(Debug, Clone)]
pub struct FlowSummary {
    pub initial: CoefficientState,
    pub last: CoefficientState,
    pub f_integral: f64,
}

struct Flow<'a> {
    potential: &'a PotentialSchedule,
    params: &'a PhysicalParams,
    template: CoefficientState,
    quadratic: bool,
    truncations: usize,
}

impl Flow<'_> {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        let u = self.potential.lookup(t);
        if self.quadratic {
            rhs_quadratic(self.template.dim(), self.params, u, y, dy);
        } else {
            self.template.fill_from_flat(y);
            let out = rhs_general(&self.template, u, self.params);
            if out.truncated {
                self.truncations += 1;
            }
            dy.copy_from_slice(&out.derivative.to_flat());
        }
    }

    fn step(&mut self, t: f64, h: f64, y: &[f64], out: &mut [f64], scratch: &mut [Vec<f64>; 5]) {
        let [k1, k2, k3, k4, tmp] = scratch;
        self.eval(t, y, k1);
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        self.eval(t + 0.5 * h, tmp, k2);
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        self.eval(t + 0.5 * h, tmp, k3);
        for i in 0..y.len() {
            tmp[i] = y[i] + h * k3[i];
        }
        self.eval(t + h, tmp, k4);
        for i in 0..y.len() {
            out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

fn check_evolve_inputs(
    initial: &CoefficientState,
    duration: f64,
    params: &PhysicalParams,
    steps: usize,
) -> Result<()> {
    if steps < MIN_STEPS {
        return Err(QapError::Input(format!(
            "steps must be at least {MIN_STEPS}, got {steps}"
        )));
    }
    if initial.t != 0.0 {
        return Err(QapError::Input("initial state must sit at t = 0".into()));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(QapError::Input("duration must be positive".into()));
    }
    initial.check_shape(params)
}

const ERROR_PROBES: usize = 8;

fn integrate(
    initial: &CoefficientState,
    potential: &PotentialSchedule,
    duration: f64,
    params: &PhysicalParams,
    steps: usize,
    mut on_node: impl FnMut(usize, f64, &[f64], &mut Flow<'_>),
) -> Result<(Vec<f64>, IntegratorStats)> {
    check_evolve_inputs(initial, duration, params, steps)?;
    if potential
        .segments()
        .iter()
        .any(|(_, f)| f.dim() != params.dimension)
    {
        return Err(QapError::DimensionMismatch {
            expected: params.dimension,
            got: potential.lookup(0.0).dim(),
        });
    }
    let h = duration / steps as f64;
    let quadratic = initial.order() == 2 && potential.degree() == 2;
    let mut flow = Flow {
        potential,
        params,
        template: initial.clone(),
        quadratic,
        truncations: 0,
    };
    let mut y = initial.to_flat();
    let n = y.len();
    let mut next = vec![0.0; n];
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut half = vec![0.0; n];
    let mut double = vec![0.0; n];
    let probe_every = (steps / ERROR_PROBES).max(1);
    let mut max_local_error: f64 = 0.0;

    on_node(0, 0.0, &y, &mut flow);
    for i in 0..steps {
        let t = i as f64 * h;
        flow.step(t, h, &y, &mut next, &mut scratch);
        if i % probe_every == 0 {
            // Richardson estimate: (two half steps − one full step)/15
            flow.step(t, 0.5 * h, &y, &mut half, &mut scratch);
            flow.step(t + 0.5 * h, 0.5 * h, &half, &mut double, &mut scratch);
            let err = next
                .iter()
                .zip(&double)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                / 15.0;
            max_local_error = max_local_error.max(err);
        }
        let t_next = if i + 1 == steps {
            duration
        } else {
            (i + 1) as f64 * h
        };
        if next
            .iter()
            .any(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD)
        {
            return Err(QapError::Singularity { time: t_next });
        }
        std::mem::swap(&mut y, &mut next);
        on_node(i + 1, t_next, &y, &mut flow);
    }
    Ok((
        y,
        IntegratorStats {
            steps,
            step_size: h,
            max_local_error,
            truncation_warnings: flow.truncations,
        },
    ))
}

/// Integrates the coefficient flow over `[0, T]` with fixed-step classical RK4.
pub fn evolve(
    initial: &CoefficientState,
    potential: &PotentialSchedule,
    duration: f64,
    params: &PhysicalParams,
    steps: usize,
) -> Result<EvolutionResult> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut f_samples = Vec::with_capacity(steps + 1);
    let (_, stats) = integrate(
        initial,
        potential,
        duration,
        params,
        steps,
        |_, t, y, flow| {
            let mut state = flow.template.clone();
            state.fill_from_flat(y);
            state.t = t;
            f_samples.push(f_internal(&state, potential.lookup(t), params));
            states.push(state);
        },
    )?;
    let f_integral = simpson(&f_samples, stats.step_size);
    let mut result = EvolutionResult {
        states,
        f_samples,
        f_integral,
        hermiticity_defect: 0.0,
        defect_identity_gap: 0.0,
        stats,
    };
    result.hermiticity_defect = hermiticity_defect(&result, params);
    let delta_rho0 = result.last().rho0() - result.initial().rho0();
    result.defect_identity_gap = (result.hermiticity_defect + delta_rho0).abs();
    Ok(result)
}

/// Same flow as [`evolve`] but keeps only the endpoints and ∫f dt.
pub fn evolve_summary(
    initial: &CoefficientState,
    potential: &PotentialSchedule,
    duration: f64,
    params: &PhysicalParams,
    steps: usize,
) -> Result<FlowSummary> {
    let mut f_samples = Vec::with_capacity(steps + 1);
    let mut scratch = initial.clone();
    let (y, _) = integrate(initial, potential, duration, params, steps, |_, t, y, _| {
        scratch.fill_from_flat(y);
        f_samples.push(f_internal(&scratch, potential.lookup(t), params));
    })?;
    let mut last = initial.clone();
    last.fill_from_flat(&y);
    last.t = duration;
    Ok(FlowSummary {
        initial: initial.clone(),
        last,
        f_integral: simpson(&f_samples, duration / steps as f64),
    })
}

/// λ = s(x_T, T) − s(x₀, 0) − ∫₀ᵀ f dt.
pub fn action_eigenvalue(result: &EvolutionResult, x0: &[f64], x_t: &[f64]) -> Result<f64> {
    lambda_from_parts(result.initial(), result.last(), result.f_integral, x0, x_t)
}

pub(crate) fn lambda_from_parts(
    initial: &CoefficientState,
    last: &CoefficientState,
    f_integral: f64,
    x0: &[f64],
    x_t: &[f64],
) -> Result<f64> {
    let s_t = eval_poly_jet(&last.s, x_t)?.value;
    let s_0 = eval_poly_jet(&initial.s, x0)?.value;
    Ok(s_t - s_0 - f_integral)
}

impl FlowSummary {
    pub fn lambda(&self, x0: &[f64], x_t: &[f64]) -> Result<f64> {
        lambda_from_parts(&self.initial, &self.last, self.f_integral, x0, x_t)
    }
}

/// ∫₀ᵀ (1/m)(s1·ρ1 + ½ tr s2) dt; zero when the action operator is Hermitian.
pub fn hermiticity_defect(result: &EvolutionResult, params: &PhysicalParams) -> f64 {
    let samples: Vec<f64> = result
        .states
        .iter()
        .map(|s| hermiticity_integrand(s, params))
        .collect();
    simpson(&samples, result.step_size())
}
