//! Independent 1-D Schrödinger solver used to cross-check the coefficient flow.
//!
//! Crank–Nicolson in time, second-order central differences in space,
//! Dirichlet walls. The grid solves `iħψ̇ = −(ħ²/2m)ψ″ + Uψ` with no `f`
//! term, so it differs from the coefficient-built Gaussian by the global
//! phase `exp(−(i/ħ)∫f dt)` and nothing else.

use num_complex::Complex64;

use crate::dynamics::{evolve, CoefficientState, EvolutionResult};
use crate::error::{QapError, Result};
use crate::model::{eval_poly_jet, PhysicalParams, PolynomialField, PotentialSchedule};

pub const MIN_GRID_POINTS: usize = 256;
pub const DEFAULT_GRID_POINTS: usize = 1024;
/// Largest tolerated edge amplitude relative to the peak during propagation.
pub const EDGE_TOL: f64 = 1e-6;
/// Domain half-margin in amplitude widths.
pub const DOMAIN_SIGMAS: f64 = 8.0;

/// Wave function sampled at `M` equally spaced points of `[xmin, xmax]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub xmin: f64,
    pub xmax: f64,
    pub values: Vec<Complex64>,
    pub t: f64,
}

impl GridState {
    pub fn new(xmin: f64, xmax: f64, values: Vec<Complex64>, t: f64) -> Result<Self> {
        if values.len() < MIN_GRID_POINTS {
            return Err(QapError::Input(format!(
                "grid needs at least {MIN_GRID_POINTS} points, got {}",
                values.len()
            )));
        }
        if !(xmax > xmin) || !xmin.is_finite() || !xmax.is_finite() {
            return Err(QapError::Input(format!(
                "invalid grid domain [{xmin}, {xmax}]"
            )));
        }
        Ok(Self {
            xmin,
            xmax,
            values,
            t,
        })
    }

    /// Samples `psi` on the grid.
    pub fn from_fn(
        xmin: f64,
        xmax: f64,
        points: usize,
        t: f64,
        psi: impl Fn(f64) -> Complex64,
    ) -> Result<Self> {
        let dx = (xmax - xmin) / (points.max(2) - 1) as f64;
        let values = (0..points).map(|j| psi(xmin + j as f64 * dx)).collect();
        Self::new(xmin, xmax, values, t)
    }

    /// The Gaussian `exp(χ(x))` of a 1-D coefficient state.
    pub fn from_coefficients(
        state: &CoefficientState,
        params: &PhysicalParams,
        xmin: f64,
        xmax: f64,
        points: usize,
    ) -> Result<Self> {
        if state.dim() != 1 {
            return Err(QapError::Precondition(
                "the grid oracle is one-dimensional".into(),
            ));
        }
        state.chi(&[0.0], params.hbar)?;
        Self::from_fn(xmin, xmax, points, state.t, |x| {
            state
                .chi(&[x], params.hbar)
                .expect("dimension checked")
                .exp()
        })
    }

    pub fn points(&self) -> usize {
        self.values.len()
    }

    pub fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / (self.points() - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.xmin + j as f64 * self.dx()
    }

    /// ∫|ψ|² dx (trapezoid).
    pub fn norm_squared(&self) -> f64 {
        trapezoid(self.dx(), self.values.iter().map(|v| v.norm_sqr()))
    }

    /// Largest edge amplitude relative to the peak.
    pub fn edge_ratio(&self) -> f64 {
        let peak = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let edge = self.values[0]
            .norm()
            .max(self.values[self.points() - 1].norm());
        if peak > 0.0 {
            edge / peak
        } else {
            0.0
        }
    }

    /// `(x, |ψ(x)|²)` pairs for plotting.
    pub fn density_profile(&self) -> Vec<(f64, f64)> {
        (0..self.points())
            .map(|j| (self.x(j), self.values[j].norm_sqr()))
            .collect()
    }

    fn same_grid(&self, other: &Self) -> bool {
        self.points() == other.points() && self.xmin == other.xmin && self.xmax == other.xmax
    }
}

fn trapezoid(dx: f64, samples: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = samples.len();
    samples
        .enumerate()
        .map(|(j, v)| if j == 0 || j + 1 == n { 0.5 * v } else { v })
        .sum::<f64>()
        * dx
}

/// Crank–Nicolson propagation over `[t, t + duration]`.
pub fn propagate_grid(
    initial: &GridState,
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    duration: f64,
    steps: usize,
) -> Result<GridState> {
    propagate_grid_observed(initial, potential, params, duration, steps, |_| {})
}

/// As [`propagate_grid`], calling `observer` on the state at every time node
/// including the first and the last.
pub fn propagate_grid_observed(
    initial: &GridState,
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    duration: f64,
    steps: usize,
    mut observer: impl FnMut(&GridState),
) -> Result<GridState> {
    if steps == 0 || !(duration > 0.0) {
        return Err(QapError::Input(
            "grid propagation needs positive duration and steps".into(),
        ));
    }
    if params.dimension != 1 || potential.segments().iter().any(|(_, u)| u.dim() != 1) {
        return Err(QapError::Precondition(
            "the grid oracle is one-dimensional".into(),
        ));
    }
    let mut state = GridState::new(
        initial.xmin,
        initial.xmax,
        initial.values.clone(),
        initial.t,
    )?;
    check_edges(&state)?;
    observer(&state);

    let m = state.points();
    let dx = state.dx();
    let dt = duration / steps as f64;
    let hbar = params.hbar;
    let kin = hbar * hbar / (2.0 * params.mass * dx * dx);
    let half = Complex64::new(0.0, 0.5 * dt / hbar);
    let xs: Vec<f64> = (0..m).map(|j| state.x(j)).collect();
    let t0 = state.t;

    let mut u_vals = vec![0.0; m];
    let mut current: Option<&PolynomialField> = None;
    let mut rhs = vec![Complex64::new(0.0, 0.0); m];
    let mut c_prime = vec![Complex64::new(0.0, 0.0); m];
    let off = -half * kin;

    for i in 0..steps {
        let t_mid = t0 + (i as f64 + 0.5) * dt;
        let u = potential.lookup(t_mid);
        if !current.is_some_and(|c| std::ptr::eq(c, u)) {
            for (v, &x) in u_vals.iter_mut().zip(&xs) {
                *v = eval_poly_jet(u, &[x])?.value;
            }
            current = Some(u);
        }
        let psi = &state.values;
        // right-hand side (1 − iΔtH/2ħ)ψ
        for j in 0..m {
            let lap = psi.get(j.wrapping_sub(1)).copied().unwrap_or_default()
                + psi.get(j + 1).copied().unwrap_or_default();
            let h_psi = (2.0 * kin + u_vals[j]) * psi[j] - kin * lap;
            rhs[j] = psi[j] - half * h_psi;
        }
        // Thomas solve of (1 + iΔtH/2ħ)ψ' = rhs
        let diag = |j: usize| Complex64::new(1.0, 0.0) + half * (2.0 * kin + u_vals[j]);
        let mut denom = diag(0);
        c_prime[0] = off / denom;
        rhs[0] /= denom;
        for j in 1..m {
            denom = diag(j) - off * c_prime[j - 1];
            c_prime[j] = off / denom;
            rhs[j] = (rhs[j] - off * rhs[j - 1]) / denom;
        }
        for j in (0..m - 1).rev() {
            let next = rhs[j + 1];
            rhs[j] -= c_prime[j] * next;
        }
        std::mem::swap(&mut state.values, &mut rhs);
        state.t = if i + 1 == steps {
            t0 + duration
        } else {
            t0 + (i + 1) as f64 * dt
        };
        check_edges(&state)?;
        observer(&state);
    }
    Ok(state)
}

fn check_edges(state: &GridState) -> Result<()> {
    let edge = state.edge_ratio();
    if !(edge <= EDGE_TOL) {
        return Err(QapError::DomainTooSmall {
            edge,
            time: state.t,
        });
    }
    Ok(())
}

/// `(fidelity, phase)` with fidelity `|⟨a,b⟩|/(‖a‖‖b‖)` and phase `arg⟨a,b⟩`.
pub fn compare_states(a: &GridState, b: &GridState) -> Result<(f64, f64)> {
    if !a.same_grid(b) {
        return Err(QapError::Input("states live on different grids".into()));
    }
    let (na, nb) = (a.norm_squared(), b.norm_squared());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(QapError::Input("zero-norm state".into()));
    }
    let n = a.points();
    let mut inner = Complex64::new(0.0, 0.0);
    for (j, (p, q)) in a.values.iter().zip(&b.values).enumerate() {
        let w = if j == 0 || j + 1 == n { 0.5 } else { 1.0 };
        inner += w * p.conj() * q;
    }
    inner *= a.dx();
    let fidelity = (inner.norm() / (na * nb).sqrt()).min(1.0);
    Ok((fidelity, inner.arg()))
}

/// ⟨g⟩ = ∫ g|ψ|² / ∫|ψ|² (trapezoid).
pub fn expectation(state: &GridState, g: &PolynomialField) -> Result<f64> {
    let dx = state.dx();
    let weights: Vec<f64> = state.values.iter().map(|v| v.norm_sqr()).collect();
    let mut gw = Vec::with_capacity(weights.len());
    for (j, w) in weights.iter().enumerate() {
        gw.push(eval_poly_jet(g, &[state.x(j)])?.value * w);
    }
    let norm = trapezoid(dx, weights.into_iter());
    if !(norm > 0.0) {
        return Err(QapError::Input("zero-norm state".into()));
    }
    Ok(trapezoid(dx, gw.into_iter()) / norm)
}

/// Domain covering `DOMAIN_SIGMAS` amplitude widths around every packet
/// center along a 1-D evolution.
pub fn auto_domain(result: &EvolutionResult) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for st in &result.states {
        if st.dim() != 1 {
            return Err(QapError::Precondition(
                "the grid oracle is one-dimensional".into(),
            ));
        }
        let rho2 = st.rho2()[0];
        if !(rho2 < 0.0) {
            return Err(QapError::Precondition(format!(
                "state at t = {} is not normalizable",
                st.t
            )));
        }
        let center = -st.rho1()[0] / rho2;
        let width = (-1.0 / rho2).sqrt();
        lo = lo.min(center - DOMAIN_SIGMAS * width);
        hi = hi.max(center + DOMAIN_SIGMAS * width);
    }
    Ok((lo, hi))
}

/// Grid evolution compared with the coefficient-built Gaussian at T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComparison {
    pub fidelity: f64,
    /// arg⟨ψ_coeff(T), ψ_grid(T)⟩.
    pub phase: f64,
    /// −(1/ħ)∫f dt wrapped into (−π, π].
    pub predicted_phase: f64,
    /// |‖ψ_grid(T)‖² − ‖ψ_grid(0)‖²| / ‖ψ_grid(0)‖².
    pub norm_drift: f64,
    pub xmin: f64,
    pub xmax: f64,
}

impl OracleComparison {
    /// Phase mismatch wrapped into (−π, π].
    pub fn phase_error(&self) -> f64 {
        wrap_phase(self.phase - self.predicted_phase)
    }
}

pub fn wrap_phase(a: f64) -> f64 {
    use std::f64::consts::PI;
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Runs both pipelines from `initial` and compares them at T.
pub fn cross_check(
    initial: &CoefficientState,
    potential: &PotentialSchedule,
    params: &PhysicalParams,
    duration: f64,
    flow_steps: usize,
    grid_points: usize,
    grid_steps: usize,
) -> Result<OracleComparison> {
    let flow = evolve(initial, potential, duration, params, flow_steps)?;
    let (xmin, xmax) = auto_domain(&flow)?;
    let start = GridState::from_coefficients(initial, params, xmin, xmax, grid_points)?;
    let end = propagate_grid(&start, potential, params, duration, grid_steps)?;
    let built = GridState::from_coefficients(flow.last(), params, xmin, xmax, grid_points)?;
    let (fidelity, phase) = compare_states(&built, &end)?;
    let n0 = start.norm_squared();
    Ok(OracleComparison {
        fidelity,
        phase,
        predicted_phase: wrap_phase(-flow.f_integral / params.hbar),
        norm_drift: (end.norm_squared() - n0).abs() / n0,
        xmin,
        xmax,
    })
}
