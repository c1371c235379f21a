//! Scenario dispatch.

use std::path::PathBuf;

use qap_core::oracle::{compare_states, propagate_grid, wrap_phase};
use qap_core::stationary::classical_action_reference;
use qap_core::{
    action_eigenvalue, auto_domain, build_slices, classical_limit_sweep, default_guesses,
    endpoint_probability, evolve, find_stationary, path_probability, predict_endpoint,
    probe_sensitivity, residual_convergence, CoefficientState, GridState, InitialCoefficientVector,
    Model, NodeBox, PathSampler, ProbeMode, QapError, StationaryProblem,
};

use crate::config::{
    BoxDto, ClassicalLimitSpec, CorrespondenceSpec, EvolveSpec, ProbabilityQuery, ProbabilitySpec,
    ProbeModeDto, ProbeSpec, RunConfig, SamplerKind, Scenario, StationarySpec, TrajectorySpec,
};
use crate::report::{canonical_json, emit_report, sha256_hex, Cell, RunSummary, Table};
use crate::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const DEFAULT_OUTPUT_DIR: &str = "qap-out";

/// A finished run: the summary as written and where it went.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub summary_path: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }
}

/// SHA-256 of the canonical config with the output directory removed.
pub fn config_hash(config: &RunConfig) -> String {
    sha256_hex(canonical_json(&config.semantic_json()).as_bytes())
}

/// Validates, runs the scenario and writes its artifacts. Numerical failures
/// still produce a summary (exit code 3); invalid configs produce none.
pub fn run_config(config: &RunConfig) -> Result<RunOutcome, CliError> {
    let model = config.validate()?;
    let mut summary = RunSummary::new(config.scenario.name(), config_hash(config), config.seed);
    let mut tables = Vec::new();
    let result = match &config.scenario {
        Scenario::Evolve(s) => run_evolve(config, &model, s, &mut summary, &mut tables),
        Scenario::Correspondence(s) => {
            run_correspondence(config, &model, s, &mut summary, &mut tables)
        }
        Scenario::Probability(s) => run_probability(config, &model, s, &mut summary),
        Scenario::Stationary(s) => run_stationary(config, &model, s, &mut summary),
        Scenario::ClassicalLimit(s) => {
            run_classical_limit(config, &model, s, &mut summary, &mut tables)
        }
        Scenario::Trajectory(s) => run_trajectory(config, &model, s, &mut summary),
        Scenario::Probe(s) => run_probe(config, &model, s, &mut summary),
    };
    match result {
        Ok(()) => {}
        Err(e) if e.is_numerical() => {
            summary.exit_code = EXIT_NUMERICAL;
            summary.warnings.push(e.to_string());
        }
        Err(e) => return Err(CliError::Invalid(vec![e.to_string()])),
    }
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let summary_path = emit_report(&dir, &mut summary, &tables)?;
    Ok(RunOutcome {
        summary,
        summary_path,
    })
}

type Tables = Vec<(String, Table)>;

fn upper_pairs(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |i| (i..d).map(move |j| (i, j)))
}

fn trajectory_table(states: &[CoefficientState], f: &[f64]) -> Table {
    let d = states[0].dim();
    let mut header = vec!["t".to_string(), "f".to_string(), "rho0".to_string()];
    for name in ["s1", "s2", "rho1", "rho2"] {
        if name.ends_with('1') {
            header.extend((0..d).map(|i| {
                if d == 1 {
                    name.to_string()
                } else {
                    format!("{name}_{i}")
                }
            }));
        } else {
            header.extend(upper_pairs(d).map(|(i, j)| {
                if d == 1 {
                    name.to_string()
                } else {
                    format!("{name}_{i}{j}")
                }
            }));
        }
    }
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new(&refs);
    for (st, &fv) in states.iter().zip(f) {
        let mut row = vec![Cell::Float(st.t), Cell::Float(fv), Cell::Float(st.rho0())];
        let sym = |m: &[f64]| {
            upper_pairs(d)
                .map(move |(i, j)| m[i * d + j])
                .collect::<Vec<_>>()
        };
        row.extend(st.s1().iter().map(|&v| Cell::Float(v)));
        row.extend(sym(st.s2()).into_iter().map(Cell::Float));
        row.extend(st.rho1().iter().map(|&v| Cell::Float(v)));
        row.extend(sym(st.rho2()).into_iter().map(Cell::Float));
        table.push(row);
    }
    table
}

fn density_table(state: &GridState) -> Table {
    let mut t = Table::new(&["x", "density"]);
    for (x, rho) in state.density_profile() {
        t.push(vec![Cell::Float(x), Cell::Float(rho)]);
    }
    t
}

fn run_evolve(
    config: &RunConfig,
    model: &Model,
    spec: &EvolveSpec,
    summary: &mut RunSummary,
    tables: &mut Tables,
) -> Result<(), QapError> {
    let params = &model.params;
    let initial = spec.initial.to_state(params.dimension);
    let flow = evolve(
        &initial,
        &model.potential,
        model.grid.duration(),
        params,
        config.steps,
    )?;
    summary.set("lambda", action_eigenvalue(&flow, &spec.x0, &spec.x_t)?);
    summary.set("f_integral", flow.f_integral);
    summary.set("hermiticity_defect", flow.hermiticity_defect);
    summary.set("defect_identity_gap", flow.defect_identity_gap);
    let truncations = flow.stats.truncation_warnings;
    summary.count("truncation_warnings", truncations as i64);
    if truncations > 0 {
        summary.warnings.push(format!(
            "{truncations} steps dropped coefficients above the truncation order"
        ));
    }
    tables.push((
        "trajectory.csv".into(),
        trajectory_table(&flow.states, &flow.f_samples),
    ));
    if let Some(oracle) = spec.oracle {
        let (xmin, xmax) = auto_domain(&flow)?;
        let start = GridState::from_coefficients(&initial, params, xmin, xmax, oracle.grid_points)?;
        let end = propagate_grid(
            &start,
            &model.potential,
            params,
            model.grid.duration(),
            oracle.grid_steps,
        )?;
        let built =
            GridState::from_coefficients(flow.last(), params, xmin, xmax, oracle.grid_points)?;
        let (fidelity, phase) = compare_states(&built, &end)?;
        let n0 = start.norm_squared();
        summary.set("fidelity", fidelity);
        summary.set(
            "phase_error",
            wrap_phase(phase + flow.f_integral / params.hbar),
        );
        summary.set("norm_drift", (end.norm_squared() - n0).abs() / n0);
        tables.push(("density_initial.csv".into(), density_table(&start)));
        tables.push(("density_final.csv".into(), density_table(&end)));
    }
    Ok(())
}

fn run_correspondence(
    config: &RunConfig,
    model: &Model,
    spec: &CorrespondenceSpec,
    summary: &mut RunSummary,
    tables: &mut Tables,
) -> Result<(), QapError> {
    let params = &model.params;
    let initial = spec.initial.to_state(params.dimension);
    let flow = evolve(
        &initial,
        &model.potential,
        model.grid.duration(),
        params,
        config.steps,
    )?;
    let sampler = match spec.sampler {
        SamplerKind::Uniform => PathSampler::Uniform {
            lo: spec.lo,
            hi: spec.hi,
        },
        SamplerKind::Constant => PathSampler::Constant {
            lo: spec.lo,
            hi: spec.hi,
        },
    };
    let seed = config.seed.expect("validated");
    let study = residual_convergence(
        &flow,
        params,
        &model.potential,
        &spec.n_list,
        spec.samples,
        seed,
        sampler,
    )?;
    let mut table = Table::new(&["N", "max_residual", "mean_residual"]);
    for row in &study.rows {
        table.push(vec![
            Cell::Int(row.slices as i64),
            Cell::Float(row.max_residual),
            Cell::Float(row.mean_residual),
        ]);
    }
    tables.push(("residuals.csv".into(), table));
    match study.fitted_order {
        Some(p) => summary.set("fitted_order", p),
        None => summary
            .warnings
            .push("no convergence order fitted: residuals are zero or not decreasing".into()),
    }
    if let Some(last) = study.rows.last() {
        summary.set("max_residual", last.max_residual);
    }
    summary.count("strictly_decreasing", study.strictly_decreasing() as i64);
    Ok(())
}

fn node_box(b: BoxDto) -> NodeBox {
    NodeBox::new(b.center, b.delta)
}

fn run_probability(
    config: &RunConfig,
    model: &Model,
    spec: &ProbabilitySpec,
    summary: &mut RunSummary,
) -> Result<(), QapError> {
    let params = &model.params;
    let initial = spec.initial.to_state(params.dimension);
    let flow = evolve(
        &initial,
        &model.potential,
        model.grid.duration(),
        params,
        config.steps,
    )?;
    let slices = build_slices(&flow, &model.context())?;
    match &spec.query {
        ProbabilityQuery::Path { boxes } => {
            let boxes: Vec<NodeBox> = boxes.iter().copied().map(node_box).collect();
            summary.set("probability", path_probability(&slices, &boxes, true)?);
        }
        ProbabilityQuery::Endpoint { start, end } => {
            let ep = endpoint_probability(&slices, node_box(*start), node_box(*end))?;
            summary.set("probability", ep.probability);
            summary.set("raw_discrepancy", ep.raw_discrepancy);
            match ep.tensor {
                Some(t) => summary.set("tensor_probability", t),
                None => summary
                    .warnings
                    .push("dense tensor check skipped: grid exceeds the point budget".into()),
            }
        }
    }
    Ok(())
}

fn problem(config: &RunConfig, model: &Model, x0: Vec<f64>, x_t: Vec<f64>) -> StationaryProblem {
    let mut p = StationaryProblem::new(
        x0,
        x_t,
        model.grid.duration(),
        model.potential.clone(),
        model.params,
    );
    p.steps = config.steps;
    p
}

fn run_stationary(
    config: &RunConfig,
    model: &Model,
    spec: &StationarySpec,
    summary: &mut RunSummary,
) -> Result<(), QapError> {
    let p = problem(config, model, spec.x0.clone(), spec.x_t.clone());
    let r = find_stationary(&p, &default_guesses(&p), &config.search_options())?;
    summary.set("lambda0", r.lambda0);
    summary.set("grad_norm", r.grad_norm);
    for (i, v) in r.c_star.values().iter().enumerate() {
        summary.set(&format!("c_star_{i}"), *v);
    }
    summary.count("iterations", r.iterations as i64);
    summary.count("converged", r.converged as i64);
    summary.count("multistart_index", r.multistart_index as i64);
    Ok(())
}

fn run_classical_limit(
    config: &RunConfig,
    model: &Model,
    spec: &ClassicalLimitSpec,
    summary: &mut RunSummary,
    tables: &mut Tables,
) -> Result<(), QapError> {
    let mass = model.params.mass;
    let duration = model.grid.duration();
    let scenario = spec.system.into();
    let reference = classical_action_reference(scenario, mass, spec.x0, spec.x_t, duration)?;
    summary.set("I_cl", reference);
    let rows = classical_limit_sweep(
        &spec.hbar_list,
        scenario,
        mass,
        spec.x0,
        spec.x_t,
        duration,
        config.steps,
        &config.search_options(),
    )?;
    let mut table = Table::new(&[
        "hbar",
        "lambda0",
        "I_cl",
        "rel_error",
        "grad_norm",
        "converged",
    ]);
    for r in &rows {
        table.push(vec![
            Cell::Float(r.hbar),
            Cell::Float(r.lambda0),
            Cell::Float(r.classical),
            Cell::Float(r.rel_error),
            Cell::Float(r.grad_norm),
            Cell::Bool(r.converged),
        ]);
    }
    tables.push(("classical_limit.csv".into(), table));
    if let Some(last) = rows.last() {
        summary.set("lambda0", last.lambda0);
        summary.set("rel_error", last.rel_error);
    }
    let unconverged = rows.iter().filter(|r| !r.converged).count();
    summary.count("unconverged_rows", unconverged as i64);
    if unconverged > 0 {
        summary
            .warnings
            .push(format!("{unconverged} sweep rows did not converge"));
    }
    Ok(())
}

fn run_trajectory(
    config: &RunConfig,
    model: &Model,
    spec: &TrajectorySpec,
    summary: &mut RunSummary,
) -> Result<(), QapError> {
    let p = problem(config, model, vec![spec.x0], vec![spec.x0]);
    let e = predict_endpoint(&p, spec.x0, spec.p0, spec.bracket, &config.search_options())?;
    summary.set("x_t", e.x_t);
    summary.set("p_t", e.p_t);
    summary.count("refinements", e.refinements as i64);
    Ok(())
}

fn run_probe(
    config: &RunConfig,
    model: &Model,
    spec: &ProbeSpec,
    summary: &mut RunSummary,
) -> Result<(), QapError> {
    let dim = model.params.dimension;
    let p = problem(config, model, spec.x0.clone(), spec.x_t.clone());
    let mode = match &spec.mode {
        ProbeModeDto::Stationary => ProbeMode::AtStationary,
        ProbeModeDto::Fixed(c) => {
            ProbeMode::AtFixedC(InitialCoefficientVector::new(dim, c.clone())?)
        }
    };
    let r = probe_sensitivity(
        &p,
        &spec.probe.to_field(dim),
        spec.alpha_step,
        &mode,
        &config.search_options(),
    )?;
    summary.set("derivative", r.derivative);
    summary.set("coarse", r.coarse);
    summary.set("fine", r.fine);
    Ok(())
}
