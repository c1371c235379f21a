//! Physical parameters, polynomial fields, time grids and the discretization
//! context shared by every other module.

use crate::error::{QapError, Result, ValidationIssue};

/// Largest supported spatial dimension.
pub const MAX_DIMENSION: usize = 3;
/// Largest supported truncation order of the polynomial series.
pub const MAX_ORDER: usize = 4;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub mass: f64,
    /// Ordinary Planck constant. The functional constant ħ̃ = εħ is derived
    /// per discretization and never stored here.
    pub hbar: f64,
    pub dimension: usize,
}

impl PhysicalParams {
    pub fn new(mass: f64, hbar: f64, dimension: usize) -> Self {
        Self {
            mass,
            hbar,
            dimension,
        }
    }

    /// m = ħ = 1 in `dimension` dimensions.
    pub fn unit(dimension: usize) -> Self {
        Self::new(1.0, 1.0, dimension)
    }

    pub fn with_hbar(self, hbar: f64) -> Self {
        Self { hbar, ..self }
    }

    pub fn issues(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            out.push(ValidationIssue::new("nonpositive_mass", "nonpositive mass"));
        }
        if !(self.hbar > 0.0) || !self.hbar.is_finite() {
            out.push(ValidationIssue::new("nonpositive_hbar", "nonpositive hbar"));
        }
        if self.dimension == 0 || self.dimension > MAX_DIMENSION {
            out.push(ValidationIssue::new(
                "dimension_out_of_range",
                format!("dimension {} outside 1..={MAX_DIMENSION}", self.dimension),
            ));
        }
        out
    }
}

/// Real polynomial in `x ∈ R^D` with the Taylor convention
///
/// `p(x) = c0 + c1·x + ½ xᵀc2 x + (1/3!) c3·x³ + (1/4!) c4·x⁴`.
///
/// Tensors are stored dense and row-major (`c2[i*D + j]`, and so on). The stored
/// numbers are the series coefficients themselves, never pre-multiplied by the
/// factorials.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialField {
    pub c0: f64,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub c3: Option<Vec<f64>>,
    pub c4: Option<Vec<f64>>,
}

/// Value, gradient and Laplacian of a polynomial at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub laplacian: f64,
}

impl PolynomialField {
    pub fn zero(dim: usize) -> Self {
        Self {
            c0: 0.0,
            c1: vec![0.0; dim],
            c2: vec![0.0; dim * dim],
            c3: None,
            c4: None,
        }
    }

    /// Zero field that structurally carries every order up to `order`.
    pub fn zero_of_order(dim: usize, order: usize) -> Self {
        let mut f = Self::zero(dim);
        if order >= 3 {
            f.c3 = Some(vec![0.0; dim.pow(3)]);
        }
        if order >= 4 {
            f.c4 = Some(vec![0.0; dim.pow(4)]);
        }
        f
    }

    pub fn constant(dim: usize, c0: f64) -> Self {
        Self {
            c0,
            ..Self::zero(dim)
        }
    }

    /// `c0 + c1 x + ½ c2 x²` in one dimension.
    pub fn quadratic_1d(c0: f64, c1: f64, c2: f64) -> Self {
        Self {
            c0,
            c1: vec![c1],
            c2: vec![c2],
            c3: None,
            c4: None,
        }
    }

    /// Builds a quadratic field from a D-vector and a row-major D×D matrix.
    pub fn quadratic(c0: f64, c1: Vec<f64>, c2: Vec<f64>) -> Result<Self> {
        let d = c1.len();
        if c2.len() != d * d {
            return Err(QapError::DimensionMismatch {
                expected: d * d,
                got: c2.len(),
            });
        }
        Ok(Self {
            c0,
            c1,
            c2,
            c3: None,
            c4: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.c1.len()
    }

    /// Highest structurally present order (2 for a plain quadratic field).
    pub fn degree(&self) -> usize {
        if self.c4.is_some() {
            4
        } else if self.c3.is_some() {
            3
        } else {
            2
        }
    }

    pub fn c2_at(&self, i: usize, j: usize) -> f64 {
        self.c2[i * self.dim() + j]
    }

    pub fn trace_c2(&self) -> f64 {
        (0..self.dim()).map(|i| self.c2_at(i, i)).sum()
    }

    /// Returns `self + a·other`. Orders present in either operand are kept.
    pub fn add_scaled(&self, a: f64, other: &PolynomialField) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(QapError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let axpy = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(x, y)| x + a * y).collect()
        };
        let opt = |x: &Option<Vec<f64>>, y: &Option<Vec<f64>>, len: usize| match (x, y) {
            (None, None) => None,
            (x, y) => {
                let zero = vec![0.0; len];
                Some(axpy(
                    x.as_deref().unwrap_or(&zero),
                    y.as_deref().unwrap_or(&zero),
                ))
            }
        };
        let d = self.dim();
        Ok(Self {
            c0: self.c0 + a * other.c0,
            c1: axpy(&self.c1, &other.c1),
            c2: axpy(&self.c2, &other.c2),
            c3: opt(&self.c3, &other.c3, d.pow(3)),
            c4: opt(&self.c4, &other.c4, d.pow(4)),
        })
    }

    /// Drops every order above `order`; the flag reports whether any dropped
    /// coefficient was non-zero.
    pub fn truncated(&self, order: usize) -> (Self, bool) {
        let mut out = self.clone();
        let mut dropped = false;
        if order < 4 {
            if let Some(c4) = out.c4.take() {
                dropped |= c4.iter().any(|&v| v != 0.0);
            }
        }
        if order < 3 {
            if let Some(c3) = out.c3.take() {
                dropped |= c3.iter().any(|&v| v != 0.0);
            }
        }
        (out, dropped)
    }

    pub fn is_finite(&self) -> bool {
        self.coefficients().all(f64::is_finite)
    }

    pub(crate) fn coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.c0)
            .chain(self.c1.iter().copied())
            .chain(self.c2.iter().copied())
            .chain(self.c3.iter().flatten().copied())
            .chain(self.c4.iter().flatten().copied())
    }

    pub fn max_abs(&self) -> f64 {
        self.coefficients().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn issues(&self, dim: usize) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let lens_ok = self.c1.len() == dim
            && self.c2.len() == dim * dim
            && self.c3.as_ref().is_none_or(|c| c.len() == dim.pow(3))
            && self.c4.as_ref().is_none_or(|c| c.len() == dim.pow(4));
        if !lens_ok {
            out.push(ValidationIssue::new(
                "field_dimension_mismatch",
                format!("polynomial field does not have dimension {dim}"),
            ));
            return out;
        }
        if !self.is_finite() {
            out.push(ValidationIssue::new(
                "nonfinite_coefficient",
                "non-finite polynomial coefficient",
            ));
        }
        if !tensor_symmetric(&self.c2, dim, 2) {
            out.push(ValidationIssue::new(
                "asymmetric_quadratic_coefficient",
                "asymmetric quadratic coefficient",
            ));
        }
        let higher_ok = self.c3.as_ref().is_none_or(|c| tensor_symmetric(c, dim, 3))
            && self.c4.as_ref().is_none_or(|c| tensor_symmetric(c, dim, 4));
        if !higher_ok {
            out.push(ValidationIssue::new(
                "asymmetric_higher_coefficient",
                "higher-order coefficient not symmetric under index permutations",
            ));
        }
        out
    }
}

/// Row-major flat index of a tensor entry.
pub(crate) fn flat_index(idx: &[usize], dim: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * dim + i)
}

fn tensor_symmetric(data: &[f64], dim: usize, rank: usize) -> bool {
    let n = dim.pow(rank as u32);
    let mut idx = vec![0usize; rank];
    for flat in 0..n {
        let mut r = flat;
        for slot in idx.iter_mut().rev() {
            *slot = r % dim;
            r /= dim;
        }
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        let a = data[flat];
        let b = data[flat_index(&sorted, dim)];
        if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
            return false;
        }
    }
    true
}

/// Exact value, gradient and Laplacian of `field` at `x`.
pub fn eval_poly_jet(field: &PolynomialField, x: &[f64]) -> Result<Jet> {
    let d = field.dim();
    if x.len() != d {
        return Err(QapError::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }

    let mut value = field.c0;
    let mut gradient = field.c1.clone();
    let mut laplacian = 0.0;
    for i in 0..d {
        value += field.c1[i] * x[i];
        laplacian += field.c2[i * d + i];
        for j in 0..d {
            let c = field.c2[i * d + j];
            value += 0.5 * c * x[i] * x[j];
            gradient[i] += c * x[j];
        }
    }
    if let Some(c3) = &field.c3 {
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let c = c3[(i * d + j) * d + k];
                    value += c * x[i] * x[j] * x[k] / 6.0;
                    gradient[i] += 0.5 * c * x[j] * x[k];
                    if i == j {
                        laplacian += c * x[k];
                    }
                }
            }
        }
    }
    if let Some(c4) = &field.c4 {
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let c = c4[((i * d + j) * d + k) * d + l];
                        value += c * x[i] * x[j] * x[k] * x[l] / 24.0;
                        gradient[i] += c * x[j] * x[k] * x[l] / 6.0;
                        if i == j {
                            laplacian += 0.5 * c * x[k] * x[l];
                        }
                    }
                }
            }
        }
    }
    Ok(Jet {
        value,
        gradient,
        laplacian,
    })
}

/// Piecewise-constant potential: segment `i` is active on `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSchedule {
    segments: Vec<(f64, PolynomialField)>,
}

impl PotentialSchedule {
    /// Unchecked constructor; run [`validate_model`] before use.
    pub fn new(segments: Vec<(f64, PolynomialField)>) -> Self {
        Self { segments }
    }

    pub fn constant(field: PolynomialField) -> Self {
        Self::new(vec![(0.0, field)])
    }

    /// U = 0 in `dim` dimensions.
    pub fn free(dim: usize) -> Self {
        Self::constant(PolynomialField::zero(dim))
    }

    pub fn segments(&self) -> &[(f64, PolynomialField)] {
        &self.segments
    }

    pub fn lookup(&self, t: f64) -> &PolynomialField {
        let idx = self
            .segments
            .partition_point(|(start, _)| *start <= t)
            .saturating_sub(1);
        &self.segments[idx].1
    }

    /// `U + a·g` on every segment.
    pub fn with_added(&self, a: f64, g: &PolynomialField) -> Result<Self> {
        let segments = self
            .segments
            .iter()
            .map(|(t, f)| Ok((*t, f.add_scaled(a, g)?)))
            .collect::<Result<_>>()?;
        Ok(Self { segments })
    }

    pub fn degree(&self) -> usize {
        self.segments
            .iter()
            .map(|(_, f)| f.degree())
            .max()
            .unwrap_or(0)
    }

    pub fn issues(&self, dim: usize) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let Some((first, _)) = self.segments.first() else {
            out.push(ValidationIssue::new(
                "empty_schedule",
                "potential schedule is empty",
            ));
            return out;
        };
        if *first != 0.0 {
            out.push(ValidationIssue::new(
                "schedule_not_starting_at_zero",
                "first potential segment must start at t = 0",
            ));
        }
        if self.segments.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            out.push(ValidationIssue::new(
                "schedule_not_increasing",
                "segment start times must be strictly increasing",
            ));
        }
        for (_, field) in &self.segments {
            out.extend(field.issues(dim));
        }
        out
    }
}

/// Uniform time grid `t_n = nε`, `n = 0..=N`, with ε = T/N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    duration: f64,
    slices: usize,
    epsilon: f64,
}

impl TimeGrid {
    pub fn new(duration: f64, slices: usize) -> Result<Self> {
        let grid = Self::new_unchecked(duration, slices);
        let issues = grid.issues();
        if issues.is_empty() {
            Ok(grid)
        } else {
            Err(QapError::Validation(issues))
        }
    }

    fn new_unchecked(duration: f64, slices: usize) -> Self {
        Self {
            duration,
            slices,
            epsilon: duration / slices.max(1) as f64,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `t_n`; the last node is exactly `T`.
    pub fn node(&self, n: usize) -> f64 {
        if n == self.slices {
            self.duration
        } else {
            n as f64 * self.epsilon
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.slices).map(|n| self.node(n)).collect()
    }

    fn issues(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            out.push(ValidationIssue::new(
                "nonpositive_duration",
                "total duration must be positive",
            ));
        }
        if self.slices == 0 {
            out.push(ValidationIssue::new(
                "zero_slices",
                "number of slices must be at least 1",
            ));
        }
        out
    }
}

/// A time grid together with the derived functional constant ħ̃ = εħ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationContext {
    pub grid: TimeGrid,
    pub hbar: f64,
    pub hbar_tilde: f64,
}

impl DiscretizationContext {
    pub fn new(grid: TimeGrid, params: &PhysicalParams) -> Self {
        Self {
            grid,
            hbar: params.hbar,
            hbar_tilde: grid.epsilon() * params.hbar,
        }
    }
}

/// A model whose invariants have all been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: PhysicalParams,
    pub potential: PotentialSchedule,
    pub grid: TimeGrid,
    pub truncation_order: usize,
    /// Set when `truncation_order > 2`: the coefficient hierarchy is closed
    /// by dropping generated orders above K, which is not exact.
    pub truncated_closure: bool,
}

impl Model {
    pub fn context(&self) -> DiscretizationContext {
        DiscretizationContext::new(self.grid, &self.params)
    }
}

/// Checks every invariant and reports all violations at once.
pub fn validate_model(
    params: PhysicalParams,
    potential: PotentialSchedule,
    duration: f64,
    slices: usize,
    truncation_order: usize,
) -> Result<Model> {
    let mut issues = params.issues();
    let grid = TimeGrid::new_unchecked(duration, slices);
    issues.extend(grid.issues());
    if (1..=MAX_DIMENSION).contains(&params.dimension) {
        issues.extend(potential.issues(params.dimension));
    }
    if !(2..=MAX_ORDER).contains(&truncation_order) {
        issues.push(ValidationIssue::new(
            "truncation_order_out_of_range",
            format!("truncation order {truncation_order} outside 2..={MAX_ORDER}"),
        ));
    } else if potential.degree() > truncation_order {
        issues.push(ValidationIssue::new(
            "potential_degree_exceeds_truncation",
            format!(
                "potential degree {} exceeds truncation order {truncation_order}",
                potential.degree()
            ),
        ));
    }
    if issues.is_empty() {
        Ok(Model {
            params,
            potential,
            grid,
            truncation_order,
            truncated_closure: truncation_order > 2,
        })
    } else {
        Err(QapError::Validation(issues))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_of_zero_field() {
        let jet = eval_poly_jet(&PolynomialField::zero(1), &[7.0]).unwrap();
        assert_eq!(
            jet,
            Jet {
                value: 0.0,
                gradient: vec![0.0],
                laplacian: 0.0
            }
        );
    }

    #[test]
    fn jet_of_linear_field() {
        let f = PolynomialField::quadratic_1d(0.0, 3.0, 0.0);
        let jet = eval_poly_jet(&f, &[2.0]).unwrap();
        assert_eq!(
            jet,
            Jet {
                value: 6.0,
                gradient: vec![3.0],
                laplacian: 0.0
            }
        );
    }

    #[test]
    fn jet_uses_half_convention() {
        let f = PolynomialField::quadratic_1d(0.0, 0.0, 2.0);
        let jet = eval_poly_jet(&f, &[1.0]).unwrap();
        assert_eq!(
            jet,
            Jet {
                value: 1.0,
                gradient: vec![2.0],
                laplacian: 2.0
            }
        );
    }

    #[test]
    fn jet_rejects_wrong_dimension() {
        let err = eval_poly_jet(&PolynomialField::zero(2), &[1.0]).unwrap_err();
        assert!(matches!(
            err,
            QapError::DimensionMismatch {
                expected: 2,
                got: 1
            }
        ));
    }

    #[test]
    fn cubic_and_quartic_1d() {
        let mut f = PolynomialField::zero_of_order(1, 4);
        f.c3 = Some(vec![6.0]);
        f.c4 = Some(vec![24.0]);
        // x³ + x⁴ at x = 2
        let jet = eval_poly_jet(&f, &[2.0]).unwrap();
        assert_eq!(jet.value, 24.0);
        assert_eq!(jet.gradient, vec![3.0 * 4.0 + 4.0 * 8.0]);
        assert_eq!(jet.laplacian, 6.0 * 2.0 + 12.0 * 4.0);
    }

    #[test]
    fn valid_model() {
        let m = validate_model(
            PhysicalParams::unit(1),
            PotentialSchedule::free(1),
            1.0,
            8,
            2,
        )
        .unwrap();
        assert_eq!(m.grid.epsilon() * 8.0, 1.0);
        assert!(!m.truncated_closure);
    }

    fn codes(err: QapError) -> Vec<&'static str> {
        match err {
            QapError::Validation(issues) => issues.into_iter().map(|i| i.code).collect(),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn negative_mass_is_reported() {
        let err = validate_model(
            PhysicalParams::new(-1.0, 1.0, 1),
            PotentialSchedule::free(1),
            1.0,
            8,
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nonpositive mass"));
        assert_eq!(codes(err), vec!["nonpositive_mass"]);
    }

    #[test]
    fn asymmetric_quadratic_is_reported() {
        let u = PolynomialField::quadratic(0.0, vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        let err = validate_model(
            PhysicalParams::unit(2),
            PotentialSchedule::constant(u),
            1.0,
            8,
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("asymmetric quadratic coefficient"));
    }

    #[test]
    fn every_issue_is_collected() {
        let sched = PotentialSchedule::new(vec![
            (0.5, PolynomialField::zero(1)),
            (0.25, PolynomialField::zero(1)),
        ]);
        let err = validate_model(PhysicalParams::new(1.0, 0.0, 1), sched, -1.0, 0, 5).unwrap_err();
        let c = codes(err);
        for code in [
            "nonpositive_hbar",
            "nonpositive_duration",
            "zero_slices",
            "schedule_not_starting_at_zero",
            "schedule_not_increasing",
            "truncation_order_out_of_range",
        ] {
            assert!(c.contains(&code), "missing {code} in {c:?}");
        }
    }

    #[test]
    fn potential_above_truncation_is_rejected() {
        let u = PolynomialField::zero_of_order(1, 4);
        let err = validate_model(
            PhysicalParams::unit(1),
            PotentialSchedule::constant(u),
            1.0,
            4,
            3,
        )
        .unwrap_err();
        assert_eq!(codes(err), vec!["potential_degree_exceeds_truncation"]);
    }

    #[test]
    fn higher_order_model_flags_truncated_closure() {
        let m = validate_model(
            PhysicalParams::unit(1),
            PotentialSchedule::free(1),
            1.0,
            4,
            4,
        )
        .unwrap();
        assert!(m.truncated_closure);
    }

    #[test]
    fn schedule_lookup_is_piecewise_constant() {
        let s = PotentialSchedule::new(vec![
            (0.0, PolynomialField::constant(1, 1.0)),
            (0.5, PolynomialField::constant(1, 2.0)),
        ]);
        assert_eq!(s.lookup(0.0).c0, 1.0);
        assert_eq!(s.lookup(0.49).c0, 1.0);
        assert_eq!(s.lookup(0.5).c0, 2.0);
        assert_eq!(s.lookup(3.0).c0, 2.0);
    }

    #[test]
    fn hbar_tilde_is_epsilon_times_hbar() {
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let ctx = DiscretizationContext::new(grid, &PhysicalParams::new(1.0, 0.3, 1));
        assert_eq!(ctx.hbar_tilde, 0.25 * 0.3);
        assert_eq!(grid.nodes().last().copied(), Some(2.0));
    }
}
