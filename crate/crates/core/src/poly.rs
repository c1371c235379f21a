//! Monomial-basis polynomial algebra used by the general-order coefficient flow.

use std::collections::BTreeMap;

use crate::model::{flat_index, PolynomialField};

type Exponent = [u8; 3];

#[derive(Debug, Clone, Default)]
pub(crate) struct Poly {
    dim: usize,
    terms: BTreeMap<Exponent, f64>,
}

fn exponent_of(idx: &[usize]) -> Exponent {
    let mut e = [0u8; 3];
    for &i in idx {
        e[i] += 1;
    }
    e
}

fn factorial(n: u8) -> f64 {
    (1..=n as u32).product::<u32>() as f64
}

fn multi_factorial(e: &Exponent) -> f64 {
    e.iter().map(|&k| factorial(k)).product()
}

/// All index tuples of length `rank` over `0..dim`, in row-major order.
fn index_tuples(dim: usize, rank: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..dim.pow(rank as u32)).map(move |mut flat| {
        let mut idx = vec![0; rank];
        for slot in idx.iter_mut().rev() {
            *slot = flat % dim;
            flat /= dim;
        }
        idx
    })
}

impl Poly {
    pub(crate) fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: BTreeMap::new(),
        }
    }

    fn add_term(&mut self, e: Exponent, c: f64) {
        if c != 0.0 {
            *self.terms.entry(e).or_insert(0.0) += c;
        }
    }

    pub(crate) fn from_field(field: &PolynomialField) -> Self {
        let dim = field.dim();
        let mut p = Self::zero(dim);
        p.add_term([0; 3], field.c0);
        let tensors: [(usize, Option<&[f64]>); 4] = [
            (1, Some(&field.c1)),
            (2, Some(&field.c2)),
            (3, field.c3.as_deref()),
            (4, field.c4.as_deref()),
        ];
        for (rank, data) in tensors {
            let Some(data) = data else { continue };
            // one representative (sorted) tuple per monomial
            for idx in index_tuples(dim, rank).filter(|idx| idx.windows(2).all(|w| w[0] <= w[1])) {
                let e = exponent_of(&idx);
                p.add_term(e, data[flat_index(&idx, dim)] / multi_factorial(&e));
            }
        }
        p
    }

    /// Converts back to the Taylor-tensor convention keeping orders `0..=order`.
    /// Returns whether any non-zero coefficient above `order` was discarded.
    pub(crate) fn to_field(&self, order: usize) -> (PolynomialField, bool) {
        let dim = self.dim;
        let mut f = PolynomialField::zero_of_order(dim, order);
        let mut dropped = false;
        for (e, &c) in &self.terms {
            let deg: usize = e.iter().map(|&k| k as usize).sum();
            if deg > order {
                dropped |= c != 0.0;
                continue;
            }
            let value = c * multi_factorial(e);
            if deg == 0 {
                f.c0 = value;
                continue;
            }
            let target: &mut Vec<f64> = match deg {
                1 => &mut f.c1,
                2 => &mut f.c2,
                3 => f.c3.as_mut().expect("order >= 3"),
                _ => f.c4.as_mut().expect("order >= 4"),
            };
            for idx in index_tuples(dim, deg) {
                if exponent_of(&idx) == *e {
                    target[flat_index(&idx, dim)] = value;
                }
            }
        }
        (f, dropped)
    }

    pub(crate) fn derivative(&self, k: usize) -> Self {
        let mut out = Self::zero(self.dim);
        for (e, &c) in &self.terms {
            if e[k] > 0 {
                let mut e2 = *e;
                e2[k] -= 1;
                out.add_term(e2, c * e[k] as f64);
            }
        }
        out
    }

    pub(crate) fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.dim);
        for (a, &ca) in &self.terms {
            for (b, &cb) in &other.terms {
                out.add_term([a[0] + b[0], a[1] + b[1], a[2] + b[2]], ca * cb);
            }
        }
        out
    }

    pub(crate) fn add_scaled(&mut self, a: f64, other: &Self) {
        for (e, &c) in &other.terms {
            self.add_term(*e, a * c);
        }
    }

    /// Σ_k ∂_k p · ∂_k q
    pub(crate) fn grad_dot(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.dim);
        for k in 0..self.dim {
            out.add_scaled(1.0, &self.derivative(k).mul(&other.derivative(k)));
        }
        out
    }

    pub(crate) fn laplacian(&self) -> Self {
        let mut out = Self::zero(self.dim);
        for k in 0..self.dim {
            out.add_scaled(1.0, &self.derivative(k).derivative(k));
        }
        out
    }

    pub(crate) fn drop_constant(&mut self) {
        self.terms.remove(&[0; 3]);
    }
}
