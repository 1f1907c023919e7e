//! Construction of the adjacency matrix, the generator `Q = A − D`, the
//! kernel `P = D⁻¹A`, the jump kernel `Q̂ = D̂⁻¹Â`, exit rates and the
//! reference distributions.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matrix::{kahan_sum, Matrix};

/// A randomly weighted complete digraph with `A[i][j] = θ_i X[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDigraph {
    theta: Vec<f64>,
    x: Matrix,
    a: Matrix,
}

impl WeightedDigraph {
    /// Treats `a` as the edge matrix with unit vertex weights.
    pub fn from_adjacency(a: Matrix) -> Result<Self> {
        build_adjacency(&vec![1.0; a.n()], a)
    }

    pub fn n(&self) -> usize {
        self.a.n()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn edge_weights(&self) -> &Matrix {
        &self.x
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.a
    }

    /// `Â`: the adjacency matrix with its diagonal removed.
    pub fn without_loops(&self) -> WeightedDigraph {
        let mut x = self.x.clone();
        let mut a = self.a.clone();
        for i in 0..self.n() {
            x[(i, i)] = 0.0;
            a[(i, i)] = 0.0;
        }
        WeightedDigraph {
            theta: self.theta.clone(),
            x,
            a,
        }
    }

    /// Full row sums of `A` (the diagonal of `D`).
    pub fn row_sums(&self) -> Vec<f64> {
        self.a.rows().map(|r| kahan_sum(r.iter().copied())).collect()
    }
}

pub fn build_adjacency(theta: &[f64], x: Matrix) -> Result<WeightedDigraph> {
    let n = x.n();
    if theta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: theta.len(),
        });
    }
    if let Some((index, &value)) = theta
        .iter()
        .enumerate()
        .find(|(_, t)| !(t.is_finite() && **t > 0.0))
    {
        return Err(Error::NonPositive { index, value });
    }
    if let Some(pos) = x.as_slice().iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "edge weight at ({}, {}) is negative or NaN",
            pos / n,
            pos % n
        )));
    }
    let mut a = x.clone();
    for (i, t) in theta.iter().enumerate() {
        a.row_mut(i).iter_mut().for_each(|v| *v *= t);
    }
    Ok(WeightedDigraph {
        theta: theta.to_vec(),
        x,
        a,
    })
}

/// A Markov generator: non-negative off-diagonal entries, zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    q: Matrix,
}

impl GeneratorMatrix {
    /// Validates an explicit generator.
    pub fn new(q: Matrix) -> Result<Self> {
        let scale = q
            .rows()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0_f64, f64::max);
        for (i, row) in q.rows().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j && !(*v >= 0.0) {
                    return Err(Error::NotMarkov {
                        kind: "generator",
                        reason: format!("negative off-diagonal entry at ({i}, {j})"),
                    });
                }
            }
            let s = kahan_sum(row.iter().copied());
            if s.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::NotMarkov {
                    kind: "generator",
                    reason: format!("row {i} sums to {s:e}"),
                });
            }
        }
        Ok(GeneratorMatrix { q })
    }

    pub fn n(&self) -> usize {
        self.q.n()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    /// `q_i = |Q_ii|`.
    pub fn exit_rates(&self) -> Vec<f64> {
        self.q.diagonal().into_iter().map(|d| -d).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelVariant {
    /// `P = D⁻¹A`, self-loops kept.
    WithLoops,
    /// `Q̂ = D̂⁻¹Â`, zero diagonal.
    Jump,
}

/// A row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    k: Matrix,
    variant: KernelVariant,
}

impl KernelMatrix {
    pub fn new(k: Matrix, variant: KernelVariant) -> Result<Self> {
        for (i, row) in k.rows().enumerate() {
            if let Some(j) = row.iter().position(|v| !(*v >= 0.0 && *v <= 1.0)) {
                return Err(Error::NotMarkov {
                    kind: "kernel",
                    reason: format!("entry ({i}, {j}) outside [0, 1]"),
                });
            }
            let s = kahan_sum(row.iter().copied());
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::NotMarkov {
                    kind: "kernel",
                    reason: format!("row {i} sums to {s}"),
                });
            }
            if variant == KernelVariant::Jump && row[i] != 0.0 {
                return Err(Error::NotMarkov {
                    kind: "jump kernel",
                    reason: format!("nonzero diagonal at row {i}"),
                });
            }
        }
        Ok(KernelMatrix { k, variant })
    }

    pub fn n(&self) -> usize {
        self.k.n()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.k
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant
    }
}

/// `Q = A − diag(A1)`. The diagonal is set to minus the off-diagonal row
/// sum, which equals `A_ii − D_ii` exactly in real arithmetic.
pub fn build_generator(g: &WeightedDigraph) -> GeneratorMatrix {
    let q_rates = exit_rates(g);
    let mut q = g.adjacency().clone();
    for (i, qi) in q_rates.iter().enumerate() {
        q[(i, i)] = -qi;
    }
    GeneratorMatrix { q }
}

fn normalize_rows(a: &Matrix, zero_row: impl Fn(usize) -> Error) -> Result<Matrix> {
    let mut k = a.clone();
    for i in 0..a.n() {
        let row = k.row_mut(i);
        let s = kahan_sum(row.iter().copied());
        if !(s > 0.0) || !s.is_finite() {
            return Err(zero_row(i));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(k)
}

/// `P = D⁻¹A`.
pub fn build_kernel(g: &WeightedDigraph) -> Result<KernelMatrix> {
    let k = normalize_rows(g.adjacency(), |row| Error::IsolatedRow { row })?;
    Ok(KernelMatrix {
        k,
        variant: KernelVariant::WithLoops,
    })
}

/// `Q̂ = D̂⁻¹Â`.
pub fn build_jump_kernel(g: &WeightedDigraph) -> Result<KernelMatrix> {
    let hat = g.without_loops();
    let k = normalize_rows(hat.adjacency(), |row| Error::IsolatedJumpRow { row })?;
    Ok(KernelMatrix {
        k,
        variant: KernelVariant::Jump,
    })
}

/// `q_i = Σ_{j≠i} A_ij`, compensated.
pub fn exit_rates(g: &WeightedDigraph) -> Vec<f64> {
    g.adjacency()
        .rows()
        .enumerate()
        .map(|(i, r)| {
            kahan_sum(
                r.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| *v),
            )
        })
        .collect()
}

/// A distribution on `{0, …, n−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(Error::NotProbability(format!(
                "entry {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        let s = kahan_sum(values.iter().copied());
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::NotProbability(format!("sums to {s}")));
        }
        Ok(ProbabilityVector(values))
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NotProbability(format!(
                "weight {i} = {} is negative or not finite",
                weights[i]
            )));
        }
        let s = kahan_sum(weights.iter().copied());
        if !(s > 0.0) {
            return Err(Error::NotProbability("weights sum to zero".into()));
        }
        Ok(ProbabilityVector(weights.into_iter().map(|w| w / s).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        ProbabilityVector(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `ν_x(i) ∝ 1/x_i`.
pub fn reciprocal_distribution(x: &[f64]) -> Result<ProbabilityVector> {
    if let Some((index, &value)) = x
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v > 0.0))
    {
        return Err(Error::NonPositive { index, value });
    }
    ProbabilityVector::from_weights(x.iter().map(|v| 1.0 / v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitivity {
    Primitive,
    Reducible,
    /// Irreducible with the given period (> 1).
    Periodic(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimitivityReport {
    /// Support of `A`.
    pub adjacency: Primitivity,
    /// Support of `Â`.
    pub without_loops: Primitivity,
}

impl PrimitivityReport {
    pub fn both_primitive(&self) -> bool {
        self.adjacency == Primitivity::Primitive && self.without_loops == Primitivity::Primitive
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Classifies the support digraph of a non-negative matrix.
pub fn classify_support(m: &Matrix) -> Primitivity {
    let n = m.n();
    if n == 0 {
        return Primitivity::Reducible;
    }
    let reach = |forward: bool| -> Vec<Option<usize>> {
        let mut level = vec![None; n];
        level[0] = Some(0);
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            let lu = level[u].unwrap_or(0);
            for v in 0..n {
                let w = if forward { m[(u, v)] } else { m[(v, u)] };
                if w > 0.0 && level[v].is_none() {
                    level[v] = Some(lu + 1);
                    queue.push_back(v);
                }
            }
        }
        level
    };
    let fwd = reach(true);
    if fwd.iter().any(Option::is_none) || reach(false).iter().any(Option::is_none) {
        return Primitivity::Reducible;
    }
    // For an irreducible digraph, the period is the gcd of
    // level(u) + 1 − level(v) over all edges u → v.
    let mut period = 0;
    for u in 0..n {
        for v in 0..n {
            if m[(u, v)] > 0.0 {
                let (lu, lv) = (fwd[u].unwrap_or(0), fwd[v].unwrap_or(0));
                period = gcd(period, (lu + 1).abs_diff(lv));
                if period == 1 {
                    return Primitivity::Primitive;
                }
            }
        }
    }
    if period == 1 {
        Primitivity::Primitive
    } else {
        Primitivity::Periodic(period)
    }
}

pub fn check_primitive(g: &WeightedDigraph) -> PrimitivityReport {
    PrimitivityReport {
        adjacency: classify_support(g.adjacency()),
        without_loops: classify_support(g.without_loops().adjacency()),
    }
}
