//! Stationary distributions by damped power iteration, a direct dense
//! solve, and the Markov chain tree theorem (cofactor and explicit
//! arborescence enumeration).

use std::fmt;

use crate::builders::{
    classify_support, GeneratorMatrix, KernelMatrix, KernelVariant, Primitivity, ProbabilityVector,
};
use crate::error::{Error, Result};
use crate::matrix::{Lu, Matrix};

pub const DEFAULT_TOL: f64 = 1e-13;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
pub const MAX_COFACTOR_N: usize = 64;
pub const MAX_ENUMERATION_N: usize = 6;

/// Common view of generators and kernels through their Laplacian form
/// `L`, for which `πL = 0` characterizes the invariant distribution.
pub trait MarkovMatrix {
    fn matrix(&self) -> &Matrix;

    /// `−Q` for a generator, `I − K` for a kernel.
    fn laplacian(&self) -> Matrix;

    fn kind(&self) -> &'static str;
}

impl MarkovMatrix for GeneratorMatrix {
    fn matrix(&self) -> &Matrix {
        GeneratorMatrix::matrix(self)
    }

    fn laplacian(&self) -> Matrix {
        let q = GeneratorMatrix::matrix(self);
        let data = q.as_slice().iter().map(|v| -v).collect();
        Matrix::from_vec(q.n(), data).expect("square")
    }

    fn kind(&self) -> &'static str {
        "generator"
    }
}

impl MarkovMatrix for KernelMatrix {
    fn matrix(&self) -> &Matrix {
        KernelMatrix::matrix(self)
    }

    fn laplacian(&self) -> Matrix {
        let k = KernelMatrix::matrix(self);
        let mut l = Matrix::identity(k.n());
        for (i, row) in k.rows().enumerate() {
            for (j, v) in row.iter().enumerate() {
                l[(i, j)] -= v;
            }
        }
        l
    }

    fn kind(&self) -> &'static str {
        "kernel"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Power,
    ViaJump,
    Direct,
    TreeCofactor,
    TreeEnumeration,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Power => "power",
            Method::ViaJump => "via_jump",
            Method::Direct => "direct",
            Method::TreeCofactor => "tree_cofactor",
            Method::TreeEnumeration => "tree_enumeration",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub pi: ProbabilityVector,
    pub method: Method,
    /// Power-iteration steps; zero for non-iterative methods.
    pub iterations: usize,
    /// `‖πL‖₁`, i.e. `‖πK − π‖₁` or `‖πQ‖₁`.
    pub residual: f64,
}

/// `‖πL‖₁` computed from the original matrix.
pub fn residual<M: MarkovMatrix + ?Sized>(m: &M, pi: &[f64]) -> f64 {
    let l = m.laplacian();
    l.left_mul(pi).iter().map(|v| v.abs()).sum()
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Iterates `π ← π(I + K)/2` from the uniform distribution until the ℓ¹
/// change between iterates is at most `tol`.
pub fn stationary_kernel_power(k: &KernelMatrix, tol: f64, max_iter: usize) -> Result<SolveReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    let km = k.matrix();
    if classify_support(km) == Primitivity::Reducible {
        return Err(Error::Reducible);
    }
    let n = km.n();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        km.left_mul_into(&pi, &mut next);
        let mut total = 0.0;
        for (x, p) in next.iter_mut().zip(&pi) {
            *x = 0.5 * (*x + p);
            total += *x;
        }
        next.iter_mut().for_each(|x| *x /= total);
        change = l1_diff(&next, &pi);
        std::mem::swap(&mut pi, &mut next);
        if change <= tol {
            let residual = residual(k, &pi);
            return Ok(SolveReport {
                pi: ProbabilityVector::from_weights(pi)?,
                method: Method::Power,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change: change,
    })
}

/// `π_Q(i) ∝ π_Q̂(i)/q_i`.
pub fn pi_from_jump(pi_jump: &ProbabilityVector, exit_rates: &[f64]) -> Result<ProbabilityVector> {
    if pi_jump.len() != exit_rates.len() {
        return Err(Error::DimensionMismatch {
            expected: pi_jump.len(),
            actual: exit_rates.len(),
        });
    }
    if let Some((index, &value)) = exit_rates.iter().enumerate().find(|(_, q)| !(**q > 0.0)) {
        return Err(Error::NonPositive { index, value });
    }
    ProbabilityVector::from_weights(
        pi_jump
            .as_slice()
            .iter()
            .zip(exit_rates)
            .map(|(p, q)| p / q)
            .collect(),
    )
}

/// `Q̂_ij = Q_ij / q_i` for `j ≠ i`.
pub fn jump_kernel_of(q: &GeneratorMatrix) -> Result<KernelMatrix> {
    let rates = q.exit_rates();
    let n = q.n();
    let mut k = Matrix::zeros(n);
    for (i, qi) in rates.iter().enumerate() {
        if !(*qi > 0.0) {
            return Err(Error::IsolatedJumpRow { row: i });
        }
        let src = q.matrix().row(i);
        let dst = k.row_mut(i);
        for j in 0..n {
            if j != i {
                dst[j] = src[j] / qi;
            }
        }
    }
    KernelMatrix::new(k, KernelVariant::Jump)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorMethod {
    ViaJump,
    Direct,
}

/// Invariant distribution of a generator, either through its jump chain or
/// by a direct solve of `πQ = 0`.
pub fn stationary_generator(q: &GeneratorMatrix, method: GeneratorMethod) -> Result<SolveReport> {
    match method {
        GeneratorMethod::Direct => {
            if let Some((row, _)) = q.exit_rates().iter().enumerate().find(|(_, r)| !(**r > 0.0)) {
                return Err(Error::IsolatedJumpRow { row });
            }
            stationary_direct(q)
        }
        GeneratorMethod::ViaJump => {
            let jump = jump_kernel_of(q)?;
            let report = stationary_kernel_power(&jump, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            let pi = pi_from_jump(&report.pi, &q.exit_rates())?;
            let residual = residual(q, pi.as_slice());
            Ok(SolveReport {
                pi,
                method: Method::ViaJump,
                iterations: report.iterations,
                residual,
            })
        }
    }
}

/// Dense LU solve of `{πL = 0, Σπ = 1}`, with the last (redundant) equation
/// replaced by the normalization.
pub fn stationary_direct<M: MarkovMatrix + ?Sized>(m: &M) -> Result<SolveReport> {
    let l = m.laplacian();
    let n = l.n();
    if n == 0 {
        return Err(Error::TooSmall(0));
    }
    let scale = l.max_abs().max(f64::MIN_POSITIVE);
    let mut sys = l.transpose();
    sys.row_mut(n - 1).iter_mut().for_each(|v| *v = scale);
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = scale;
    let lu = Lu::factor(sys);
    if lu.is_singular(n as f64 * f64::EPSILON) {
        return Err(Error::Singular {
            condition: lu.pivot_ratio(),
        });
    }
    let mut x = lu.solve(&rhs);
    let peak = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    for v in x.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 * peak {
                return Err(Error::Singular {
                    condition: lu.pivot_ratio(),
                });
            }
            *v = 0.0;
        }
    }
    let pi = ProbabilityVector::from_weights(x)?;
    let residual = residual(m, pi.as_slice());
    Ok(SolveReport {
        pi,
        method: Method::Direct,
        iterations: 0,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeMode {
    Cofactor,
    Enumeration,
}

/// Markov chain tree theorem: `π(i)` is proportional to the total weight of
/// spanning in-trees rooted at `i`.
pub fn stationary_tree_oracle<M: MarkovMatrix + ?Sized>(m: &M, mode: TreeMode) -> Result<SolveReport> {
    let n = m.matrix().n();
    let (max, label) = match mode {
        TreeMode::Cofactor => (MAX_COFACTOR_N, "cofactor mode"),
        TreeMode::Enumeration => (MAX_ENUMERATION_N, "enumeration mode"),
    };
    if n > max {
        return Err(Error::SizeOutOfRange { n, mode: label, max });
    }
    if n < 2 {
        return Err(Error::TooSmall(n));
    }
    let (pi, method) = match mode {
        TreeMode::Cofactor => (cofactor_weights(&m.laplacian())?, Method::TreeCofactor),
        TreeMode::Enumeration => (enumeration_weights(m.matrix())?, Method::TreeEnumeration),
    };
    let residual = residual(m, pi.as_slice());
    Ok(SolveReport {
        pi,
        method,
        iterations: 0,
        residual,
    })
}

fn minor(l: &Matrix, skip: usize) -> Matrix {
    let n = l.n();
    let mut data = Vec::with_capacity((n - 1) * (n - 1));
    for i in (0..n).filter(|&i| i != skip) {
        let row = l.row(i);
        data.extend((0..n).filter(|&j| j != skip).map(|j| row[j]));
    }
    Matrix::from_vec(n - 1, data).expect("square minor")
}

fn cofactor_weights(l: &Matrix) -> Result<ProbabilityVector> {
    let n = l.n();
    // Work in logs: minors of a size-64 generator can exceed f64 range.
    let logs: Vec<f64> = (0..n)
        .map(|i| {
            let (sign, log) = Lu::factor(minor(l, i)).log_det();
            if sign > 0.0 {
                log
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(Error::ZeroTreeWeight);
    }
    ProbabilityVector::from_weights(logs.iter().map(|l| (l - top).exp()).collect())
}

/// Sums `Π M[v][parent(v)]` over all in-trees rooted at each vertex.
fn enumeration_weights(m: &Matrix) -> Result<ProbabilityVector> {
    let n = m.n();
    let weights: Vec<f64> = (0..n).map(|root| in_tree_weight(m, root).0).collect();
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::ZeroTreeWeight);
    }
    ProbabilityVector::from_weights(weights)
}

/// Total weight and count of the in-trees rooted at `root` with every
/// factor nonzero.
pub fn in_tree_weight(m: &Matrix, root: usize) -> (f64, usize) {
    struct Walk<'a> {
        m: &'a Matrix,
        root: usize,
        parent: Vec<Option<usize>>,
        total: f64,
        count: usize,
    }

    impl Walk<'_> {
        // Following parents from `from` must never return to `v`.
        fn closes_cycle(&self, v: usize, from: usize) -> bool {
            let mut cur = from;
            loop {
                if cur == v {
                    return true;
                }
                if cur == self.root {
                    return false;
                }
                match self.parent[cur] {
                    Some(p) => cur = p,
                    None => return false,
                }
            }
        }

        fn assign(&mut self, v: usize, product: f64) {
            let n = self.m.n();
            if v == n {
                self.total += product;
                self.count += 1;
                return;
            }
            if v == self.root {
                self.assign(v + 1, product);
                return;
            }
            for p in 0..n {
                let w = if p == v { 0.0 } else { self.m[(v, p)] };
                if w == 0.0 || self.closes_cycle(v, p) {
                    continue;
                }
                self.parent[v] = Some(p);
                self.assign(v + 1, product * w);
                self.parent[v] = None;
            }
        }
    }

    let mut walk = Walk {
        m,
        root,
        parent: vec![None; m.n()],
        total: 0.0,
        count: 0,
    };
    walk.assign(0, 1.0);
    (walk.total, walk.count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::{build_adjacency, build_generator, build_jump_kernel, build_kernel};
    use crate::weights::{sample_edge_matrix, RngStream, WeightLaw};
    use approx::assert_abs_diff_eq;

    fn kernel(rows: &[&[f64]]) -> KernelMatrix {
        KernelMatrix::new(Matrix::from_rows(rows).unwrap(), KernelVariant::WithLoops).unwrap()
    }

    fn generator(rows: &[&[f64]]) -> GeneratorMatrix {
        GeneratorMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn close(a: &ProbabilityVector, b: &[f64], eps: f64) {
        for (x, y) in a.as_slice().iter().zip(b) {
            assert_abs_diff_eq!(*x, *y, epsilon = eps);
        }
    }

    #[test]
    fn power_two_state() {
        let k = kernel(&[&[0.7, 0.3], &[0.6, 0.4]]);
        let r = stationary_kernel_power(&k, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        close(&r.pi, &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
        assert!(r.residual <= 10.0 * DEFAULT_TOL);
    }

    #[test]
    fn power_handles_periodic_kernel() {
        let k = kernel(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let r = stationary_kernel_power(&k, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        close(&r.pi, &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn power_uniform_rows_take_one_step() {
        let k = kernel(&[&[0.25; 4], &[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let r = stationary_kernel_power(&k, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.iterations, 1);
        close(&r.pi, &[0.25; 4], 1e-16);
    }

    #[test]
    fn power_errors() {
        let k = kernel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(
            stationary_kernel_power(&k, DEFAULT_TOL, DEFAULT_MAX_ITER),
            Err(Error::Reducible)
        );
        let k = kernel(&[&[0.999, 0.001], &[0.002, 0.998]]);
        assert!(matches!(
            stationary_kernel_power(&k, DEFAULT_TOL, 3),
            Err(Error::NoConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn generator_two_state_both_routes() {
        let q = generator(&[&[-1.0, 1.0], &[2.0, -2.0]]);
        for m in [GeneratorMethod::ViaJump, GeneratorMethod::Direct] {
            let r = stationary_generator(&q, m).unwrap();
            close(&r.pi, &[2.0 / 3.0, 1.0 / 3.0], 1e-13);
        }
    }

    #[test]
    fn generator_symmetric_ones() {
        let g = crate::builders::WeightedDigraph::from_adjacency(Matrix::filled(3, 1.0)).unwrap();
        let q = build_generator(&g);
        let r = stationary_generator(&q, GeneratorMethod::ViaJump).unwrap();
        close(&r.pi, &[1.0 / 3.0; 3], 1e-14);
    }

    #[test]
    fn generator_zero_rate_is_error() {
        let q = generator(&[&[0.0, 0.0], &[1.0, -1.0]]);
        for m in [GeneratorMethod::ViaJump, GeneratorMethod::Direct] {
            assert_eq!(stationary_generator(&q, m), Err(Error::IsolatedJumpRow { row: 0 }));
        }
    }

    #[test]
    fn generator_routes_agree_on_random_draw() {
        let law = WeightLaw::exponential(1.0).unwrap();
        let s = RngStream::new(2024, "solver-unit", 0, 5);
        let x = sample_edge_matrix(&law, 5, &s).unwrap();
        let g = build_adjacency(&[1.0, 2.0, 0.5, 3.0, 1.5], x).unwrap();
        let q = build_generator(&g);
        let a = stationary_generator(&q, GeneratorMethod::ViaJump).unwrap();
        let b = stationary_generator(&q, GeneratorMethod::Direct).unwrap();
        close(&a.pi, b.pi.as_slice(), 1e-10);
        let tol_scale = DEFAULT_TOL * q.matrix().max_abs() * 5.0;
        assert!(a.residual <= tol_scale.max(1e-12), "{}", a.residual);
    }

    #[test]
    fn direct_examples() {
        let r = stationary_direct(&kernel(&[&[0.25, 0.75], &[0.5, 0.5]])).unwrap();
        close(&r.pi, &[0.4, 0.6], 1e-15);
        let r = stationary_direct(&generator(&[&[-1.0, 1.0], &[2.0, -2.0]])).unwrap();
        close(&r.pi, &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
        // doubly stochastic: a mixture of permutation matrices
        let k = kernel(&[
            &[0.1, 0.2, 0.3, 0.4],
            &[0.4, 0.1, 0.2, 0.3],
            &[0.3, 0.4, 0.1, 0.2],
            &[0.2, 0.3, 0.4, 0.1],
        ]);
        let r = stationary_direct(&k).unwrap();
        close(&r.pi, &[0.25; 4], 1e-15);
        assert!(r.residual < 1e-14);
    }

    #[test]
    fn direct_reports_singular_for_disconnected_chain() {
        let k = kernel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(stationary_direct(&k), Err(Error::Singular { .. })));
    }

    #[test]
    fn tree_examples() {
        let k = kernel(&[&[0.25, 0.75], &[0.5, 0.5]]);
        for mode in [TreeMode::Cofactor, TreeMode::Enumeration] {
            let r = stationary_tree_oracle(&k, mode).unwrap();
            close(&r.pi, &[0.4, 0.6], 1e-15);
        }
        let q = generator(&[&[-1.0, 1.0], &[2.0, -2.0]]);
        let minor0 = Lu::factor(minor(&q.laplacian(), 0)).log_det();
        let minor1 = Lu::factor(minor(&q.laplacian(), 1)).log_det();
        assert_abs_diff_eq!(minor0.1.exp(), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(minor1.1.exp(), 1.0, epsilon = 1e-14);
        let r = stationary_tree_oracle(&q, TreeMode::Cofactor).unwrap();
        close(&r.pi, &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn tree_size_limits() {
        let big = crate::builders::WeightedDigraph::from_adjacency(Matrix::filled(7, 1.0)).unwrap();
        let p = build_kernel(&big).unwrap();
        assert!(matches!(
            stationary_tree_oracle(&p, TreeMode::Enumeration),
            Err(Error::SizeOutOfRange { n: 7, max: 6, .. })
        ));
        let huge = crate::builders::WeightedDigraph::from_adjacency(Matrix::filled(65, 1.0)).unwrap();
        let p = build_kernel(&huge).unwrap();
        assert!(matches!(
            stationary_tree_oracle(&p, TreeMode::Cofactor),
            Err(Error::SizeOutOfRange { n: 65, .. })
        ));
    }

    #[test]
    fn tree_zero_weight() {
        let k = kernel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        for mode in [TreeMode::Cofactor, TreeMode::Enumeration] {
            assert_eq!(stationary_tree_oracle(&k, mode), Err(Error::ZeroTreeWeight));
        }
    }

    #[test]
    fn arborescence_counts_follow_cayley() {
        // complete digraph: n^(n-2) in-trees per root
        for n in 2..=6 {
            let m = Matrix::filled(n, 1.0);
            for root in 0..n {
                let (w, c) = in_tree_weight(&m, root);
                assert_eq!(c, n.pow(n as u32 - 2));
                assert_eq!(w, c as f64);
            }
        }
    }

    #[test]
    fn random_four_state_triple_check() {
        let law = WeightLaw::exponential(1.0).unwrap();
        for seed in 0..10 {
            let s = RngStream::new(seed, "triple", seed, 4);
            let g = build_adjacency(&[1.0; 4], sample_edge_matrix(&law, 4, &s).unwrap()).unwrap();
            for k in [build_kernel(&g).unwrap(), build_jump_kernel(&g).unwrap()] {
                let e = stationary_tree_oracle(&k, TreeMode::Enumeration).unwrap();
                let c = stationary_tree_oracle(&k, TreeMode::Cofactor).unwrap();
                let d = stationary_direct(&k).unwrap();
                close(&e.pi, c.pi.as_slice(), 1e-12);
                close(&e.pi, d.pi.as_slice(), 1e-10);
            }
        }
    }

    #[test]
    fn cofactor_survives_large_generators() {
        let law = WeightLaw::exponential(0.01).unwrap();
        let s = RngStream::new(1, "big-cofactor", 0, 64);
        let g = build_adjacency(&[1.0; 64], sample_edge_matrix(&law, 64, &s).unwrap()).unwrap();
        let q = build_generator(&g);
        let c = stationary_tree_oracle(&q, TreeMode::Cofactor).unwrap();
        let d = stationary_direct(&q).unwrap();
        close(&c.pi, d.pi.as_slice(), 1e-12);
    }
}
