//! Random Markov generators and kernels built from randomly weighted
//! complete digraphs, their invariant distributions, and Monte Carlo
//! experiments on how those distributions behave as the graph grows.
//!
//! The adjacency matrix is `A[i][j] = θ_i X[i][j]` with vertex weights `θ`
//! and i.i.d. edge weights `X`. From it we build the generator
//! `Q = A − diag(A1)`, the kernel `P = D⁻¹A` and the jump kernel
//! `Q̂ = D̂⁻¹Â` (`Â` is `A` without its diagonal).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builders;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod matrix;
pub mod metrics;
pub mod solvers;
pub mod weights;

pub use builders::{
    build_adjacency, build_generator, build_jump_kernel, build_kernel, check_primitive, exit_rates,
    reciprocal_distribution, GeneratorMatrix, KernelMatrix, KernelVariant, Primitivity,
    PrimitivityReport, ProbabilityVector, WeightedDigraph,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use solvers::{
    stationary_direct, stationary_generator, stationary_kernel_power, stationary_tree_oracle,
    GeneratorMethod, MarkovMatrix, Method, SolveReport, TreeMode,
};
pub use weights::{
    law_moments, sample_edge_matrix, sample_vertex_weights, Moments, RngStream, VertexWeightSpec,
    WeightLaw,
};
