//! Distributed subgradient optimization over simulated agent networks where
//! agents exchange randomly quantized states.
//!
//! Each agent holds a local convex loss; agents sit on a random geometric
//! graph, mix quantized neighbor states through a lazy Metropolis matrix and
//! take projected subgradient steps. Weighted time averages of the iterates
//! converge to a minimizer of the summed loss.
//!
//! ```
//! use gdsrq::experiment::{run_experiment, ExperimentConfig};
//!
//! let mut cfg = ExperimentConfig::reference_experiment(4, 7);
//! cfg.n_agents = 8;
//! cfg.radius = 0.6;
//! cfg.iterations = 200;
//! let outcome = run_experiment(&cfg, false).unwrap();
//! assert_eq!(outcome.trajectory.records.len(), 21);
//! ```

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod gdsrq;
pub mod network;
pub mod objectives;
pub mod quantization;
pub mod rng;

pub use analysis::{
    consensus_error, fit_empirical_rate, optimal_lambda_alpha, optimality_gap, predicted_rate,
    product_check, reference_optimum, weight_condition_check, ReferenceSolution, RunTrajectory,
    TrajectoryRecord,
};
pub use error::{Error, Result};
pub use gdsrq::{
    gdsrq_step, run, stepsize_alpha, stepsize_beta, update_time_average, validate_schedule,
    AgentState, RunConfig, Schedule, ValidationReport,
};
pub use network::{
    generate_geometric_graph, lazy_metropolis, second_largest_eigenvalue, verify_doubly_stochastic,
    Graph, MixingMatrix,
};
pub use objectives::{
    generate_synthetic_dataset, linear_regression_objective, project_box, BoxSet, Convexity,
    Dataset, Objective,
};
pub use quantization::{quantize_scalar, quantize_vector, Quantize, QuantizerConfig};
