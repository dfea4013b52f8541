//! Data-free alignment of sparse-autoencoder features across the
//! layers of a network.
//!
//! Features learned by per-layer SAEs are matched by minimizing the
//! squared distance between their *folded* parameters: the JumpReLU
//! thresholds are absorbed into the encoder and decoder weights, which
//! leaves the reconstruction unchanged but moves per-feature scales
//! into the weights where a linear-assignment solver can see them. On
//! top of the matcher sit permutation composition across layer chains,
//! co-activation and explained-variance metrics, encode-permute-decode
//! layer skipping, and seeded synthetic generators that provide planted
//! ground truth for all of it.
//!
//! ```
//! use saematch_core::{gen_planted_pair, match_layers, MatchOptions, SynthSpec};
//!
//! let spec = SynthSpec { d: 16, f: 64, seed: 7, ..SynthSpec::default() };
//! let (a, b, truth) = gen_planted_pair(&spec).unwrap();
//! let result = match_layers(&a, &b, &MatchOptions::default()).unwrap();
//! assert_eq!(result.permutation.map, truth.map);
//! assert_eq!(result.total_cost, 0.0);
//! ```

pub mod assignment;
pub mod error;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod pruning;
pub mod sae;
pub mod synth;

pub use assignment::{
    build_cost_matrix, cost_of_permutation, solve_lap, solve_lap_exact, CostMatrix, CostOptions,
    CostPrecision, GroupWeights, Permutation, Provenance, WeightSet,
};
pub use error::{Error, FormatError, Result};
pub use matching::{
    agreement, compose, config_fingerprint, match_chain, match_layers, quantile_split,
    MatchOptions, MatchResult, PermutationChain,
};
pub use metrics::{
    delta_cross_entropy, explained_variance, matching_score, recovery_accuracy,
    ExplainedVariance, MatchingScore, ScoreMode,
};
pub use pruning::{
    encode_permute_decode, quantile_decode, quantile_decode_with_bias, BiasChoice,
};
pub use sae::{
    decode, decode_batch, encode, encode_batch, fold_params, jump_relu, l0_stats, reconstruct,
    reconstruct_batch, ActivationBatch, BatchKind, L0Stats, SaeParams,
};
pub use synth::{
    gen_activations, gen_chain, gen_norm_growth_pair, gen_pair_activations, gen_planted_pair,
    gen_sae, PairActivations, SynthChain, SynthSpec, PRNG_ALGORITHM,
};
