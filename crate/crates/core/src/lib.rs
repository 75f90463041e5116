//! Hierarchical imitation learning for options-type policies.
//!
//! An options policy is the triplet of a high-level policy choosing an option,
//! a low-level policy choosing actions under the active option, and a
//! termination policy deciding when the active option ends. Given expert
//! state-action demonstrations, the options and terminations are latent; this
//! crate fits the three policies by expectation-maximization in two flavours:
//!
//! * [`batch_em`] runs forward-backward smoothing over whole trajectories
//!   and re-fits after every pass.
//! * [`online_em`] maintains a recursive sufficient statistic that is updated
//!   once per new state-action pair and re-fits as data streams in.
//!
//! Supporting modules provide the graphical model itself ([`opgm`]), tabular
//! and MLP parameterizations ([`policies`]), option regularizers
//! ([`regularizers`]), discrete environments and experts ([`envs`]), the
//! evaluation protocol ([`eval`]), file formats ([`persist`]) and brute-force
//! enumeration oracles ([`oracle`]).

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch_em;
pub mod envs;
pub mod error;
pub mod eval;
pub mod logspace;
pub mod online_em;
pub mod opgm;
pub mod oracle;
pub mod persist;
pub mod policies;
pub mod regularizers;

pub use error::{HilError, Result};
pub use opgm::{ActionId, LatentStep, ModelDims, OptionId, StateId, StateTable, Step, Trajectory};
pub use policies::{HierarchicalPolicy, MlpSpec, ParamKind, PolicyParams, PolicyTables};
