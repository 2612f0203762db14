//! Hierarchical negative-binomial abundance modelling for reef monitoring.
//!
//! The crate covers the full pipeline: aggregating deployment counts
//! ([`data`]), the multilevel model and its gradient ([`model`]), a NUTS
//! sampler ([`sampler`]), convergence and fit diagnostics ([`diagnostics`]),
//! baseline-relative health indicators ([`indicators`]) and the
//! monitoring-design power simulation ([`powersim`]).

pub mod data;
pub mod diagnostics;
pub mod draws;
mod error;
pub mod indicators;
pub mod model;
pub mod powersim;
pub mod sampler;
pub mod svg;
pub mod synthetic;

pub use data::{aggregate, parse_deployments, ColumnMap, DeploymentRecord, IndicatorList, ObservationTable};
pub use draws::PosteriorDraws;
pub use error::{Error, Result};
pub use indicators::{CategoryScheme, FoldChangePosterior, StatusReport};
pub use model::{BeforeAfterExtension, Likelihood, ModelParameters, PriorConfig};
pub use powersim::{PowerResult, ScenarioGrid};
pub use sampler::{fit_model, sample, SamplerConfig};
