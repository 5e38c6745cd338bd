//! Harmonization toolkit for regional census tables.
//!
//! Tables are sparse maps from census keys to counts. The modules cover
//! region hierarchies, disaggregation, iterative proportional fitting,
//! rates and life tables, parametric forecast fitting, demographic balance,
//! a microsimulation and its validation, plus a synthetic data generator
//! used for end-to-end checks.

pub mod balance;
pub mod census;
pub mod config;
pub mod disagg;
pub mod error;
pub mod fit;
pub mod io;
pub mod ipf;
pub mod lifetable;
pub mod pipeline;
pub mod rates;
pub mod region;
pub mod simulate;
pub mod synth;
pub mod validate;

pub use census::{AgeClass, CensusKey, CensusTable, Dim, RegionId, ResolutionSpec, Sex, ValueKind};
pub use error::{Error, Result};
pub use region::{RegionHierarchy, RegionLevel};
