//! Measure transport: tensor-train densities, triangular maps and their compositions.

pub mod basis;
pub mod density;
pub mod tt;

pub use basis::{Basis1D, BasisSpec};
pub use density::SquaredTtDensity;
pub use tt::{tt_cross_build, CrossReport, CrossSettings, FunctionalTt};
pub mod maps;

pub use maps::{FixedDataMap, KrMap, Map, TransportMap};
pub mod conditional;
pub mod deep;

pub use conditional::{build_conditional_stage, ConditionalMap, ConditionalReport, DataStandardization};
pub use deep::{build_deep, DeepMap, TransportSettings};
