//! Patient stratification evaluation: clinical event handling, feature
//! construction, clustering and consensus, survival and enrichment
//! statistics, surrogate trees, outcome screening and curation.

pub mod cluster;
pub mod curation;
pub mod ehr;
pub mod enrichment;
pub mod featurize;
pub mod metacluster;
pub mod screening;
pub mod seed;
pub mod stats;
pub mod surrogate;
pub mod survival;
pub mod synthgen;
