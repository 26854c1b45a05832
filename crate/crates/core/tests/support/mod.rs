//! Check suites shared by the focused test targets and the acceptance
//! runner. Every check panics on failure.

#![allow(dead_code)]

pub mod counts;
pub mod desk;
pub mod grad;
pub mod lattice;
pub mod modularity;
pub mod streaming;
pub mod sweeps;
