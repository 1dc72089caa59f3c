//! Multi-period microgrid dispatch and reserve scheduling under uncertainty.

pub mod conic;
pub mod dispatch;
pub mod dro;
pub mod events;
pub mod netmodel;
pub mod powerflow;
pub mod robust;
pub mod simharness;
pub mod stochastic;
