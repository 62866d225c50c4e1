//! End-to-end simulation: scenarios, the scheduler, fault injection,
//! reports and sweeps.

pub mod faultgen;
pub mod report;
pub mod scenario;
pub mod suite;
pub mod sweep;
pub mod world;

pub use report::{DepositOutcome, RunReport, SwapOutcome};
pub use scenario::{Scenario, ScenarioError};
pub use sweep::{sweep, Axis, SweepResult};
pub use world::{run, RunError, World};
