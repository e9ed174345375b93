//! Deterministic simulator for the Aegis protocol: schedules, a partially
//! synchronous network, Byzantine behaviors, traces and property checkers.

pub mod byzantine;
pub mod checks;
pub mod network;
pub mod runner;
pub mod scenarios;
pub mod schedule;
pub mod single;
pub mod trace;

pub use checks::{check, Outcome, Property, Verdict};
pub use runner::{run, Sim};
pub use schedule::{Schedule, ScheduleError};
pub use trace::{Event, Trace};
