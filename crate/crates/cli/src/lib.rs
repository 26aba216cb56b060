//! Scenario runner, demos and benchmark harness for the verifiable ledger.

pub mod bench;
pub mod demo;
pub mod scenario;
pub mod stack;
