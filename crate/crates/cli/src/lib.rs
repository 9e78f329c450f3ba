//! Training, evaluation and ablation driver.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod run;
pub mod session;
