pub mod agents;
pub mod config;
pub mod domain;
pub mod deploy;
pub mod envsim;
pub mod policy;
pub mod rewards;
pub mod textmetrics;
pub mod grpo;
pub mod eval;
pub mod train;
