pub mod adversary;
pub mod cli;
pub mod metrics;
pub mod scenegen;
pub mod sam;
pub mod segnet;
pub mod nn;
pub mod resample;
pub mod trainer;
pub mod types;
