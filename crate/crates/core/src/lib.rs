pub mod cli;
pub mod dp;
pub mod encoding;
pub mod metrics;
pub mod mps;
pub mod tensor;
