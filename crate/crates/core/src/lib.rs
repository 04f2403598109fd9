pub mod data;
pub mod engine;
pub mod experiment;
pub mod lagrangian;
pub mod metrics;
pub mod models;
pub mod simulator;
pub mod uncertainty;
