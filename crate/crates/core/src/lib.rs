pub mod acceptance;
pub mod data;
pub mod engine;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rubric;
pub mod stochastic;
