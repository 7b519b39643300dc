//! Discrete-event simulation of layered de-jitter buffering in wireless sensor networks.

pub mod cli;
pub mod dejitter;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod topology;
pub mod traffic;
