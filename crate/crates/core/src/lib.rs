//! Auto-bidding market simulator with click-based payment mechanisms.

pub mod agents;
pub mod analysis;
pub mod controllers;
pub mod experiment;
pub mod market;
pub mod mechanisms;
pub mod ppo;
pub mod rng;
