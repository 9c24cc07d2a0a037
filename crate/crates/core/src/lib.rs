//! Decoupled stochastic motion planning for car-like robots.

pub mod controllers;
pub mod costs;
pub mod dynamics;
pub mod feedback;
pub mod scenario;
pub mod simulation;
pub mod trajopt;
