//! Geofence enforcement for a single-track vehicle: signed-distance barriers,
//! physics-structured learned dynamics, a preview discrete CBF safety filter
//! and an offline evaluation harness.

pub mod dynamics;
pub mod geometry;
pub mod integrate;
pub mod models;
pub mod qp;
pub mod safety;
pub mod training;
pub mod harness;
pub mod config;
pub mod io;
pub mod pipeline;
