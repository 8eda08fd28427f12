//! Digital twin of a piezo-actuated fibre-bundle scanning endomicroscope.
//!
//! The crate models the full imaging chain: cantilever actuation kinematics,
//! constant-velocity scan trajectory planning, synthetic tissue phantoms with
//! stage disturbance and tissue drag, fibre-bundle image formation, real-time
//! NCC mosaicking, PI image-based visual servoing, and laser ablation
//! targeting. Everything is deterministic for a given seed.

pub mod ablation;
pub mod endoscope;
pub mod harness;
pub mod kinematics;
pub mod mosaic;
pub mod phantom;
pub mod raster;
pub mod servo;
pub mod trajectory;
