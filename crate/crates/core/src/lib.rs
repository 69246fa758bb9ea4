//! Forward model and coefficient reconstruction for a kinetic velocity-jump
//! (run-and-tumble) transport equation.

pub mod error;
pub mod fields;
pub mod geometry;
pub mod measurement;
pub mod particles;
pub mod probe;
pub mod quadrature;
pub mod reconstruction;
pub mod rng;
pub mod solver;
pub mod vec3;

pub use error::{Error, Result};
pub use vec3::Vec3;
