//! Simulation and numerical analysis for speed-N² large deviations of TASEP and
//! the corner growth model.

pub mod doob;
pub mod entropy;
pub mod hopflax;
pub mod lattice;
pub mod ratefn;
pub mod sim;
pub mod speed;
pub mod speedbuild;
