//! Compilation of a velocity field into explicit neural-ODE parameters.

pub mod assemble;
pub mod compile;
pub mod flow;
pub mod hermite;
pub mod mollify;
pub mod nai;
pub mod ridge;
