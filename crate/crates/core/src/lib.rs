pub mod cli;
pub mod diffcore;
pub mod env;
pub mod nets;
pub mod replay;
pub mod trainer;
pub mod rng;
pub mod roster;
