pub mod corpus;
pub mod delta_target;
pub mod engine;
pub mod cli;
pub mod error;
pub mod lm;
pub mod losses;
pub mod numerics;
pub mod rouge;
pub mod wire;
