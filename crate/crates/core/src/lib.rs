pub mod cli;
pub mod data;
pub mod design;
pub mod inference;
pub mod lmm;
pub mod simulation;
pub mod tps;
