#![allow(dead_code)]

pub use blackstart_pdip::{KktState, OptProblem, Triplets, Variable};

#[path = "../../src/testing.rs"]
mod testing;

pub use testing::Qp;
