//! Numerical substrate: dense matrices, seeded randomness, reverse-mode
//! gradients with a finite-difference oracle, and the AdamW update rule.

pub mod adamw;
pub mod matrix;
pub mod rng;
pub mod tape;

pub use adamw::{adamw_step, AdamWState, ParamStore};
pub use matrix::Matrix;
pub use rng::SeededRng;
pub use tape::{grad_check, Tape, Var};
