#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod causal;
pub mod corpus;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod ood;
pub mod synth;
pub mod text;
pub mod train;
