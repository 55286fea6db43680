//! Offline POMDP planning with alpha-vector value functions.
//!
//! The toolkit solves partially observable Markov decision processes two
//! ways: exactly, with tabular alpha-vectors over an explicit model, and
//! approximately, with finite-network controllers whose nodes carry small
//! regression networks standing in for alpha-vectors. The approximate path
//! plans over particle beliefs collected by bound-guided tree search and
//! improves the controller with sampled Bellman backups.

pub mod controller;
pub mod domains;
pub mod nn;
pub mod exact;
pub mod policy_io;
pub mod generative;
pub mod model;
pub mod particle;
pub mod rng;
pub mod solver;
