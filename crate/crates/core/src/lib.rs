//! Deterministic simulator for decentralized federated learning with partial
//! message exchange (PaME), with a dense-gossip D-PSGD baseline.

pub mod analysis;
pub mod codec;
pub mod engine;
pub mod linalg;
pub mod losses;
pub mod pme;
pub mod rng;
pub mod topology;
