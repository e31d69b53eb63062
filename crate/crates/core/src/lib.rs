//! Reinforcement-learning search over anchor-free detection decoders.
//!
//! The crate covers the whole loop at desk scale: the token grammar of
//! decoder configurations ([`search_space`]), their compilation into
//! executable graphs ([`decoder_graph`]), a synthetic detection task
//! ([`toyland`]), analytic cost accounting ([`cost`]), an LSTM/PPO
//! controller ([`controller`]), the progressive two-stage search
//! ([`orchestrator`]) and a TCP job farm ([`dispatcher`]).

pub mod controller;
pub mod cost;
pub mod decoder_graph;
pub mod dispatcher;
mod error;
pub mod orchestrator;
pub mod search_space;
pub mod seed;
pub mod toyland;

pub use error::{Error, Result};
