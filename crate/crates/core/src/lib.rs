//! Desk-scale laboratory for latent chain-of-thought reasoning.
//!
//! The pipeline: ingest or generate arithmetic reasoning chains
//! ([`corpus`]), tokenize and segment them ([`chain`]), turn each step
//! into a rule-based prior distribution over the vocabulary ([`prior`]),
//! train a small recurrent reasoner to emit soft tokens aligned with
//! those priors ([`reasoner`], [`objective`], [`train`]), and compute
//! latent-dynamics statistics over inference traces ([`analytics`]).

pub mod analytics;
pub mod chain;
pub mod corpus;
pub mod error;
pub mod math;
pub mod objective;
pub mod prior;
pub mod reasoner;
pub mod train;

pub use error::{Error, Result};
