//! Prosody-boundary graph embeddings for text-to-speech front-ends.
//!
//! Pipeline: annotated text → [`prosody::ProsodyTree`] → [`graph::ProsodyGraph`]
//! → graph encoder ([`gnn`]) → attentional mel decoder ([`g2s`]).

pub mod cli;
pub mod fixtures;
pub mod g2s;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod prosody;
pub mod tensor;
