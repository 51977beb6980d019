//! End-of-conversation rating prediction for conversational task assistants.
//!
//! The pipeline reads interaction logs ([`corpus`]), computes a behavioral
//! feature vector at the final turn ([`features`]), serializes the dialog flow
//! into a token sequence ([`serialize`]) and trains one of three model
//! families ([`models`]): linear classifiers on behavior only, a transformer
//! encoder on the flow only, or a fusion of both streams. [`synth`] generates
//! corpora with a planted rating mechanism so every stage can be checked
//! end to end.

pub mod corpus;
pub mod dialog;
pub mod features;
pub mod par;
pub mod models;
pub mod numeric;
pub mod serialize;
pub mod synth;
pub mod train;
