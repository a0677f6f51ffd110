//! Decode-time hallucination suppression with a pair of contrastively
//! aligned proxy models.
//!
//! A small factual-alignment proxy (FAP) and a frozen hallucination proxy
//! (HDP) are trained against a base model; at inference their logit
//! difference is projected onto a larger target model's vocabulary and added
//! to the target's logits at every decoding step.

pub mod align_train;
pub mod dataaug;
pub mod evalkit;
pub mod micro_lm;
pub mod parallel;
pub mod providers;
pub mod retry;
pub mod steer;
pub mod synth;
pub mod vocab;
