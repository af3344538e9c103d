//! A desk-scale laboratory for cooperative dialogue navigation.
//!
//! Two learned agents play a turn-taking game in synthetic graph worlds: a
//! question-asking navigator walks toward a goal room while an oracle guide,
//! shown the next few shortest-path steps, answers in a small templated
//! language. Everything is built from scratch: the worlds, the tokenizer,
//! a reverse-mode autodiff engine with LSTM/attention blocks, actor-critic
//! training, and the recursive mental-model search that picks
//! question-answer pairs by simulated rollouts.

pub mod agents;
pub mod config;
pub mod eval;
pub mod gameplay;
pub mod lang;
pub mod rmm;
pub mod training;
pub mod tensor;
pub mod world;
