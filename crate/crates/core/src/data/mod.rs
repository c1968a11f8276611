//! Synthetic data, class splits and episode sampling.

pub mod dataset;
pub mod episode;
pub mod synth;

pub use dataset::{Dataset, Split};
pub use episode::{sample_attack_episode, sample_episode, AttackEpisode, Episode};
pub use synth::{synth_generate, synth_generate_styled, SynthStyle};
