//! Few-shot support-set poisoning and detection workbench.

pub mod attacks;
pub mod data;
pub mod detection;
pub mod error;
pub mod fewshot;
pub mod filters;
pub mod harness;
pub mod numcore;

pub use error::{Error, Result};
