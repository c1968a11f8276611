#![allow(dead_code)]

pub mod attacks;
pub mod brute;
pub mod gradient;
