#![allow(dead_code)]

pub mod fidelity;
pub mod numerics;
pub mod props;
