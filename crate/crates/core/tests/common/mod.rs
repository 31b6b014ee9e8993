//! Shared harnesses for the integration test suites. Each suite uses
//! only a subset, so unused items are expected.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
