//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod fd;
pub mod lp;
pub mod runs;
