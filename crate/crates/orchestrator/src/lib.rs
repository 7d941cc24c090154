//! Operator surface of the lab stack: the `autolab` command line and the
//! HTTP service the console talks to.

pub mod cli;
pub mod service;
pub mod setup;
