//! Elastic scaling of programmable-switch applications across a switch fabric.
//!
//! The crate is layered bottom-up: [`fabric`] models switches, links and
//! remote stores; [`appir`] parses and compiles application pipelines;
//! [`dataplane`] is the discrete-event packet simulator; [`primitives`]
//! reshapes deployments; [`controller`] decides when to use them; and
//! [`scenarios`] ties everything into reproducible runs.

pub mod appir;
pub mod controller;
pub mod dataplane;
pub mod fabric;
pub mod primitives;
pub mod scenarios;
