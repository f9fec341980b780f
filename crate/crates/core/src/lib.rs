//! Car-following calibration toolkit.
//!
//! Ingests trajectory data into ego-leader episodes ([`trajdata`]), simulates
//! the Intelligent Driver Model ([`idm`]), calibrates it per driver or per
//! dataset ([`calib`]), trains a boosted-tree one-step baseline
//! ([`boostreg`]), generates synthetic populations with known ground truth
//! ([`synth`]) and runs the diversity and consistency studies ([`analysis`]).
//! The [`cli`] module wires these into config-driven commands.

pub mod analysis;
pub mod boostreg;
pub mod calib;
pub mod cli;
pub mod idm;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod trajdata;
