//! Configuration, I/O, grid-sampled nonlinearities, the randomized check
//! suite and the command-line front end for `beamkam-core`.

pub mod cli;
pub mod config;
pub mod io;
pub mod sampled;
pub mod verify;
