//! Desk-scale machinery for quasi-periodic solutions of the forced beam
//! equation `(λω₀·∂_φ)²u + Δ²u + V(x)u = ε f(φ, x, u)`.
//!
//! The crate is `no_std` with `alloc`; the default `std` feature enables
//! rayon parallelism (results are identical for any thread count).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decay_matrix;
pub mod dense;
pub mod lattice;
pub mod linop;
pub mod measure;
pub mod multiscale;
pub mod nashmoser;
mod par;
pub mod sobolev;

pub use num_complex::Complex64;
