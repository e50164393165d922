//! Weak KAM toolkit for mechanical Hamiltonians `H(x, p) = ½⟨A(x)p, p⟩ + V(x)`
//! on the one- and two-dimensional torus.
//!
//! The pipeline is: discretize the action ([`action`]), solve for `α(c)` and
//! the weak KAM solution ([`weakkam`]), estimate superdifferentials and the
//! singular set ([`semiconcave`]), follow generalized characteristics and
//! Hamiltonian orbits ([`characteristics`]), and assemble barrier functions
//! and homoclinic orbits ([`barrier`], [`homoclinic`]).

pub mod action;
pub mod barrier;
pub mod characteristics;
pub mod cli;
pub mod error;
pub mod homoclinic;
pub mod model;
pub mod semiconcave;
pub mod weakkam;

pub use error::{Error, Result};
pub use model::{Covector, MechanicalSystem, Point, TorusGrid};
