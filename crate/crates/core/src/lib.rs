//! Simulation of a cycling-transition quantum emitter producing spin-photon
//! time-bin entanglement, with the analysis chain used to certify it.

pub mod hilbert;
pub mod emitter;
pub mod interferometer;
pub mod witness;
pub mod coincidence;
pub mod experiment;
