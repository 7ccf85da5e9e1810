//! Dephasing of driven two-level atoms in a collisional thermal bath.
//!
//! The crate connects three layers of the same physical story:
//!
//! 1. **Bath generation** ([`bath`]): Monte-Carlo motion of trapped atoms
//!    whose position-dependent light shift is a stochastic detuning
//!    `delta(t)`; elastic collisions redraw velocities at Poisson times and
//!    reshape the detuning spectrum.
//! 2. **Spectral characterization** ([`spectroscopy`], [`noise`]): the
//!    two-sided detuning spectral density `G(f)`, measured either directly
//!    (Welch averaging over the ensemble) or the way an experiment does it,
//!    from the decay of driven coherence at a grid of drive strengths.
//! 3. **Coherence prediction** ([`filter`], [`overlap`], [`bloch`]): any
//!    control waveform (free evolution, pulse trains, constant or
//!    phase-modulated drives) has a spectral filter `F_t(f)`, and its
//!    coherence decays at the overlap rate
//!    `R = (4 alpha / t) * Integral G(f) F_t(f) df`. Brute-force Bloch
//!    evolution over the same noise realizations verifies the prediction.
//!
//! All randomness flows through per-atom counter-seeded streams, so every
//! result is a pure function of its configuration and seed, independent of
//! thread count.

pub mod bath;
pub mod bloch;
pub mod error;
pub mod filter;
pub mod io;
pub mod noise;
pub mod numeric;
pub mod overlap;
pub mod spectroscopy;
pub mod waveform;

pub use error::{Error, Result};

/// Library version, for embedding in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
