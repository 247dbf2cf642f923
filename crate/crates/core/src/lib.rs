//! Configuring a reconfigurable intelligent surface (RIS) directly from
//! received uplink pilots.
//!
//! The pipeline: [`channel`] draws problem instances, [`probing`] runs the
//! block-flip pilot protocol and builds network inputs, [`risnet`] maps those
//! inputs to phase shifts, [`precoder`] computes the WMMSE precoder for the
//! resulting channel, and [`trainer`] ascends the weighted sum rate with
//! gradients from [`autodiff`]. [`baselines`] and [`props`] provide reference
//! configurations and a self-check suite.

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod linalg;
pub mod precoder;
pub mod probing;
pub mod props;
pub mod rng;
pub mod trainer;
pub mod risnet;

pub use error::{Error, Result};
