//! Bermudan and perpetual-Bermudan option pricing.
//!
//! Two pricers share one soundness contract: starting from `g ∨ 0`, each
//! iterates a monotone operator that dominates the payoff, so prices rise
//! towards the smallest nonnegative fixed point.
//!
//! * [`harmonic`] and [`semigroup`] represent piecewise-harmonic functions of
//!   `L f = βf' + ½f''` and apply the Gaussian semigroup to them in closed form.
//! * [`harmonic_pricer`] iterates the one-dimensional operator built on them.
//! * [`cubature`] iterates `f ↦ (c·Af) ∨ g` on a d-dimensional lattice.
//! * [`oracle`] holds independent references (closed forms, dense DP).

pub mod cli;
pub mod cubature;
pub mod harmonic;
pub mod harmonic_pricer;
pub mod oracle;
pub mod report;
pub mod semigroup;

use serde::{Deserialize, Serialize};

/// Direction of a vanilla or basket payoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}
