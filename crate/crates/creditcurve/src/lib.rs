//! Cross-sectional bond pricing and credit analytics.
//!
//! The crate estimates a mean discount function for government bonds by
//! generalised least squares with a structured residual covariance, then
//! extracts term structures of default probabilities and recovery rates per
//! rating grade and industry from corporate bond prices.  On top of the
//! fitted models it provides fair credit spreads, portfolio inflow/loss
//! decompositions with durations, and credit default swap premia (analytic,
//! continuous-time, and Monte Carlo).

pub mod analytics;
pub mod cb;
pub mod cds;
pub mod error;
pub mod gb;
pub mod gls;
pub mod instruments;
pub mod io;
pub mod synth;

pub use error::{Error, Result};
