//! Grid model and restoration engine: network data, linear load fitting,
//! classical and governor power flow, crank-step validation and island
//! synchronization.

pub mod ad;
pub mod bigload;
pub mod netmodel;
pub mod powerflow;
pub mod restoration;

/// Engine version reported alongside every service response.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
