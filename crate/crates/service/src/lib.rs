//! Operator-facing front end of the restoration engine: sessions walking a
//! crank path over HTTP, measurement ingestion with load re-fitting, and
//! the boundary-state exchange used to synchronize islands.

pub mod api;
pub mod config;
pub mod session;
pub mod store;

pub use api::{router, AppState};
pub use config::EngineConfig;
pub use session::{network_hash, CreateSession, Session, SessionError};
pub use store::SnapshotStore;
