//! Console and reset-line infrastructure for PC farms.
//!
//! A farm of commodity machines exposes each node's serial console to a
//! console server and each node's reset button to a relay chain on a reset
//! server. This crate provides the whole management stack around that
//! wiring, plus a deterministic simulator so every piece runs at desk
//! scale:
//!
//! - [`transport`]: byte-stream port endpoints (linked in-process pairs
//!   and a device-path stub).
//! - [`relay`]: the 6-byte relay-chain wire protocol, the pulse driver,
//!   and a chain emulator.
//! - [`registry`]: the central information store: interconnection records,
//!   grants, principal keys, per-server bundles, detection-report merges.
//! - [`auth`]: challenge/response public-key authentication for every
//!   control connection.
//! - [`console`]: the console server daemon: session brokering, constant
//!   logging, pattern subscriptions, client detection, reset execution.
//! - [`reset`]: the reset-request workflow with rate limiting and an
//!   append-only audit trail.
//! - [`watchdog`]: restart-then-alarm liveness policy over console
//!   silence and probe failures.
//! - [`sim`]: the simulated farm: scripted boot transcripts, hang/panic
//!   injection, answerback, reset-line sinks.
//! - [`protocol`] / [`client`]: the line-oriented control protocol and
//!   its client.
//! - [`cli`]: the scriptable command-line surface.
//!
//! Start with the runnable examples (`cargo run --example simulated_farm`)
//! for end-to-end walkthroughs.

pub mod auth;
pub mod clock;
pub mod registry;
pub mod relay;
pub mod transport;

pub use clock::{Clock, SimTime};
