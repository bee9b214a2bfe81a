//! Telco-hosted SIM identities for software agents.
//!
//! Layers, bottom up: the MILENAGE kernel ([`aka`]), the emulated secure
//! element ([`vault`]), the home-network authentication authority
//! ([`network`]), and the identity gateway ([`service`]) that mediates every
//! agent request through attestation, delegation policy and a hash-chained
//! audit trail.

pub mod aka;
pub mod api;
pub mod attestation;
pub mod audit;
pub mod clock;
pub mod config;
pub mod digest;
mod fsutil;
pub mod hexfmt;
pub mod ids;
pub mod network;
pub mod policy;
pub mod service;
pub mod vault;
pub mod wire;

pub use api::TelcoApi;
pub use service::IdentityService;
