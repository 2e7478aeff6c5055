//! Tomen: a small onion-routing network (directory, relays, onion proxy) with a
//! transaction gossip overlay, plus a deterministic harness that records what
//! every vantage point observes and checks who can link a sender address to a
//! transaction.

pub mod cellwire;
pub mod crypto;
pub mod clock;
pub mod directory;
pub mod txgossip;
pub mod relay;
pub mod client;
pub mod config;
pub mod harness;
pub mod net;
