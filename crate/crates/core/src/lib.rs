//! Trigger selection for multi-channel item-to-item retrieval.
//!
//! The crate covers the whole offline loop: an interaction-log data model
//! with a synthetic generator ([`corpus`]), three item-to-item retrieval
//! channels with timestamped snapshots and leakage-safe replay
//! ([`channels`]), look-ahead per-channel supervision for triggers
//! ([`vam`]), a channel-adaptive trigger routing model with its own
//! reverse-mode gradients ([`catr`]), budgeted routing plus rule-based
//! baselines ([`routing`]), recall/uniqueness evaluation ([`eval`]) and the
//! online/nearline trigger supply simulation ([`supply`]).
//!
//! Everything here is `no_std` + `alloc`; file formats, configuration and
//! the command line live in the companion `capts` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod catr;
pub mod channels;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod math;
pub mod routing;
pub mod supply;
pub mod vam;

pub use channels::{ChannelId, IndexSnapshot, Neighbor, SnapshotStore};
pub use corpus::{
    AuthorId, Feedback, Interaction, Item, ItemId, RequestId, RequestInstance, TagId, Timestamp,
    UserHistory, UserId,
};
pub use error::{Error, Result};
