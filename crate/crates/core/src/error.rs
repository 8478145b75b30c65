use alloc::string::String;

use crate::channels::ChannelId;
use crate::corpus::ItemId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no {channel} snapshot with as_of <= {cutoff}")]
    ReplayUnavailable { channel: ChannelId, cutoff: i64 },
    #[error("snapshot as_of {as_of} is not after the previous {channel} snapshot")]
    SnapshotOrder { channel: ChannelId, as_of: i64 },
    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged { epoch: usize, step: usize, what: String },
    #[error("unknown item {0:?}")]
    UnknownItem(ItemId),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;
