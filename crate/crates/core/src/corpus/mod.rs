//! Interaction-log data model, effective views, request instances and the
//! synthetic corpus generator.

mod generator;
mod requests;
mod types;

pub use generator::{generate_synthetic_corpus, Corpus, GeneratorConfig, StructureKind};
pub use requests::{build_request_instances, eligible_triggers, is_effective_view, requests_at_views, EffectiveView, DEFAULT_EFFECTIVE_VIEW_S};
pub use types::{
    AuthorId, Catalog, EligibleTrigger, Feedback, Interaction, Item, ItemId, RequestId,
    RequestInstance, TagId, Timestamp, UserHistory, UserId, WindowEntry,
};
