use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch seconds.
pub type Timestamp = i64;

macro_rules! id_newtype {
    ($(#[$m:meta])* $name:ident($inner:ty)) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(ItemId(u32));
id_newtype!(UserId(u32));
id_newtype!(AuthorId(u32));
id_newtype!(
    /// Level-1 category.
    TagId(u32)
);
id_newtype!(
    /// Packs the user and the index of the anchoring interaction, so ids sort
    /// by user first and chronologically within a user.
    RequestId(u64)
);

impl RequestId {
    pub fn new(user: UserId, anchor_index: usize) -> Self {
        RequestId(((user.0 as u64) << 32) | anchor_index as u64)
    }

    pub fn user(self) -> UserId {
        UserId((self.0 >> 32) as u32)
    }

    pub fn anchor_index(self) -> usize {
        (self.0 & 0xffff_ffff) as usize
    }
}

bitflags::bitflags! {
    /// Explicit feedback attached to one interaction.
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct Feedback: u8 {
        const LIKE = 1;
        const FOLLOW = 1 << 1;
        const COMMENT = 1 << 2;
        const SHARE = 1 << 3;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub author: AuthorId,
    pub tag: TagId,
    /// Unit-normalized content features.
    pub content: Vec<f32>,
    pub duration_s: f64,
    pub created_at: Timestamp,
}

/// Item metadata sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    items: Vec<Item>,
    dim: usize,
}

impl Catalog {
    /// Sorts by id and checks the content-vector invariants.
    pub fn new(mut items: Vec<Item>, dim: usize) -> Result<Self> {
        items.sort_by_key(|it| it.id);
        if items.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Invalid("duplicate item id in catalog".into()));
        }
        for it in &items {
            if it.content.len() != dim {
                return Err(Error::Invalid(alloc::format!(
                    "item {} has content dimension {}, expected {dim}",
                    it.id,
                    it.content.len()
                )));
            }
            let norm = libm::sqrt(it.content.iter().map(|&x| (x as f64) * (x as f64)).sum());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(alloc::format!(
                    "item {} content vector has norm {norm}",
                    it.id
                )));
            }
            if !(it.duration_s >= 0.0) {
                return Err(Error::Invalid(alloc::format!("item {} has negative duration", it.id)));
            }
        }
        Ok(Catalog { items, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        let i = id.0 as usize;
        if i < self.items.len() && self.items[i].id == id {
            return Some(&self.items[i]);
        }
        self.items
            .binary_search_by_key(&id, |it| it.id)
            .ok()
            .map(|pos| &self.items[pos])
    }

    /// One past the largest item id; sizes dense per-item tables.
    pub fn id_bound(&self) -> usize {
        self.items.last().map_or(0, |it| it.id.0 as usize + 1)
    }

    pub fn tag_bound(&self) -> usize {
        self.items.iter().map(|it| it.tag.0 as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub ts: Timestamp,
    pub watch_s: f64,
    pub feedback: Feedback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user: UserId,
    pub interactions: Vec<Interaction>,
}

impl UserHistory {
    /// Builds a history from events in arbitrary order. Equal timestamps are
    /// ordered by item id; the number of such ties is returned so ingestion
    /// can warn about them.
    pub fn from_events(user: UserId, mut interactions: Vec<Interaction>) -> Result<(Self, usize)> {
        if let Some(bad) = interactions.iter().find(|x| x.user != user) {
            return Err(Error::Invalid(alloc::format!(
                "interaction of user {} in history of user {user}",
                bad.user
            )));
        }
        if let Some(bad) = interactions.iter().find(|x| !(x.watch_s >= 0.0)) {
            return Err(Error::Invalid(alloc::format!(
                "negative watch time {} for user {user}",
                bad.watch_s
            )));
        }
        interactions.sort_by(|a, b| a.ts.cmp(&b.ts).then(a.item.cmp(&b.item)));
        let ties = interactions.windows(2).filter(|w| w[0].ts == w[1].ts).count();
        Ok((UserHistory { user, interactions }, ties))
    }

    pub fn is_strictly_ordered(&self) -> bool {
        self.interactions.windows(2).all(|w| w[0].ts < w[1].ts)
    }
}

/// An eligible trigger with the metadata of its most recent occurrence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EligibleTrigger {
    pub item: ItemId,
    pub ts: Timestamp,
    pub watch_s: f64,
    pub feedback: Feedback,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub item: ItemId,
    pub ts: Timestamp,
    pub watch_s: f64,
}

/// An anchored evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestInstance {
    pub id: RequestId,
    pub user: UserId,
    pub tau0: Timestamp,
    /// De-duplicated, most recent first.
    pub eligible_triggers: Vec<EligibleTrigger>,
    /// The next effective views after `tau0`, oldest first.
    pub future_window: Vec<WindowEntry>,
}

impl RequestInstance {
    pub fn trigger(&self, item: ItemId) -> Option<&EligibleTrigger> {
        self.eligible_triggers.iter().find(|t| t.item == item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn request_id_packs_user_and_anchor() {
        let id = RequestId::new(UserId(7), 123);
        assert_eq!(id.user(), UserId(7));
        assert_eq!(id.anchor_index(), 123);
        assert!(RequestId::new(UserId(1), 999) < RequestId::new(UserId(2), 0));
    }

    #[test]
    fn ties_are_broken_by_item_and_counted() {
        let ev = |item, ts| Interaction {
            user: UserId(1),
            item: ItemId(item),
            ts,
            watch_s: 10.0,
            feedback: Feedback::empty(),
        };
        let (h, ties) = UserHistory::from_events(UserId(1), vec![ev(5, 10), ev(2, 10), ev(9, 3)]).unwrap();
        assert_eq!(ties, 1);
        let items: Vec<u32> = h.interactions.iter().map(|x| x.item.0).collect();
        assert_eq!(items, vec![9, 2, 5]);
        assert!(!h.is_strictly_ordered());
    }

    #[test]
    fn catalog_rejects_unnormalized_vectors() {
        let item = Item {
            id: ItemId(0),
            author: AuthorId(0),
            tag: TagId(0),
            content: vec![0.5, 0.5],
            duration_s: 10.0,
            created_at: 0,
        };
        assert!(Catalog::new(vec![item], 2).is_err());
    }
}
