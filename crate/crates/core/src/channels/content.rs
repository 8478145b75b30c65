use alloc::vec::Vec;

use super::{exact_cosine_top_k, Channel, ChannelId, IndexSnapshot, LogView, DEFAULT_K_RET};
use crate::corpus::{Catalog, Timestamp};
use crate::error::Result;

/// Cosine similarity over catalog content vectors, limited to items created
/// by the snapshot time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContentChannel {
    pub k_ret: usize,
}

impl Default for ContentChannel {
    fn default() -> Self {
        ContentChannel { k_ret: DEFAULT_K_RET }
    }
}

impl ContentChannel {
    pub fn build_from_catalog(&self, catalog: &Catalog, as_of: Timestamp) -> Result<IndexSnapshot> {
        let live: Vec<_> = catalog.items().iter().filter(|it| it.created_at <= as_of).collect();
        let ids: Vec<_> = live.iter().map(|it| it.id).collect();
        let vectors: Vec<f32> = live.iter().flat_map(|it| it.content.iter().copied()).collect();
        let neighbors = exact_cosine_top_k(&ids, &vectors, catalog.dim(), self.k_ret);
        IndexSnapshot::new(ChannelId::Content, as_of, self.k_ret, neighbors)
    }
}

impl Channel for ContentChannel {
    fn id(&self) -> ChannelId {
        ChannelId::Content
    }

    fn build(&self, log: LogView<'_>, as_of: Timestamp) -> Result<IndexSnapshot> {
        self.build_from_catalog(log.catalog, as_of)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AuthorId, Item, ItemId, TagId};
    use alloc::vec;

    fn item(id: u32, content: Vec<f32>, created_at: i64) -> Item {
        Item { id: ItemId(id), author: AuthorId(0), tag: TagId(0), content, duration_s: 30.0, created_at }
    }

    #[test]
    fn identical_orthogonal_and_unreleased() {
        let catalog = Catalog::new(
            vec![
                item(0, vec![1.0, 0.0, 0.0], 0),
                item(1, vec![1.0, 0.0, 0.0], 0),
                item(2, vec![0.0, 1.0, 0.0], 0),
                item(3, vec![0.0, 0.0, 1.0], 500),
            ],
            3,
        )
        .unwrap();
        let snap = ContentChannel::default().build_from_catalog(&catalog, 100).unwrap();
        let n0 = snap.neighbors(ItemId(0));
        assert_eq!(n0[0].item, ItemId(1));
        assert!((n0[0].score - 1.0).abs() < 1e-6);
        assert_eq!(snap.neighbors(ItemId(1))[0].item, ItemId(0));
        let to_2 = n0.iter().find(|n| n.item == ItemId(2)).unwrap();
        assert_eq!(to_2.score, 0.0);
        // created after the snapshot: absent everywhere
        assert!(snap.neighbors(ItemId(3)).is_empty());
        assert!(snap.iter().all(|(_, l)| l.iter().all(|n| n.item != ItemId(3))));
    }
}
