mod oracles;

use capts_core::vam::{intensity_label, raw_reward};
use capts_core::corpus::WindowEntry;
use capts_core::ItemId;
use oracles::vam_cases;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn supervision_matches_nested_loop_oracle(seed in any::<u64>()) {
        let case = vam_cases::random(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(vam_cases::check(&case), Ok(()));
    }

    #[test]
    fn reward_is_monotone_in_retrieval_and_watch(
        window in prop::collection::vec((0u32..12, 70u32..3000), 0..10),
        retrieved in prop::collection::vec(0u32..12, 0..10),
        extra in 0u32..12,
        bump in 0usize..10,
    ) {
        let entries: Vec<WindowEntry> = window.iter().map(|&(i, w)| WindowEntry { item: ItemId(i), ts: 0, watch_s: w as f64 / 10.0 }).collect();
        let ids: Vec<ItemId> = retrieved.iter().map(|&i| ItemId(i)).collect();
        let base = raw_reward(&ids, &entries);
        let mut more = ids.clone();
        more.push(ItemId(extra));
        prop_assert!(raw_reward(&more, &entries) >= base);
        if !entries.is_empty() {
            let mut longer = entries.clone();
            let k = bump % longer.len();
            longer[k].watch_s += 25.0;
            prop_assert!(intensity_label(raw_reward(&ids, &longer), 100.0, 6.0) >= intensity_label(base, 100.0, 6.0));
        }
    }
}
