mod oracles;

use std::collections::BTreeMap;

use capts_core::catr::Prediction;
use capts_core::channels::ChannelId;
use capts_core::routing::{route, route_scores};
use capts_core::ItemId;
use oracles::routing_cases;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn route_attains_exhaustive_optimum(seed in any::<u64>()) {
        let case = routing_cases::random(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(routing_cases::check(&case), Ok(()));
    }

    #[test]
    fn positive_rescaling_keeps_the_assignment(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let case = routing_cases::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let budgets: BTreeMap<ChannelId, usize> = ChannelId::ALL.iter().copied().zip(case.budgets.iter().copied()).collect();
        let scores: BTreeMap<ChannelId, Vec<f64>> = ChannelId::ALL.iter().copied().zip(case.scores.iter().cloned()).collect();
        let scaled: BTreeMap<ChannelId, Vec<f64>> = scores.iter().map(|(&c, r)| (c, r.iter().map(|s| s * factor).collect())).collect();
        let a = route_scores(&case.candidates, &scores, &budgets).unwrap();
        let b = route_scores(&case.candidates, &scaled, &budgets).unwrap();
        for c in ChannelId::ALL {
            prop_assert_eq!(a.triggers(c), b.triggers(c));
        }
    }

    #[test]
    fn routing_score_is_monotone(v in 0.0f64..1.0, r in 0.0f64..1.0, dv in 0.0f64..0.5, dr in 0.0f64..0.5, eta in 0.0f64..2.0) {
        let s = capts_core::routing::routing_score(v, r, eta);
        prop_assert!(capts_core::routing::routing_score(v + dv, r, eta) >= s);
        prop_assert!(capts_core::routing::routing_score(v, r + dr, eta) >= s);
    }
}

#[test]
fn route_from_predictions_uses_calibrated_value_plus_eta_uniqueness() {
    let p = |calibrated, uniqueness| Prediction { base: calibrated, calibrated, uniqueness };
    let cands = vec![ItemId(1), ItemId(2)];
    // item 1 has more value, item 2 more uniqueness
    let preds = vec![vec![p(0.6, 0.0)], vec![p(0.5, 1.0)]];
    let budgets: BTreeMap<ChannelId, usize> = [(ChannelId::Content, 1)].into_iter().collect();
    let roster = [ChannelId::Content];
    assert_eq!(route(&cands, &preds, &roster, &budgets, 0.0).unwrap().triggers(ChannelId::Content), vec![ItemId(1)]);
    assert_eq!(route(&cands, &preds, &roster, &budgets, 0.2).unwrap().triggers(ChannelId::Content), vec![ItemId(2)]);
    assert!(route(&cands, &preds, &roster, &budgets, -0.1).is_err());
}
