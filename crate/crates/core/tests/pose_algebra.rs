mod common;

use jointalign::geometry::{pose_errors, update_pose, PoseDelta, SymmetryTag};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn algebra_round_trips(seed in any::<u64>()) {
        let e = common::algebra_case(seed);
        prop_assert!(e.worst() < 1e-9, "{e:?}");
    }

    #[test]
    fn between_reaches_target(a in any::<u64>(), b in any::<u64>()) {
        use rand::SeedableRng;
        let p = common::random_pose(&mut rand_chacha::ChaCha8Rng::seed_from_u64(a));
        let q = common::random_pose(&mut rand_chacha::ChaCha8Rng::seed_from_u64(b));
        let r = update_pose(&p, &PoseDelta::between(&p, &q));
        let e = pose_errors(&r, &q, SymmetryTag::None);
        prop_assert!(e.translation < 1e-9 && e.scale < 1e-9, "{e:?}");
        prop_assert!(common::quat_gap(&r.q, &q.q) < 1e-9);
    }
}
