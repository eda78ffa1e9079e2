//! End-to-end AP against the brute-force enumeration oracle.

use shipdet_core::codec::Task;
use shipdet_core::eval::evaluate;
use shipdet_core::num;
use shipdet_core::rng::Rng;
use shipdet_core::testkit::{ap_enumeration_oracle, random_eval_instance};

#[test]
fn evaluate_matches_enumeration_oracle_on_50_instances() {
    let mut rng = Rng::new(0xA2);
    for instance in 0..50 {
        let n_images = 1 + rng.below(5);
        let (preds, gts) = random_eval_instance(&mut rng, n_images, 10);
        let entries = evaluate(&preds, &gts, Task::Hbb, &[0.4, 0.5, 0.6]).unwrap();
        for entry in &entries {
            let oracle = ap_enumeration_oracle(&preds, &gts, entry.iou_threshold);
            let diff = num::abs(entry.ap - oracle);
            assert!(
                diff <= 1e-9,
                "instance {instance} tau {}: evaluate {} vs oracle {} (diff {diff})",
                entry.iou_threshold,
                entry.ap,
                oracle
            );
        }
        // AP must not increase with the IoU threshold
        assert!(entries[2].ap <= entries[1].ap + 1e-12);
        assert!(entries[1].ap <= entries[0].ap + 1e-12);
    }
}
