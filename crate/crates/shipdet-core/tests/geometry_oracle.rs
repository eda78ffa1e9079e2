//! Clipping-based quad IoU against an independent grid-sampling oracle.

use shipdet_core::geometry::{canonicalize_quad, quad_iou, CoordSpace, Point};
use shipdet_core::num;
use shipdet_core::rng::Rng;
use shipdet_core::testkit::{grid_iou, random_convex_quad, random_convex_quad_near};

#[test]
fn clipped_iou_matches_grid_oracle_on_1000_pairs() {
    let start = std::time::Instant::now();
    let mut rng = Rng::new(0xA1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let qa = random_convex_quad(&mut rng);
        let qb = random_convex_quad_near(&mut rng, &qa);
        let a = canonicalize_quad(&qa, CoordSpace::Normalized).unwrap();
        let b = canonicalize_quad(&qb, CoordSpace::Normalized).unwrap();
        let analytic = quad_iou(&a, &b).unwrap();
        let sampled = grid_iou(&qa, &qb, 1000);
        let diff = num::abs(analytic - sampled);
        worst = worst.max(diff);
        assert!(
            diff <= 2e-3,
            "pair {i}: analytic {analytic} vs grid {sampled} (diff {diff})"
        );
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "oracle suite took {elapsed:?}, budget is 30 s"
    );
    println!("worst |analytic - grid| over 1000 pairs: {worst:.2e} ({elapsed:?})");
}

#[test]
fn rotated_square_hits_closed_form() {
    let axis = [
        Point::new(-0.5, -0.5),
        Point::new(0.5, -0.5),
        Point::new(0.5, 0.5),
        Point::new(-0.5, 0.5),
    ];
    let s = num::sqrt(2.0) / 2.0;
    let rot = [
        Point::new(-s, 0.0),
        Point::new(0.0, -s),
        Point::new(s, 0.0),
        Point::new(0.0, s),
    ];
    let a = canonicalize_quad(&axis, CoordSpace::Normalized).unwrap();
    let b = canonicalize_quad(&rot, CoordSpace::Normalized).unwrap();
    let iou = quad_iou(&a, &b).unwrap();
    assert!(num::abs(iou - 1.0 / num::sqrt(2.0)) <= 1e-6, "iou {iou}");
}
