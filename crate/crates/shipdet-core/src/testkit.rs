//! Test support: seeded instance generators and independent oracles.
//!
//! Compiled only for tests (or under the `testkit` feature, which the
//! integration and acceptance suites enable). The oracles here deliberately
//! avoid the production code paths they are used to check: the grid IoU
//! below counts pixel centers per scanline and never touches the polygon
//! clipper.


use crate::geometry::{canonicalize_quad, CoordSpace, HBox, Point};
use crate::num;
use crate::rng::Rng;

/// Random convex quad with vertices in [0, 1]^2 (rejection-sampled around a
/// random center so degenerate or reflex draws are discarded). The accepted
/// quads carry generous convexity and edge-length margins, so they stay
/// convex even after 3-decimal coordinate quantization.
pub fn random_convex_quad(rng: &mut Rng) -> [Point; 4] {
    loop {
        let cx = rng.range(0.3, 0.7);
        let cy = rng.range(0.3, 0.7);
        if let Some(quad) = try_quad_at(rng, cx, cy) {
            return quad;
        }
    }
}

/// A second quad overlapping the first more often than not, for IoU tests.
pub fn random_convex_quad_near(rng: &mut Rng, other: &[Point; 4]) -> [Point; 4] {
    let ocx = other.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let ocy = other.iter().map(|p| p.y).sum::<f64>() / 4.0;
    loop {
        let cx = (ocx + rng.range(-0.15, 0.15)).clamp(0.3, 0.7);
        let cy = (ocy + rng.range(-0.15, 0.15)).clamp(0.3, 0.7);
        if let Some(quad) = try_quad_at(rng, cx, cy) {
            return quad;
        }
    }
}

fn try_quad_at(rng: &mut Rng, cx: f64, cy: f64) -> Option<[Point; 4]> {
    // four polar angles with a minimum gap, so no two vertices crowd
    let base = rng.range(0.0, core::f64::consts::TAU);
    let mut angles = [0.0f64; 4];
    let mut acc = base;
    let mut gaps = [0.0f64; 4];
    let mut total = 0.0;
    for g in gaps.iter_mut() {
        *g = 0.35 + rng.uniform();
        total += *g;
    }
    for (i, g) in gaps.iter().enumerate() {
        angles[i] = acc;
        acc += g / total * core::f64::consts::TAU;
    }

    let mut quad = [Point::new(0.0, 0.0); 4];
    for (i, ang) in angles.iter().enumerate() {
        let r = rng.range(0.1, 0.28);
        quad[i] = Point::new(cx + r * num::cos(*ang), cy + r * num::sin(*ang));
        if !(0.0..=1.0).contains(&quad[i].x) || !(0.0..=1.0).contains(&quad[i].y) {
            return None;
        }
    }

    // strict convexity margin and minimum edge length; both exceed the
    // worst-case displacement from quantizing coordinates to 3 decimals
    for i in 0..4 {
        let (o, a, b) = (quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]);
        let cr = (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
        if cr < 2e-3 {
            return None;
        }
        let e = num::hypot(a.x - o.x, a.y - o.y);
        if e < 0.02 {
            return None;
        }
    }
    let q = canonicalize_quad(&quad, CoordSpace::Normalized).ok()?;
    (q.area() > 5e-3).then_some(quad)
}

/// Random normalized axis-aligned box with comfortable extent.
pub fn random_normalized_hbox(rng: &mut Rng) -> HBox {
    let x0 = rng.range(0.0, 0.8);
    let y0 = rng.range(0.0, 0.8);
    let x1 = x0 + rng.range(0.01, 0.2);
    let y1 = y0 + rng.range(0.01, 0.2);
    HBox::new(x0, y0, x1, y1, CoordSpace::Normalized).unwrap()
}

/// Grid-sampled IoU of two convex polygons over [0, 1]^2: counts pixel
/// centers of an n x n grid falling inside each polygon, per scanline.
/// Independent of the clipping-based implementation.
pub fn grid_iou(a: &[Point], b: &[Point], n: usize) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for row in 0..n {
        let y = (row as f64 + 0.5) / n as f64;
        let ia = scanline_span(a, y, n);
        let ib = scanline_span(b, y, n);
        let ca = span_count(ia);
        let cb = span_count(ib);
        let ci = span_count(intersect_spans(ia, ib));
        inter += ci;
        union += ca + cb - ci;
    }
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

// Pixel-index span [lo, hi] (inclusive) of columns whose centers fall inside
// the convex polygon on the horizontal line at height y; None when the line
// misses the polygon.
fn scanline_span(poly: &[Point], y: f64, n: usize) -> Option<(i64, i64)> {
    let m = poly.len();
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut hit = false;
    for i in 0..m {
        let p = poly[i];
        let q = poly[(i + 1) % m];
        let (y0, y1) = (p.y, q.y);
        if (y0 - y) * (y1 - y) > 0.0 {
            continue; // edge entirely above or below
        }
        if y0 == y1 {
            // horizontal edge on the line
            x_lo = x_lo.min(p.x.min(q.x));
            x_hi = x_hi.max(p.x.max(q.x));
            hit = true;
            continue;
        }
        let t = (y - y0) / (y1 - y0);
        if !(0.0..=1.0).contains(&t) {
            continue;
        }
        let x = p.x + t * (q.x - p.x);
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        hit = true;
    }
    if !hit {
        return None;
    }
    // columns c with x_lo <= (c + 0.5)/n <= x_hi
    let lo = num::ceil(x_lo * n as f64 - 0.5) as i64;
    let hi = num::floor(x_hi * n as f64 - 0.5) as i64;
    let lo = lo.max(0);
    let hi = hi.min(n as i64 - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn intersect_spans(a: Option<(i64, i64)>, b: Option<(i64, i64)>) -> Option<(i64, i64)> {
    let ((a0, a1), (b0, b1)) = (a?, b?);
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn span_count(s: Option<(i64, i64)>) -> u64 {
    match s {
        Some((lo, hi)) => (hi - lo + 1) as u64,
        None => 0,
    }
}

/// A random evaluation instance: per-image ground truth plus predictions
/// that are jittered copies of the truth mixed with false positives. All
/// confidences are distinct, so ranking is unambiguous.
pub fn random_eval_instance(
    rng: &mut Rng,
    n_images: usize,
    max_boxes: usize,
) -> (
    alloc::vec::Vec<crate::eval::Detection>,
    alloc::collections::BTreeMap<alloc::string::String, alloc::vec::Vec<crate::eval::GeomBox>>,
) {
    use crate::eval::{Detection, GeomBox};
    use alloc::collections::BTreeMap;
    use alloc::format;

    let mut gts: BTreeMap<alloc::string::String, alloc::vec::Vec<GeomBox>> = BTreeMap::new();
    let mut preds: alloc::vec::Vec<Detection> = alloc::vec::Vec::new();
    loop {
        gts.clear();
        preds.clear();
        let mut total_gt = 0usize;
        for i in 0..n_images {
            let image_id = format!("img{i:03}");
            let n_gt = rng.below(max_boxes + 1);
            total_gt += n_gt;
            let mut boxes = alloc::vec::Vec::new();
            for _ in 0..n_gt {
                let b = random_normalized_hbox(rng);
                boxes.push(GeomBox::Horizontal(b));
                // usually predict a jittered copy of the truth
                if rng.uniform() < 0.85 {
                    let [x0, y0, x1, y1] = b.coords();
                    let jitter = rng.range(0.0, 0.06);
                    let jb = HBox::new(
                        (x0 + rng.range(-jitter, jitter)).clamp(0.0, 0.95),
                        (y0 + rng.range(-jitter, jitter)).clamp(0.0, 0.95),
                        (x1 + rng.range(-jitter, jitter)).clamp(0.05, 1.0),
                        (y1 + rng.range(-jitter, jitter)).clamp(0.05, 1.0),
                        CoordSpace::Normalized,
                    );
                    if let Ok(jb) = jb {
                        if jb.width() > 0.0 && jb.height() > 0.0 {
                            preds.push(
                                Detection::new(&image_id, GeomBox::Horizontal(jb), rng.uniform())
                                    .unwrap(),
                            );
                        }
                    }
                }
            }
            // a few spurious detections
            for _ in 0..rng.below(3) {
                preds.push(
                    Detection::new(
                        &image_id,
                        GeomBox::Horizontal(random_normalized_hbox(rng)),
                        rng.uniform(),
                    )
                    .unwrap(),
                );
            }
            gts.insert(image_id, boxes);
        }
        if total_gt == 0 || preds.is_empty() {
            continue;
        }
        // confidences must be pairwise distinct
        let mut confs: alloc::vec::Vec<u64> =
            preds.iter().map(|p| p.confidence.to_bits()).collect();
        confs.sort_unstable();
        confs.dedup();
        if confs.len() == preds.len() {
            return (preds, gts);
        }
    }
}

/// Brute-force AP: for every prefix of the confidence-descending prediction
/// list, re-match that prefix from scratch per image (quadratic greedy),
/// then integrate the precision envelope by direct backward scans. An
/// independent route to the same number `evaluate` computes incrementally.
pub fn ap_enumeration_oracle(
    preds: &[crate::eval::Detection],
    gts: &alloc::collections::BTreeMap<
        alloc::string::String,
        alloc::vec::Vec<crate::eval::GeomBox>,
    >,
    tau: f64,
) -> f64 {
    let total_gt: usize = gts.values().map(alloc::vec::Vec::len).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut order: alloc::vec::Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut precisions = alloc::vec::Vec::new();
    let mut recalls = alloc::vec::Vec::new();
    for k in 1..=order.len() {
        let subset = &order[..k];
        let mut tp = 0usize;
        for (image_id, gt_boxes) in gts.iter() {
            // this image's subset predictions, confidence-descending
            let mine: alloc::vec::Vec<usize> = subset
                .iter()
                .copied()
                .filter(|&i| preds[i].image_id == *image_id)
                .collect();
            let mut taken = alloc::vec![false; gt_boxes.len()];
            for &pi in &mine {
                let mut best: Option<(usize, f64)> = None;
                for (gi, gt) in gt_boxes.iter().enumerate() {
                    if taken[gi] {
                        continue;
                    }
                    let iou = preds[pi].bbox.iou(gt).unwrap();
                    if best.map(|(_, b)| iou > b).unwrap_or(true) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, iou)) = best {
                    if iou >= tau {
                        taken[gi] = true;
                        tp += 1;
                    }
                }
            }
        }
        // predictions on images absent from the gt map never match, so the
        // k in the denominator already counts them as false positives
        precisions.push(tp as f64 / k as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recalls.len() {
        if recalls[k] > prev_recall {
            let mut env = 0.0f64;
            for j in k..precisions.len() {
                env = env.max(precisions[j]);
            }
            ap += (recalls[k] - prev_recall) * env;
            prev_recall = recalls[k];
        }
    }
    ap
}

/// FNV-1a over bytes; handy for byte-identical output comparisons.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
