//! Box-prompted segmentation: detection boxes become prompts for a
//! pluggable segmenter that emits one binary mask per box.
//!
//! Two reference segmenters ship with the toolkit: a box-fill baseline
//! (mask = prompt interior) and an intensity-threshold refiner (Otsu
//! threshold over the dilated box crop, largest connected component kept).
//! Real promptable-segmentation weights plug in behind the same trait.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::eval::GeomBox;
use crate::geometry::{CoordSpace, HBox};
use crate::num;
use crate::raster::GrayImage;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SegError {
    /// Mask dimensions differ from the reference.
    DimensionMismatch,
    /// The segmenter failed on one box.
    SegmenterFailure(String),
}

impl core::fmt::Display for SegError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SegError::DimensionMismatch => f.write_str("mask dimensions differ"),
            SegError::SegmenterFailure(msg) => write!(f, "segmenter failure: {msg}"),
        }
    }
}

impl core::error::Error for SegError {}

/// A binary mask with the dimensions of its source image (0 background,
/// 1 ship).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32) -> Self {
        MaskImage {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = if v > 0 { 1 } else { 0 };
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v > 0).count()
    }

    /// Encodes as binary PGM with foreground 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut img = GrayImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) > 0 {
                    img.set(x, y, 255);
                }
            }
        }
        crate::raster::encode_pgm(&img)
    }

    /// Decodes a PGM written by [`MaskImage::to_pgm`]; any nonzero pixel is
    /// foreground.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, crate::raster::PgmError> {
        let img = crate::raster::decode_pgm(bytes)?;
        let mut mask = MaskImage::new(img.width(), img.height());
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.get(x, y) > 0 {
                    mask.set(x, y, 1);
                }
            }
        }
        Ok(mask)
    }
}

/// Pixel-space integer prompt rectangle [x0, x1) x [y0, y1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PromptBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Grows the box by `fraction` of its size on every side, clamped to
    /// the image.
    pub fn dilated(&self, fraction: f64, width: u32, height: u32) -> PromptBox {
        let dx = num::ceil(f64::from(self.width()) * fraction) as u32;
        let dy = num::ceil(f64::from(self.height()) * fraction) as u32;
        PromptBox {
            x0: self.x0.saturating_sub(dx),
            y0: self.y0.saturating_sub(dy),
            x1: (self.x1 + dx).min(width),
            y1: (self.y1 + dy).min(height),
        }
    }
}

/// The boxes prompting segmentation of one image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptSet {
    pub boxes: Vec<PromptBox>,
    /// Boxes that had to be clamped into bounds during conversion.
    pub clamped: usize,
}

/// Converts normalized detections into pixel prompt boxes: denormalize,
/// round, clamp to bounds. Oriented detections contribute their bounding
/// horizontal box. An empty detection list is a valid empty prompt set.
pub fn boxes_to_prompts(detections: &[GeomBox], width: u32, height: u32) -> PromptSet {
    let space = CoordSpace::pixel(width, height);
    let mut out = PromptSet::default();
    for det in detections {
        let hbox: HBox = det.bounding_hbox();
        let px = match hbox.rescale(space) {
            Ok(b) => b,
            Err(_) => {
                // out-of-bounds normalized input: clamp in normalized space
                out.clamped += 1;
                let clamped = HBox::new(
                    hbox.x_min().clamp(0.0, 1.0),
                    hbox.y_min().clamp(0.0, 1.0),
                    hbox.x_max().clamp(0.0, 1.0),
                    hbox.y_max().clamp(0.0, 1.0),
                    CoordSpace::Normalized,
                )
                .expect("clamped box is ordered");
                clamped.rescale(space).expect("clamped box is in bounds")
            }
        };
        let mut x0 = num::round(px.x_min()) as i64;
        let mut y0 = num::round(px.y_min()) as i64;
        let mut x1 = num::round(px.x_max()) as i64;
        let mut y1 = num::round(px.y_max()) as i64;
        let (w, h) = (i64::from(width), i64::from(height));
        if x0 < 0 || y0 < 0 || x1 > w || y1 > h {
            out.clamped += 1;
        }
        x0 = x0.clamp(0, w);
        y0 = y0.clamp(0, h);
        x1 = x1.clamp(x0, w);
        y1 = y1.clamp(y0, h);
        out.boxes.push(PromptBox {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        });
    }
    out
}

/// A promptable segmenter: one mask per prompt box, every foreground pixel
/// inside the dilated prompt.
pub trait Segmenter {
    /// Dilation margin applied around each prompt before segmentation.
    fn dilation(&self) -> f64 {
        0.10
    }

    fn segment_box(&self, image: &GrayImage, prompt: &PromptBox) -> Result<MaskImage, SegError>;
}

/// Runs the segmenter over every prompt. Per-box failures produce an empty
/// mask and are reported alongside the masks rather than aborting the image.
pub fn segment(
    image: &GrayImage,
    prompts: &PromptSet,
    segmenter: &dyn Segmenter,
) -> (Vec<MaskImage>, Vec<SegError>) {
    let mut masks = Vec::with_capacity(prompts.boxes.len());
    let mut failures = Vec::new();
    for prompt in &prompts.boxes {
        match segmenter.segment_box(image, prompt) {
            Ok(mask) => masks.push(mask),
            Err(e) => {
                failures.push(e);
                masks.push(MaskImage::new(image.width(), image.height()));
            }
        }
    }
    (masks, failures)
}

/// Baseline segmenter: the mask is exactly the prompt box interior.
#[derive(Clone, Copy, Debug, Default)]
pub struct BoxFillSegmenter;

impl Segmenter for BoxFillSegmenter {
    fn segment_box(&self, image: &GrayImage, prompt: &PromptBox) -> Result<MaskImage, SegError> {
        let mut mask = MaskImage::new(image.width(), image.height());
        for y in prompt.y0..prompt.y1.min(image.height()) {
            for x in prompt.x0..prompt.x1.min(image.width()) {
                mask.set(x, y, 1);
            }
        }
        Ok(mask)
    }
}

/// Intensity-threshold segmenter: Otsu threshold over the dilated box crop,
/// bright side taken as foreground, largest 4-connected component kept.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdSegmenter {
    pub dilation: f64,
}

impl Default for ThresholdSegmenter {
    fn default() -> Self {
        ThresholdSegmenter { dilation: 0.10 }
    }
}

impl Segmenter for ThresholdSegmenter {
    fn dilation(&self) -> f64 {
        self.dilation
    }

    fn segment_box(&self, image: &GrayImage, prompt: &PromptBox) -> Result<MaskImage, SegError> {
        let region = prompt.dilated(self.dilation, image.width(), image.height());
        if region.width() == 0 || region.height() == 0 {
            return Ok(MaskImage::new(image.width(), image.height()));
        }
        let mut histogram = [0u64; 256];
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                histogram[image.get(x, y) as usize] += 1;
            }
        }
        let threshold = otsu_threshold(&histogram);

        // foreground = strictly brighter than the threshold
        let mut fg = vec![false; (region.width() * region.height()) as usize];
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                if image.get(x, y) > threshold {
                    fg[((y - region.y0) * region.width() + (x - region.x0)) as usize] = true;
                }
            }
        }

        let component = largest_component(&fg, region.width(), region.height());
        let mut mask = MaskImage::new(image.width(), image.height());
        for (idx, keep) in component.iter().enumerate() {
            if *keep {
                let lx = idx as u32 % region.width();
                let ly = idx as u32 / region.width();
                mask.set(region.x0 + lx, region.y0 + ly, 1);
            }
        }
        Ok(mask)
    }
}

// Classic Otsu: threshold maximizing between-class variance; the first
// maximum wins, keeping the choice deterministic.
fn otsu_threshold(histogram: &[u64; 256]) -> u8 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0;
    }
    let sum_all: f64 = histogram
        .iter()
        .enumerate()
        .map(|(v, n)| v as f64 * *n as f64)
        .sum();
    let mut best = (0u8, f64::NEG_INFINITY);
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..256usize {
        w0 += histogram[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total as f64 - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * histogram[t] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.1 {
            best = (t as u8, between);
        }
    }
    best.0
}

// Largest 4-connected true-region via BFS in scan order; ties go to the
// earliest component found.
fn largest_component(fg: &[bool], width: u32, height: u32) -> Vec<bool> {
    let n = fg.len();
    let mut label = vec![usize::MAX; n];
    let mut best_id = usize::MAX;
    let mut best_size = 0usize;
    let mut next_id = 0usize;
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..n {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        let mut size = 0usize;
        queue.clear();
        queue.push(start);
        label[start] = id;
        while let Some(idx) = queue.pop() {
            size += 1;
            let x = idx as u32 % width;
            let y = idx as u32 / width;
            let mut push = |nx: i64, ny: i64| {
                if nx < 0 || ny < 0 || nx >= i64::from(width) || ny >= i64::from(height) {
                    return;
                }
                let nidx = ny as usize * width as usize + nx as usize;
                if fg[nidx] && label[nidx] == usize::MAX {
                    label[nidx] = id;
                    queue.push(nidx);
                }
            };
            push(i64::from(x) - 1, i64::from(y));
            push(i64::from(x) + 1, i64::from(y));
            push(i64::from(x), i64::from(y) - 1);
            push(i64::from(x), i64::from(y) + 1);
        }
        if size > best_size {
            best_size = size;
            best_id = id;
        }
    }
    (0..n).map(|i| fg[i] && label[i] == best_id).collect()
}

/// Pixelwise IoU and accuracy between two equally sized masks. Two empty
/// masks count as identical (IoU 1).
pub fn mask_metrics(predicted: &MaskImage, reference: &MaskImage) -> Result<MaskMetrics, SegError> {
    if predicted.width != reference.width || predicted.height != reference.height {
        return Err(SegError::DimensionMismatch);
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    let mut agree = 0u64;
    for (p, r) in predicted.data.iter().zip(&reference.data) {
        let (p, r) = (*p > 0, *r > 0);
        if p && r {
            inter += 1;
        }
        if p || r {
            union += 1;
        }
        if p == r {
            agree += 1;
        }
    }
    Ok(MaskMetrics {
        iou: if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        },
        pixel_accuracy: agree as f64 / predicted.data.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskMetrics {
    pub iou: f64,
    pub pixel_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn normalized(x0: f64, y0: f64, x1: f64, y1: f64) -> GeomBox {
        GeomBox::Horizontal(HBox::new(x0, y0, x1, y1, CoordSpace::Normalized).unwrap())
    }

    #[test]
    fn prompts_denormalize_and_clamp() {
        let prompts = boxes_to_prompts(&[normalized(0.1, 0.2, 0.5, 0.6)], 200, 100);
        assert_eq!(
            prompts.boxes[0],
            PromptBox {
                x0: 20,
                y0: 20,
                x1: 100,
                y1: 60
            }
        );
        assert_eq!(prompts.clamped, 0);

        let over = boxes_to_prompts(&[normalized(0.9, 0.9, 1.0, 1.0)], 33, 33);
        // 0.9 * 33 = 29.7 -> rounds to 30; end stays clamped at 33
        assert_eq!(over.boxes[0].x1, 33);

        // out-of-range input is clamped into bounds, with a warning count
        let wild = boxes_to_prompts(&[normalized(0.5, 0.5, 1.2, 1.2)], 200, 200);
        assert_eq!(
            wild.boxes[0],
            PromptBox {
                x0: 100,
                y0: 100,
                x1: 200,
                y1: 200
            }
        );
        assert_eq!(wild.clamped, 1);

        let empty = boxes_to_prompts(&[], 100, 100);
        assert!(empty.boxes.is_empty());
    }

    #[test]
    fn oriented_detection_prompts_via_bounding_box() {
        use crate::geometry::{canonicalize_quad, Point};
        let quad = canonicalize_quad(
            &[
                Point::new(0.5, 0.3),
                Point::new(0.7, 0.5),
                Point::new(0.5, 0.7),
                Point::new(0.3, 0.5),
            ],
            CoordSpace::Normalized,
        )
        .unwrap();
        let prompts = boxes_to_prompts(&[GeomBox::Oriented(quad)], 100, 100);
        assert_eq!(
            prompts.boxes[0],
            PromptBox {
                x0: 30,
                y0: 30,
                x1: 70,
                y1: 70
            }
        );
    }

    #[test]
    fn boxfill_mask_equals_prompt_interior() {
        let img = GrayImage::new(50, 40);
        let prompts = boxes_to_prompts(&[normalized(0.2, 0.25, 0.6, 0.75)], 50, 40);
        let (masks, failures) = segment(&img, &prompts, &BoxFillSegmenter);
        assert!(failures.is_empty());
        assert_eq!(masks.len(), 1);
        let p = prompts.boxes[0];
        let mut expected = MaskImage::new(50, 40);
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                expected.set(x, y, 1);
            }
        }
        assert_eq!(masks[0], expected);
        let metrics = mask_metrics(&masks[0], &expected).unwrap();
        assert_eq!(metrics.iou, 1.0);
    }

    #[test]
    fn empty_prompt_set_gives_no_masks() {
        let img = GrayImage::new(10, 10);
        let (masks, failures) = segment(&img, &PromptSet::default(), &BoxFillSegmenter);
        assert!(masks.is_empty() && failures.is_empty());
    }

    #[test]
    fn threshold_segmenter_recovers_bright_rectangle() {
        // bright 40x20 rectangle on a dark field, loose prompt box
        let mut img = GrayImage::new(128, 96);
        let mut rng = Rng::new(17);
        for y in 0..96 {
            for x in 0..128 {
                img.set(x, y, 20 + rng.below(15) as u8);
            }
        }
        for y in 30..50 {
            for x in 40..80 {
                img.set(x, y, 200 + rng.below(30) as u8);
            }
        }
        let loose = PromptBox {
            x0: 34,
            y0: 24,
            x1: 88,
            y1: 58,
        };
        let prompts = PromptSet {
            boxes: vec![loose],
            clamped: 0,
        };
        let (masks, failures) = segment(&img, &prompts, &ThresholdSegmenter::default());
        assert!(failures.is_empty());
        let mut truth = MaskImage::new(128, 96);
        for y in 30..50 {
            for x in 40..80 {
                truth.set(x, y, 1);
            }
        }
        let metrics = mask_metrics(&masks[0], &truth).unwrap();
        assert!(metrics.iou >= 0.95, "iou {}", metrics.iou);
    }

    #[test]
    fn masks_stay_inside_dilated_prompts() {
        let mut rng = Rng::new(23);
        let scene = crate::raster::render_rect_scene(&mut rng, 64, 64, 10, 24);
        let norm = scene.truth.rescale(CoordSpace::Normalized).unwrap();
        let prompts = boxes_to_prompts(&[GeomBox::Horizontal(norm)], 64, 64);
        for segmenter in [
            &BoxFillSegmenter as &dyn Segmenter,
            &ThresholdSegmenter::default(),
        ] {
            let (masks, _) = segment(&scene.image, &prompts, segmenter);
            assert_eq!(masks.len(), prompts.boxes.len());
            let dilated = prompts.boxes[0].dilated(segmenter.dilation(), 64, 64);
            for y in 0..64 {
                for x in 0..64 {
                    if masks[0].get(x, y) > 0 {
                        assert!(dilated.contains(x, y), "pixel ({x},{y}) escaped prompt");
                    }
                }
            }
        }
    }

    #[test]
    fn segmentation_is_deterministic() {
        let mut rng = Rng::new(29);
        let scene = crate::raster::render_rect_scene(&mut rng, 48, 48, 10, 20);
        let norm = scene.truth.rescale(CoordSpace::Normalized).unwrap();
        let prompts = boxes_to_prompts(&[GeomBox::Horizontal(norm)], 48, 48);
        let (a, _) = segment(&scene.image, &prompts, &ThresholdSegmenter::default());
        let (b, _) = segment(&scene.image, &prompts, &ThresholdSegmenter::default());
        assert_eq!(a, b);
    }

    #[test]
    fn mask_pgm_round_trip() {
        let mut rng = Rng::new(31);
        let mut mask = MaskImage::new(17, 9);
        for y in 0..9 {
            for x in 0..17 {
                mask.set(x, y, (rng.below(2)) as u8);
            }
        }
        let bytes = mask.to_pgm();
        assert_eq!(MaskImage::from_pgm(&bytes).unwrap(), mask);
        // all-zero mask: header plus one byte per pixel
        let zero = MaskImage::new(10, 4);
        assert_eq!(zero.to_pgm().len(), "P5\n10 4\n255\n".len() + 40);
    }

    #[test]
    fn mask_metrics_examples() {
        let mut a = MaskImage::new(10, 10);
        let mut b = MaskImage::new(10, 10);
        // identical
        a.set(1, 1, 1);
        b.set(1, 1, 1);
        assert_eq!(mask_metrics(&a, &b).unwrap().iou, 1.0);

        // disjoint
        let mut c = MaskImage::new(10, 10);
        c.set(5, 5, 1);
        assert_eq!(mask_metrics(&a, &c).unwrap().iou, 0.0);

        // half-overlapping equal-area rectangles: IoU = 1/3
        let mut p = MaskImage::new(12, 4);
        let mut q = MaskImage::new(12, 4);
        for y in 0..2 {
            for x in 0..4 {
                p.set(x, y, 1); // [0,4) x [0,2)
                q.set(x + 2, y, 1); // [2,6) x [0,2)
            }
        }
        let m = mask_metrics(&p, &q).unwrap();
        assert!(crate::num::abs(m.iou - 1.0 / 3.0) < 1e-12);

        let other = MaskImage::new(5, 5);
        assert_eq!(mask_metrics(&a, &other), Err(SegError::DimensionMismatch));
    }
}
