//! 8-bit grayscale rasters, binary PGM (P5) encoding, and synthetic scene
//! rendering.
//!
//! PGM is the toolkit's only raster container: byte-exact, trivially
//! specifiable, no codec dependency. Input imagery, mask output, and the
//! procedurally rendered training scenes all use it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::HBox;
use crate::geometry::CoordSpace;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

/// PGM decode failures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PgmError {
    /// Magic number is not `P5`.
    BadMagic,
    /// Header fields missing or unparseable.
    BadHeader(String),
    /// Only `maxval = 255` rasters are supported.
    UnsupportedMaxval(u32),
    /// Pixel payload shorter than `width * height`.
    Truncated,
}

impl core::fmt::Display for PgmError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PgmError::BadMagic => write!(f, "not a binary PGM (P5) file"),
            PgmError::BadHeader(msg) => write!(f, "malformed PGM header: {msg}"),
            PgmError::UnsupportedMaxval(v) => write!(f, "unsupported PGM maxval {v}"),
            PgmError::Truncated => write!(f, "PGM pixel data truncated"),
        }
    }
}

impl core::error::Error for PgmError {}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = v;
    }

    /// Fills pixels with x in [x0, x1) and y in [y0, y1), clamped to bounds.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, v: u8) {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        for y in y0.min(y1)..y1 {
            for x in x0.min(x1)..x1 {
                self.set(x, y, v);
            }
        }
    }

    /// Halves both dimensions by averaging 2x2 blocks (floor division; odd
    /// trailing rows/columns are dropped).
    pub fn downsample_2x(&self) -> GrayImage {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut out = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x * 2, y * 2);
                let mut sum = 0u32;
                let mut cnt = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (px, py) = (sx + dx, sy + dy);
                        if px < self.width && py < self.height {
                            sum += u32::from(self.get(px, py));
                            cnt += 1;
                        }
                    }
                }
                out.set(x, y, (sum / cnt) as u8);
            }
        }
        out
    }

    /// Nearest-neighbor resample to the given size.
    pub fn resample_nearest(&self, width: u32, height: u32) -> GrayImage {
        let mut out = GrayImage::new(width.max(1), height.max(1));
        for y in 0..out.height {
            for x in 0..out.width {
                let sx = (u64::from(x) * u64::from(self.width) / u64::from(out.width)) as u32;
                let sy = (u64::from(y) * u64::from(self.height) / u64::from(out.height)) as u32;
                out.set(x, y, self.get(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        out
    }

    /// Crops [x0, x1) x [y0, y1), clamped to bounds; empty crops become 1x1.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> GrayImage {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        let x0 = x0.min(x1);
        let y0 = y0.min(y1);
        let w = (x1 - x0).max(1);
        let h = (y1 - y0).max(1);
        let mut out = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if x0 + x < x1 && y0 + y < y1 {
                    out.set(x, y, self.get(x0 + x, y0 + y));
                }
            }
        }
        out
    }
}

/// Encodes as binary PGM: `P5\n<w> <h>\n255\n` followed by one byte per pixel.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Decodes binary PGM. Accepts comment lines (`#`) and arbitrary whitespace
/// in the header; requires maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let (w, h, offset) = parse_pgm_header(bytes)?;
    let n = w as usize * h as usize;
    if bytes.len() < offset + n {
        return Err(PgmError::Truncated);
    }
    Ok(GrayImage::from_pixels(w, h, bytes[offset..offset + n].to_vec()))
}

/// Reads only the dimensions from a PGM header.
pub fn pgm_dimensions(bytes: &[u8]) -> Result<(u32, u32), PgmError> {
    let (w, h, _) = parse_pgm_header(bytes)?;
    Ok((w, h))
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(u32, u32, usize), PgmError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::BadHeader(String::from("missing numeric field")));
        }
        let text = core::str::from_utf8(&bytes[start..pos])
            .map_err(|_| PgmError::BadHeader(String::from("non-ascii field")))?;
        *field = text
            .parse::<u32>()
            .map_err(|_| PgmError::BadHeader(String::from("field out of range")))?;
    }
    if fields[2] != 255 {
        return Err(PgmError::UnsupportedMaxval(fields[2]));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(PgmError::BadHeader(String::from("zero dimension")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::BadHeader(String::from("missing payload separator")));
    }
    Ok((fields[0], fields[1], pos + 1))
}

/// A procedurally rendered scene: one bright rectangle ("ship") on a dark
/// noisy field, plus its pixel-space ground-truth box.
#[derive(Clone, Debug)]
pub struct RectScene {
    pub image: GrayImage,
    pub truth: HBox,
}

/// Renders a dark field with mild noise and one bright rectangle whose side
/// lengths are drawn from [min_side, max_side]. Deterministic per RNG state.
pub fn render_rect_scene(
    rng: &mut Rng,
    width: u32,
    height: u32,
    min_side: u32,
    max_side: u32,
) -> RectScene {
    let mut img = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            img.set(x, y, 18 + rng.below(20) as u8);
        }
    }
    let w = min_side + rng.below((max_side - min_side + 1) as usize) as u32;
    let h = min_side + rng.below((max_side - min_side + 1) as usize) as u32;
    let x0 = 1 + rng.below((width - w - 1) as usize) as u32;
    let y0 = 1 + rng.below((height - h - 1) as usize) as u32;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.set(x, y, 195 + rng.below(40) as u8);
        }
    }
    let space = CoordSpace::Pixel { width, height };
    let truth = HBox::new(
        f64::from(x0),
        f64::from(y0),
        f64::from(x0 + w),
        f64::from(y0 + h),
        space,
    )
    .expect("rendered rectangle is a valid box");
    RectScene { image: img, truth }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_bitwise() {
        let mut rng = Rng::new(5);
        let mut img = GrayImage::new(13, 7);
        for y in 0..7 {
            for x in 0..13 {
                img.set(x, y, rng.below(256) as u8);
            }
        }
        let bytes = encode_pgm(&img);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_size_is_header_plus_payload() {
        let img = GrayImage::new(10, 4);
        let bytes = encode_pgm(&img);
        assert_eq!(bytes.len(), "P5\n10 4\n255\n".len() + 40);
    }

    #[test]
    fn foreign_magic_rejected() {
        assert_eq!(decode_pgm(b"P6\n2 2\n255\n aaaa"), Err(PgmError::BadMagic));
        assert_eq!(decode_pgm(b"JUNK"), Err(PgmError::BadMagic));
    }

    #[test]
    fn header_with_comment_accepted() {
        let bytes = b"P5\n# made elsewhere\n2 2\n255\n\x01\x02\x03\x04";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[1, 2, 3, 4]);
    }

    #[test]
    fn downsample_halves_dimensions() {
        let mut img = GrayImage::new(8, 6);
        img.fill_rect(0, 0, 8, 6, 100);
        let half = img.downsample_2x();
        assert_eq!((half.width(), half.height()), (4, 3));
        assert_eq!(half.get(2, 1), 100);
    }

    #[test]
    fn scene_truth_inside_image() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let scene = render_rect_scene(&mut rng, 32, 32, 8, 16);
            assert!(scene.truth.x_max() <= 32.0 && scene.truth.y_max() <= 32.0);
            let cx = (scene.truth.x_min() + scene.truth.x_max()) / 2.0;
            let cy = (scene.truth.y_min() + scene.truth.y_max()) / 2.0;
            assert!(scene.image.get(cx as u32, cy as u32) >= 195);
        }
    }
}
