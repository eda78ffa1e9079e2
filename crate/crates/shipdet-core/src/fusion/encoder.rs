//! Frozen visual encoding: a deterministic random patch projection standing
//! in for a pretrained backbone, the image pyramid, and scale/channel
//! concatenation with the learned projection to model dimension.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::raster::GrayImage;
use crate::rng::Rng;

use super::FusionError;

/// Which of the two stand-in backbones produced a token set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneTag {
    A,
    B,
}

/// Tokens from one backbone at one pyramid scale.
#[derive(Clone, Debug)]
pub struct FeatureTokens {
    pub tokens: Mat,
    pub scale_index: usize,
    pub backbone: BackboneTag,
}

/// A deterministic, frozen map from image patches to feature tokens: a fixed
/// seeded random projection of flattened patch pixels. Never updated by
/// training; identical (image, seed) pairs give bitwise-identical tokens.
#[derive(Clone, Debug)]
pub struct EncoderStandIn {
    weight: Mat, // out_dim x patch^2
    patch: u32,
    out_dim: usize,
}

impl EncoderStandIn {
    pub fn new(seed: u64, label: &str, patch: u32, out_dim: usize) -> Self {
        let mut rng = Rng::from_label(seed, label);
        let inputs = (patch * patch) as usize;
        let std = 1.0 / crate::num::sqrt(inputs as f64);
        EncoderStandIn {
            weight: Mat::randn(out_dim, inputs, std, &mut rng),
            patch,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn patch(&self) -> u32 {
        self.patch
    }

    /// Token count for an image of the given size: floor(w/p) * floor(h/p),
    /// with undersized images resampled up to a single patch.
    pub fn token_count(&self, width: u32, height: u32) -> usize {
        let gw = (width / self.patch).max(1) as usize;
        let gh = (height / self.patch).max(1) as usize;
        if width < self.patch || height < self.patch {
            1
        } else {
            gw * gh
        }
    }

    /// Encodes non-overlapping patches in row-major order.
    pub fn encode(&self, image: &GrayImage) -> Mat {
        let img = if image.width() < self.patch || image.height() < self.patch {
            image.resample_nearest(self.patch, self.patch)
        } else {
            image.clone()
        };
        let gw = img.width() / self.patch;
        let gh = img.height() / self.patch;
        let p = self.patch as usize;
        let mut tokens = Mat::zeros((gw * gh) as usize, self.out_dim);
        let mut patch_vec = alloc::vec![0.0f64; p * p];
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        let v = img.get(gx * self.patch + dx, gy * self.patch + dy);
                        patch_vec[(dy * self.patch + dx) as usize] = f64::from(v) / 255.0;
                    }
                }
                let row = (gy * gw + gx) as usize;
                for o in 0..self.out_dim {
                    let mut acc = 0.0;
                    let wrow = self.weight.row(o);
                    for (w, x) in wrow.iter().zip(&patch_vec) {
                        acc += w * x;
                    }
                    tokens.set(row, o, acc);
                }
            }
        }
        tokens
    }
}

/// Runs one backbone over a downsampling pyramid: scale 0 is the input
/// image, each further scale halves both dimensions.
pub fn encode_image_multiscale(
    image: &GrayImage,
    encoder: &EncoderStandIn,
    scale_count: usize,
    backbone: BackboneTag,
) -> Vec<FeatureTokens> {
    assert!(scale_count >= 1, "need at least one scale");
    let mut out = Vec::with_capacity(scale_count);
    let mut current = image.clone();
    for scale_index in 0..scale_count {
        if scale_index > 0 {
            current = current.downsample_2x();
        }
        out.push(FeatureTokens {
            tokens: encoder.encode(&current),
            scale_index,
            backbone,
        });
    }
    out
}

/// Concatenates per-scale tokens along the token axis.
pub fn concat_scales(features: &[FeatureTokens]) -> Result<Mat, FusionError> {
    if features.is_empty() {
        return Err(FusionError::ShapeMismatch(String::from(
            "no feature tokens to concatenate",
        )));
    }
    let dim = features[0].tokens.cols();
    if features.iter().any(|f| f.tokens.cols() != dim) {
        return Err(FusionError::ShapeMismatch(String::from(
            "feature dimensions differ across scales",
        )));
    }
    let total: usize = features.iter().map(|f| f.tokens.rows()).sum();
    let mut out = Mat::zeros(total, dim);
    let mut row = 0;
    for f in features {
        for r in 0..f.tokens.rows() {
            out.row_mut(row).copy_from_slice(f.tokens.row(r));
            row += 1;
        }
    }
    Ok(out)
}

/// Channel-wise concatenation of the two backbones' multi-scale features
/// followed by the learned linear projection to model dimension. Token
/// counts must agree; the output keeps the token count.
pub fn fuse_and_project(f_v: &Mat, g_v: &Mat, projection: &Mat) -> Result<Mat, FusionError> {
    let fused = concat_channels(f_v, g_v)?;
    if projection.cols() != fused.cols() {
        return Err(FusionError::ShapeMismatch(format!(
            "projection expects {} channels, fused features have {}",
            projection.cols(),
            fused.cols()
        )));
    }
    Ok(fused.matmul_transb(projection))
}

pub(super) fn concat_channels(f_v: &Mat, g_v: &Mat) -> Result<Mat, FusionError> {
    if f_v.rows() != g_v.rows() {
        return Err(FusionError::ShapeMismatch(format!(
            "token counts differ: {} vs {}",
            f_v.rows(),
            g_v.rows()
        )));
    }
    let mut fused = Mat::zeros(f_v.rows(), f_v.cols() + g_v.cols());
    for r in 0..f_v.rows() {
        let row = fused.row_mut(r);
        row[..f_v.cols()].copy_from_slice(f_v.row(r));
        row[f_v.cols()..].copy_from_slice(g_v.row(r));
    }
    Ok(fused)
}
