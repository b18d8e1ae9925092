//! CT and slide preprocessing: mask dilation, VOI and patch cropping, unit
//! normalization, multi-magnification tiling and stain normalization.

mod volume;
mod wsi;

pub use volume::{crop_offsets, crop_voi, dilate_mask, extract_ct_patch, normalize_unit, Mask, Volume, VOLUME_MAGIC};
pub use wsi::{
    extract_wsi_patches, qualifying_tiles, upsample_image, upsample_roi, BagEntry, BagIndex, IdentityNormalizer,
    NormalizerKind, OdMatchNormalizer, OdStats, RgbImage, RoiMask, StainNormalizer, TileOptions, WsiPatch, BAG_INDEX,
};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::MagnificationLevel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub dilation_radius: usize,
    pub voi_extents: [usize; 3],
    pub ct_patch_extents: [usize; 3],
    pub magnifications: Vec<MagnificationLevel>,
    pub patch_side: usize,
    pub stride: usize,
    pub min_coverage: f64,
    pub bag_size: usize,
    pub normalizer: NormalizerKind,
    /// PPM whose optical-density statistics the slide patches are matched
    /// to; defaults to the first patch of the first paired case.
    pub stain_reference: Option<std::path::PathBuf>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            dilation_radius: 3,
            voi_extents: [40; 3],
            ct_patch_extents: [32; 3],
            magnifications: MagnificationLevel::ALL.to_vec(),
            patch_side: 64,
            stride: 64,
            min_coverage: 0.5,
            bag_size: 8,
            normalizer: NormalizerKind::OdMatch,
            stain_reference: None,
        }
    }
}

impl PreprocessConfig {
    pub fn paper() -> Self {
        PreprocessConfig {
            voi_extents: [256, 256, 128],
            ct_patch_extents: [112; 3],
            patch_side: 560,
            stride: 560,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| self.ct_patch_extents[a] > self.voi_extents[a] || self.ct_patch_extents[a] == 0) {
            return Err(Error::Config(format!(
                "CT patch {:?} does not fit in VOI {:?}",
                self.ct_patch_extents, self.voi_extents
            )));
        }
        if self.patch_side == 0 || self.stride == 0 || self.bag_size == 0 || self.magnifications.is_empty() {
            return Err(Error::Config(
                "patch side, stride, bag size and magnifications must be non-empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(Error::Config(format!(
                "min_coverage {} outside [0, 1]",
                self.min_coverage
            )));
        }
        Ok(())
    }

    pub fn tile_options(&self) -> TileOptions {
        TileOptions {
            patch_side: self.patch_side,
            stride: self.stride,
            min_coverage: self.min_coverage,
        }
    }
}

/// Dilate, crop the VOI, center-crop the CT patch and scale it to `[0, 1]`.
pub fn preprocess_ct(volume: &Volume, mask: &Mask, cfg: &PreprocessConfig) -> Result<Volume> {
    let dilated = dilate_mask(mask, cfg.dilation_radius)?;
    let voi = crop_voi(volume, &dilated, cfg.voi_extents)?;
    let mut patch = extract_ct_patch(&voi, cfg.ct_patch_extents)?;
    patch.values = normalize_unit(&patch.values);
    Ok(patch)
}

/// Draws up to `bag_size` tiles, cycling through magnification levels in
/// order and sampling each level without replacement.
pub fn sample_bag<R: Rng>(tiles: Vec<WsiPatch>, bag_size: usize, rng: &mut R) -> Vec<WsiPatch> {
    let mut levels: Vec<MagnificationLevel> = tiles.iter().map(|t| t.magnification).collect();
    levels.dedup();
    let mut queues: Vec<Vec<WsiPatch>> = levels
        .iter()
        .map(|&m| tiles.iter().filter(|t| t.magnification == m).cloned().collect())
        .collect();
    for q in &mut queues {
        q.shuffle(rng);
    }
    let mut bag = Vec::with_capacity(bag_size);
    while bag.len() < bag_size && queues.iter().any(|q| !q.is_empty()) {
        for q in &mut queues {
            if bag.len() == bag_size {
                break;
            }
            if let Some(t) = q.pop() {
                bag.push(t);
            }
        }
    }
    bag
}
