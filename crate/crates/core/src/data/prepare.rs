use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::{CaseRecord, Manifest, Stage, MANIFEST_FILE};
use super::synthetic::{ROI_FILE, SLIDE_FILE};
use crate::error::{Error, Result};
use crate::extractors::PatchBag;
use crate::preprocess::{
    extract_wsi_patches, preprocess_ct, sample_bag, BagEntry, BagIndex, IdentityNormalizer, Mask, NormalizerKind,
    OdMatchNormalizer, OdStats, PreprocessConfig, RgbImage, RoiMask, StainNormalizer, Volume, WsiPatch,
};
use crate::tensor::Tensor;

pub const BAG_SCHEMA_VERSION: u32 = 1;

/// Result of preprocessing a raw manifest: the cases that succeeded and a
/// diagnostic per case that failed.
#[derive(Debug)]
pub struct PrepareOutcome {
    pub manifest: Manifest,
    pub failures: Vec<(String, Error)>,
}

/// Runs the CT and slide chains for every case of a raw-stage manifest
/// stored in `in_dir`, writing patches, bags and a preprocessed manifest to
/// `out_dir`.
pub fn preprocess_dataset(
    manifest: &Manifest,
    in_dir: &Path,
    out_dir: &Path,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<PrepareOutcome> {
    cfg.validate()?;
    if manifest.stage != Stage::Raw {
        return Err(Error::Input("preprocess expects a raw-stage manifest".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if same_dir(in_dir, out_dir) {
        return Err(Error::Usage(
            "preprocess output directory must differ from the input directory".into(),
        ));
    }
    for sub in ["ct", "bags"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let normalizer: Box<dyn StainNormalizer + Sync> = match cfg.normalizer {
        NormalizerKind::Identity => Box::new(IdentityNormalizer),
        NormalizerKind::OdMatch => match stain_reference(manifest, in_dir, cfg)? {
            Some(reference) => Box::new(OdMatchNormalizer { reference }),
            None => Box::new(IdentityNormalizer),
        },
    };

    let results: Vec<(String, Result<CaseRecord>)> = manifest
        .cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let r = prepare_case(case, i, in_dir, out_dir, cfg, normalizer.as_ref(), seed);
            (case.case_id.clone(), r)
        })
        .collect();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(rec) => cases.push(rec),
            Err(e) => failures.push((id, e)),
        }
    }
    let out = Manifest::new(Stage::Preprocessed, cases);
    out.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(PrepareOutcome {
        manifest: out,
        failures,
    })
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn read_slide(dir: &Path) -> Result<(RgbImage, RoiMask)> {
    Ok((
        RgbImage::read_ppm(&dir.join(SLIDE_FILE))?,
        RoiMask::read(&dir.join(ROI_FILE))?,
    ))
}

fn slide_tiles(dir: &Path, cfg: &PreprocessConfig) -> Result<Vec<WsiPatch>> {
    let (img, roi) = read_slide(dir)?;
    extract_wsi_patches(&img, &roi, &cfg.magnifications, &cfg.tile_options())
}

fn stain_reference(manifest: &Manifest, in_dir: &Path, cfg: &PreprocessConfig) -> Result<Option<OdStats>> {
    if let Some(path) = &cfg.stain_reference {
        return Ok(Some(OdStats::of(&RgbImage::read_ppm(path)?)));
    }
    let mut paired: Vec<&CaseRecord> = manifest.paired().collect();
    paired.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    for case in paired {
        let dir = in_dir.join(case.wsi_patch_dir.as_ref().expect("paired case"));
        if let Ok(tiles) = slide_tiles(&dir, cfg) {
            return Ok(Some(OdStats::of(&tiles[0].image)));
        }
    }
    Ok(None)
}

fn prepare_case(
    case: &CaseRecord,
    index: usize,
    in_dir: &Path,
    out_dir: &Path,
    cfg: &PreprocessConfig,
    normalizer: &(dyn StainNormalizer + Sync),
    seed: u64,
) -> Result<CaseRecord> {
    let mask_rel = case
        .ct_mask_path
        .as_ref()
        .ok_or_else(|| Error::Input(format!("case {} has no CT mask", case.case_id)))?;
    let volume = Volume::read(&in_dir.join(&case.ct_path))?;
    let mask = Mask::read(&in_dir.join(mask_rel))?;
    let patch = preprocess_ct(&volume, &mask, cfg)?;
    let ct_path = PathBuf::from("ct").join(format!("{}.vol", case.case_id));
    patch.write(&out_dir.join(&ct_path))?;

    let wsi_patch_dir = match &case.wsi_patch_dir {
        None => None,
        Some(rel) => {
            let tiles = slide_tiles(&in_dir.join(rel), cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f));
            let bag = sample_bag(tiles, cfg.bag_size, &mut rng);
            let bag_rel = PathBuf::from("bags").join(&case.case_id);
            let dir = out_dir.join(&bag_rel);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut patches = Vec::with_capacity(bag.len());
            for (j, t) in bag.iter().enumerate() {
                let file = format!("p{j:02}.ppm");
                normalizer.normalize(&t.image).write_ppm(&dir.join(&file))?;
                patches.push(BagEntry {
                    file,
                    magnification: t.magnification,
                    x: t.x,
                    y: t.y,
                });
            }
            BagIndex {
                schema_version: BAG_SCHEMA_VERSION,
                case_id: case.case_id.clone(),
                patches,
            }
            .write(&dir)?;
            Some(bag_rel)
        }
    };
    Ok(CaseRecord {
        case_id: case.case_id.clone(),
        label: case.label,
        ct_path,
        ct_mask_path: None,
        wsi_patch_dir,
        center: case.center.clone(),
    })
}

/// A preprocessed case in model-ready form.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub case_id: String,
    pub target: f64,
    pub ct: Tensor,
    pub bag: Option<PatchBag>,
}

pub fn load_case(dir: &Path, case: &CaseRecord) -> Result<LoadedCase> {
    let ct = Volume::read(&dir.join(&case.ct_path))?.to_tensor();
    let bag = match &case.wsi_patch_dir {
        None => None,
        Some(rel) => {
            let bag_dir = dir.join(rel);
            let index = BagIndex::read(&bag_dir)?;
            let mut patches = Vec::with_capacity(index.patches.len());
            let mut mags = Vec::with_capacity(index.patches.len());
            for e in &index.patches {
                patches.push(RgbImage::read_ppm(&bag_dir.join(&e.file))?.to_tensor());
                mags.push(e.magnification);
            }
            Some(PatchBag::new(case.case_id.clone(), patches, mags)?)
        }
    };
    Ok(LoadedCase {
        case_id: case.case_id.clone(),
        target: case.label.target(),
        ct,
        bag,
    })
}

/// Loads every case of a preprocessed manifest, in manifest order.
pub fn load_dataset(manifest: &Manifest, dir: &Path) -> Result<Vec<LoadedCase>> {
    if manifest.stage != Stage::Preprocessed {
        return Err(Error::Input("expected a preprocessed manifest".into()));
    }
    manifest.cases.par_iter().map(|c| load_case(dir, c)).collect()
}
