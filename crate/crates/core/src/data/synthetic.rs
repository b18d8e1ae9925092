use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CaseRecord, Manifest, Stage, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::preprocess::{Mask, RgbImage, RoiMask, Volume};
use crate::types::Subtype;

/// Number of latent texture coefficients per modality.
pub const LATENT_DIM: usize = 8;

const CT_FREQS: [[f64; 3]; LATENT_DIM] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [2.0, 0.0, 0.0],
];

const SLIDE_FREQS: [[f64; 2]; LATENT_DIM] = [
    [1.0, 0.0],
    [0.0, 1.0],
    [1.0, 1.0],
    [1.0, -1.0],
    [2.0, 0.0],
    [0.0, 2.0],
    [2.0, 1.0],
    [1.0, 2.0],
];

// Ruifrok-Johnston optical density vectors for hematoxylin and eosin.
const OD_H: [f64; 3] = [0.650, 0.704, 0.286];
const OD_E: [f64; 3] = [0.072, 0.990, 0.105];

pub const SLIDE_FILE: &str = "slide.ppm";
pub const ROI_FILE: &str = "roi.vol";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGenConfig {
    /// Paired cases per class.
    pub n_paired: usize,
    /// CT-only cases per class.
    pub n_ct_only: usize,
    pub volume_extents: [usize; 3],
    /// Extents of the textured block around the tumor center; the CT patch
    /// taken by preprocessing should fit inside it.
    pub patch_extents: [usize; 3],
    pub slide_extents: [usize; 2],
    /// Voxel period of the CT texture; should divide the token patch size.
    pub ct_period: usize,
    /// Pixel period of the slide texture at base magnification.
    pub slide_period: usize,
    pub signal_strength: f64,
    pub cross_modal_rho: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        SyntheticGenConfig {
            n_paired: 30,
            n_ct_only: 20,
            volume_extents: [48; 3],
            patch_extents: [32; 3],
            slide_extents: [192, 192],
            ct_period: 8,
            slide_period: 16,
            signal_strength: 1.5,
            cross_modal_rho: 0.8,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cross_modal_rho) {
            return Err(Error::Config(format!(
                "cross_modal_rho {} outside [0, 1]",
                self.cross_modal_rho
            )));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !self.signal_strength.is_finite() {
            return Err(Error::Config(
                "noise_sigma must be >= 0 and signal_strength finite".into(),
            ));
        }
        if self.ct_period == 0 || self.slide_period == 0 {
            return Err(Error::Config("texture periods must be positive".into()));
        }
        for a in 0..3 {
            if self.patch_extents[a] + 8 > self.volume_extents[a] {
                return Err(Error::Config(format!(
                    "textured block {:?} needs a margin of 4 voxels inside volume {:?}",
                    self.patch_extents, self.volume_extents
                )));
            }
        }
        if self.slide_extents.iter().any(|&e| e < 64) {
            return Err(Error::Config(format!(
                "slide extents {:?} below 64 pixels",
                self.slide_extents
            )));
        }
        Ok(())
    }

    pub fn n_cases(&self) -> usize {
        2 * (self.n_paired + self.n_ct_only)
    }

    /// Paired cases come first; labels alternate LUAD, LUSC.
    pub fn case_layout(&self, index: usize) -> (String, Subtype, bool) {
        let id = format!("case{index:04}");
        let label = Subtype::from_positive(index % 2 == 1);
        (id, label, index < 2 * self.n_paired)
    }
}

/// Texture coefficients of one case before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseLatents {
    pub label: Subtype,
    pub ct: [f64; LATENT_DIM],
    pub path: [f64; LATENT_DIM],
}

/// Unit class direction shared by every case of a dataset.
pub fn class_direction(seed: u64) -> [f64; LATENT_DIM] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_5d1e);
    loop {
        let v: [f64; LATENT_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mixed = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn normals<R: Rng>(rng: &mut R) -> [f64; LATENT_DIM] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// `signal · (±μ) + rho · u + (1 − rho) · v` for each modality, with `u`
/// shared across modalities and `v` drawn per modality.
pub fn case_latents(cfg: &SyntheticGenConfig, index: usize) -> CaseLatents {
    let (_, label, _) = cfg.case_layout(index);
    let mu = class_direction(cfg.seed);
    let sign = if label.is_positive() { 1.0 } else { -1.0 };
    let mut rng = case_rng(cfg.seed, index);
    let u = normals(&mut rng);
    let v_ct = normals(&mut rng);
    let v_path = normals(&mut rng);
    let rho = cfg.cross_modal_rho;
    let mix = |v: &[f64; LATENT_DIM]| {
        std::array::from_fn(|k| cfg.signal_strength * sign * mu[k] + rho * u[k] + (1.0 - rho) * v[k])
    };
    CaseLatents {
        label,
        ct: mix(&v_ct),
        path: mix(&v_path),
    }
}

/// CT texture basis `k` at offset `d` from the tumor center.
pub fn ct_basis(k: usize, d: [f64; 3], period: usize) -> f64 {
    let f = CT_FREQS[k];
    (2.0 * PI * (f[0] * d[0] + f[1] * d[1] + f[2] * d[2]) / period as f64).cos()
}

/// Slide texture basis `k` at pixel `(x, y)` of the base image.
pub fn slide_basis(k: usize, x: f64, y: f64, period: usize) -> f64 {
    let f = SLIDE_FREQS[k];
    (2.0 * PI * (f[0] * x + f[1] * y) / period as f64).cos()
}

fn texture(coef: &[f64; LATENT_DIM], basis: impl Fn(usize) -> f64) -> f64 {
    (0..LATENT_DIM).map(|k| coef[k] * basis(k)).sum::<f64>() / (LATENT_DIM as f64).sqrt()
}

/// One generated case in memory.
#[derive(Clone, Debug)]
pub struct RawCase {
    pub case_id: String,
    pub label: Subtype,
    pub volume: Volume,
    pub mask: Mask,
    pub slide: Option<(RgbImage, RoiMask)>,
}

pub fn generate_case(cfg: &SyntheticGenConfig, index: usize) -> RawCase {
    let (case_id, label, paired) = cfg.case_layout(index);
    let lat = case_latents(cfg, index);
    // Independent stream for geometry and noise so latents stay comparable.
    let mut rng = case_rng(cfg.seed ^ 0x6e01_5e00, index);

    let ext = cfg.volume_extents;
    let half = cfg.patch_extents.map(|p| p / 2 + 2);
    let center: [usize; 3] = std::array::from_fn(|a| {
        let lo = half[a].max(ext[a] / 2 - 4.min(ext[a] / 2));
        let hi = (ext[a] - half[a]).min(ext[a] / 2 + 4).max(lo);
        rng.random_range(lo..=hi)
    });
    let radius = (cfg.patch_extents.iter().copied().min().unwrap_or(8) as f64 / 4.0).max(1.0);
    let mut values = Vec::with_capacity(ext.iter().product());
    let mut mask = Mask::empty(ext);
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            for z in 0..ext[2] {
                let d = [x, y, z].map(|v| v as f64);
                let d = [
                    d[0] - center[0] as f64,
                    d[1] - center[1] as f64,
                    d[2] - center[2] as f64,
                ];
                let inside = (0..3).all(|a| d[a].abs() <= half[a] as f64);
                let noise: f64 = rng.sample(StandardNormal);
                let v = if inside {
                    40.0 + 100.0 * (texture(&lat.ct, |k| ct_basis(k, d, cfg.ct_period)) + cfg.noise_sigma * noise)
                } else {
                    -100.0 + 100.0 * cfg.noise_sigma * noise
                };
                values.push(v as f32);
                if d.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    let volume = Volume {
        extents: ext,
        spacing: [1.0; 3],
        values,
    };
    let slide = paired.then(|| render_slide(cfg, &lat, &mut rng));
    RawCase {
        case_id,
        label,
        volume,
        mask,
        slide,
    }
}

fn render_slide(cfg: &SyntheticGenConfig, lat: &CaseLatents, rng: &mut ChaCha8Rng) -> (RgbImage, RoiMask) {
    let [w, h] = cfg.slide_extents;
    let r = (w.min(h) as f64) / 3.0;
    let jitter = (w.min(h) / 24).max(1) as i64;
    let cx = (w / 2) as f64 + rng.random_range(-jitter..=jitter) as f64;
    let cy = (h / 2) as f64 + rng.random_range(-jitter..=jitter) as f64;
    let mut data = Vec::with_capacity(w * h * 3);
    let mut roi = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let inside = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let (ch, ce) = if inside {
                let t = texture(&lat.path, |k| slide_basis(k, x as f64, y as f64, cfg.slide_period));
                (
                    (0.6 + 0.25 * (t + cfg.noise_sigma * n1)).max(0.0),
                    (0.4 - 0.15 * (t + cfg.noise_sigma * n2)).max(0.0),
                )
            } else {
                (
                    0.03 + 0.01 * cfg.noise_sigma * n1.abs(),
                    0.03 + 0.01 * cfg.noise_sigma * n2.abs(),
                )
            };
            for c in 0..3 {
                let od = ch * OD_H[c] + ce * OD_E[c];
                data.push((256.0 * (-od).exp() - 1.0).round().clamp(0.0, 255.0) as u8);
            }
            roi.push(inside);
        }
    }
    (
        RgbImage {
            width: w,
            height: h,
            data,
        },
        RoiMask {
            width: w,
            height: h,
            pixels: roi,
        },
    )
}

/// Writes every case under `out_dir` and returns the raw-stage manifest,
/// which is also written to `out_dir/manifest.json`.
pub fn generate_synthetic_dataset(cfg: &SyntheticGenConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for sub in ["ct", "wsi"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cases: Vec<CaseRecord> = (0..cfg.n_cases())
        .into_par_iter()
        .map(|i| write_case(&generate_case(cfg, i), out_dir))
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(Stage::Raw, cases);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn write_case(case: &RawCase, out_dir: &Path) -> Result<CaseRecord> {
    let ct_path = PathBuf::from("ct").join(format!("{}.vol", case.case_id));
    let mask_path = PathBuf::from("ct").join(format!("{}_mask.vol", case.case_id));
    case.volume.write(&out_dir.join(&ct_path))?;
    case.mask.write(&out_dir.join(&mask_path))?;
    let wsi_patch_dir = match &case.slide {
        Some((img, roi)) => {
            let rel = PathBuf::from("wsi").join(&case.case_id);
            let dir = out_dir.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            img.write_ppm(&dir.join(SLIDE_FILE))?;
            roi.write(&dir.join(ROI_FILE))?;
            Some(rel)
        }
        None => None,
    };
    Ok(CaseRecord {
        case_id: case.case_id.clone(),
        label: case.label,
        ct_path,
        ct_mask_path: Some(mask_path),
        wsi_patch_dir,
        center: "synthetic".into(),
    })
}
