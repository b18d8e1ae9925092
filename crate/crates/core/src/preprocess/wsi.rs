use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::MagnificationLevel;
use crate::tensor::Tensor;

/// 8-bit RGB raster, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height || width == 0 || height == 0 {
            return Err(Error::Input(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut data = Vec::with_capacity(3 * w * h);
        for y in y0..y0 + h {
            let o = 3 * (y * self.width + x0);
            data.extend_from_slice(&self.data[o..o + 3 * w]);
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }

    /// Channel-first `3×H×W` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, r) = (i / (w * h), i % (w * h));
            f64::from(self.data[3 * r + c]) / 255.0
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.data);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_ppm(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("missing P6 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    if fields[2] != 255 {
        return Err(format!("unsupported max value {}", fields[2]));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let payload = &bytes[pos..];
    if payload.len() != 3 * w * h {
        return Err(format!(
            "{w}×{h} image needs {} bytes, found {}",
            3 * w * h,
            payload.len()
        ));
    }
    RgbImage::new(w, h, payload.to_vec()).map_err(|e| e.to_string())
}

/// 2D binary region of interest over a slide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl RoiMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_image(img: &RgbImage, ratio: usize) -> RgbImage {
    if ratio == 1 {
        return img.clone();
    }
    let (w, h) = (img.width * ratio, img.height * ratio);
    let mut data = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&img.pixel(x / ratio, y / ratio));
        }
    }
    RgbImage {
        width: w,
        height: h,
        data,
    }
}

pub fn upsample_roi(roi: &RoiMask, ratio: usize) -> RoiMask {
    let (w, h) = (roi.width * ratio, roi.height * ratio);
    let pixels = (0..w * h).map(|i| roi.get((i % w) / ratio, (i / w) / ratio)).collect();
    RoiMask {
        width: w,
        height: h,
        pixels,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WsiPatch {
    pub image: RgbImage,
    pub magnification: MagnificationLevel,
    /// Top-left corner in the resampled slide.
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileOptions {
    pub patch_side: usize,
    pub stride: usize,
    /// Minimum fraction of tile pixels inside the ROI.
    pub min_coverage: f64,
}

/// Upper-left corners of every tile whose ROI coverage reaches the threshold.
pub fn qualifying_tiles(roi: &RoiMask, opts: &TileOptions) -> Vec<(usize, usize)> {
    let s = opts.patch_side;
    if s == 0 || opts.stride == 0 || s > roi.width || s > roi.height {
        return Vec::new();
    }
    // summed-area table for O(1) coverage per tile
    let (w, h) = (roi.width, roi.height);
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                usize::from(roi.get(x, y)) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
        }
    }
    let need = opts.min_coverage * (s * s) as f64;
    let mut out = Vec::new();
    for y in (0..=h - s).step_by(opts.stride) {
        for x in (0..=w - s).step_by(opts.stride) {
            let c = sat[(y + s) * (w + 1) + x + s] + sat[y * (w + 1) + x]
                - sat[y * (w + 1) + x + s]
                - sat[(y + s) * (w + 1) + x];
            if c as f64 >= need {
                out.push((x, y));
            }
        }
    }
    out
}

/// Resamples the slide per magnification and keeps ROI-covered tiles,
/// sorted by (magnification, y, x).
pub fn extract_wsi_patches(
    image: &RgbImage,
    roi: &RoiMask,
    magnifications: &[MagnificationLevel],
    opts: &TileOptions,
) -> Result<Vec<WsiPatch>> {
    if roi.width != image.width || roi.height != image.height {
        return Err(Error::Input("ROI and slide extents differ".into()));
    }
    if roi.count() == 0 {
        return Err(Error::Input("empty ROI".into()));
    }
    let mut levels: Vec<MagnificationLevel> = magnifications.to_vec();
    levels.sort();
    levels.dedup();
    let mut out = Vec::new();
    for mag in levels {
        let r = mag.ratio();
        let roi_r = upsample_roi(roi, r);
        let tiles = qualifying_tiles(&roi_r, opts);
        if tiles.is_empty() {
            continue;
        }
        let img_r = upsample_image(image, r);
        for (x, y) in tiles {
            out.push(WsiPatch {
                image: img_r.crop(x, y, opts.patch_side, opts.patch_side),
                magnification: mag,
                x,
                y,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Input(
            "no tile reaches the ROI coverage threshold at any magnification".into(),
        ));
    }
    Ok(out)
}

/// Per-channel mean and standard deviation of optical density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn od(v: u8) -> f64 {
    -((f64::from(v) + 1.0) / 256.0).ln()
}

fn from_od(d: f64) -> u8 {
    (256.0 * (-d).exp() - 1.0).round().clamp(0.0, 255.0) as u8
}

impl OdStats {
    pub fn of(img: &RgbImage) -> Self {
        let n = (img.width * img.height) as f64;
        let mut mean = [0.0; 3];
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                mean[c] += od(px[c]);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 3];
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                var[c] += (od(px[c]) - mean[c]).powi(2);
            }
        }
        OdStats {
            mean,
            std: var.map(|v| (v / n).sqrt()),
        }
    }
}

/// Stain normalizer interface; a structure-preserving method can implement it.
pub trait StainNormalizer {
    fn normalize(&self, patch: &RgbImage) -> RgbImage;
}

pub struct IdentityNormalizer;

impl StainNormalizer for IdentityNormalizer {
    fn normalize(&self, patch: &RgbImage) -> RgbImage {
        patch.clone()
    }
}

/// Matches per-channel optical-density mean and standard deviation to a
/// reference. A channel without variance is only shifted.
pub struct OdMatchNormalizer {
    pub reference: OdStats,
}

impl StainNormalizer for OdMatchNormalizer {
    fn normalize(&self, patch: &RgbImage) -> RgbImage {
        let src = OdStats::of(patch);
        let gain: [f64; 3] = std::array::from_fn(|c| {
            if src.std[c] > 1e-12 {
                self.reference.std[c] / src.std[c]
            } else {
                1.0
            }
        });
        let data = patch
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                let g = &gain;
                (0..3).map(move |c| from_od((od(px[c]) - src.mean[c]) * g[c] + self.reference.mean[c]))
            })
            .collect();
        RgbImage {
            width: patch.width,
            height: patch.height,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    Identity,
    #[default]
    OdMatch,
}

/// One entry of a bag directory's `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub file: String,
    pub magnification: MagnificationLevel,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagIndex {
    pub schema_version: u32,
    pub case_id: String,
    pub patches: Vec<BagEntry>,
}

pub const BAG_INDEX: &str = "index.json";

impl BagIndex {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(BAG_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(BAG_INDEX);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

impl RoiMask {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Input(format!(
                "{width}×{height} ROI needs {} pixels",
                width * height
            )));
        }
        Ok(RoiMask { width, height, pixels })
    }

    /// Stored in the mask container with extents `(height, width, 1)`.
    pub fn write(&self, path: &Path) -> Result<()> {
        super::Mask::new([self.height, self.width, 1], self.pixels.clone())?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m = super::Mask::read(path)?;
        if m.extents[2] != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("ROI mask must have a single slice, got extents {:?}", m.extents),
            });
        }
        RoiMask::new(m.extents[1], m.extents[0], m.voxels)
    }
}
