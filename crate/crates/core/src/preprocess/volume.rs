use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"CCDCVOL1";

/// A scalar 3D image stored `x`-major (row-major over `(X, Y, Z)`).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        if values.len() != extents.iter().product::<usize>() {
            return Err(Error::Input(format!(
                "volume extents {extents:?} need {} values, got {}",
                extents.iter().product::<usize>(),
                values.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Input(format!("volume spacing {spacing:?} must be positive")));
        }
        Ok(Volume {
            extents,
            spacing,
            values,
        })
    }

    pub fn filled(extents: [usize; 3], value: f32) -> Self {
        Volume {
            extents,
            spacing: [1.0; 3],
            values: vec![value; extents.iter().product()],
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&self.extents, |i| f64::from(self.values[i]))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 12 + 24 + 4 * self.values.len());
        buf.extend_from_slice(VOLUME_MAGIC);
        for &e in &self.extents {
            let e = u32::try_from(e).map_err(|_| Error::Input(format!("extent {e} exceeds u32")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &s in &self.spacing {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
            return Err(bad("missing CCDCVOL1 magic".into()));
        }
        if bytes.len() < 44 {
            return Err(bad("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let extents = [u32_at(8), u32_at(12), u32_at(16)];
        let spacing = [f64_at(20), f64_at(28), f64_at(36)];
        let n: usize = extents.iter().product();
        if bytes.len() != 44 + 4 * n {
            return Err(bad(format!(
                "extents {extents:?} need {} payload bytes, found {}",
                4 * n,
                bytes.len() - 44
            )));
        }
        let values = bytes[44..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Volume::new(extents, spacing, values).map_err(|e| bad(e.to_string()))
    }
}

/// Binary voxel mask over a volume grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub voxels: Vec<bool>,
}

impl Mask {
    pub fn new(extents: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != extents.iter().product::<usize>() {
            return Err(Error::Input(format!(
                "mask extents {extents:?} do not match {} voxels",
                voxels.len()
            )));
        }
        Ok(Mask { extents, voxels })
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Mask {
            extents,
            voxels: vec![false; extents.iter().product()],
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    /// Mean foreground coordinate, each axis rounded to the nearest voxel.
    pub fn centroid(&self) -> Option<[usize; 3]> {
        let mut sum = [0f64; 3];
        let mut n = 0usize;
        for x in 0..self.extents[0] {
            for y in 0..self.extents[1] {
                for z in 0..self.extents[2] {
                    if self.get(x, y, z) {
                        sum[0] += x as f64;
                        sum[1] += y as f64;
                        sum[2] += z as f64;
                        n += 1;
                    }
                }
            }
        }
        (n > 0).then(|| sum.map(|s| (s / n as f64).round() as usize))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let values = self.voxels.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Volume::new(self.extents, [1.0; 3], values)?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let v = Volume::read(path)?;
        let mut voxels = Vec::with_capacity(v.values.len());
        for &x in &v.values {
            match x {
                0.0 => voxels.push(false),
                1.0 => voxels.push(true),
                other => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("mask value {other} is not 0 or 1"),
                    })
                }
            }
        }
        Mask::new(v.extents, voxels)
    }
}

/// Dilation by a `(2r+1)³` cube, clipped at the grid boundary.
pub fn dilate_mask(mask: &Mask, radius: usize) -> Result<Mask> {
    if mask.count() == 0 {
        return Err(Error::Input("cannot dilate an empty mask".into()));
    }
    let mut cur = mask.clone();
    // the cube is separable: one running max per axis
    for axis in 0..3 {
        let mut next = Mask::empty(mask.extents);
        let ext = mask.extents;
        for x in 0..ext[0] {
            for y in 0..ext[1] {
                for z in 0..ext[2] {
                    let c = [x, y, z][axis];
                    let lo = c.saturating_sub(radius);
                    let hi = (c + radius).min(ext[axis] - 1);
                    let hit = (lo..=hi).any(|k| {
                        let mut p = [x, y, z];
                        p[axis] = k;
                        cur.get(p[0], p[1], p[2])
                    });
                    if hit {
                        next.set(x, y, z, true);
                    }
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Start offsets of a `target` crop centered at `center`: `center - target/2`.
pub fn crop_offsets(center: [usize; 3], target: [usize; 3]) -> [i64; 3] {
    [0, 1, 2].map(|a| center[a] as i64 - (target[a] / 2) as i64)
}

/// Crop of `target` extents centered on the mask centroid; voxels outside
/// the source volume take the volume minimum.
pub fn crop_voi(volume: &Volume, mask: &Mask, target: [usize; 3]) -> Result<Volume> {
    if mask.extents != volume.extents {
        return Err(Error::Input(format!(
            "mask extents {:?} differ from volume extents {:?}",
            mask.extents, volume.extents
        )));
    }
    let center = mask
        .centroid()
        .ok_or_else(|| Error::Input("cannot crop around an empty mask".into()))?;
    let start = crop_offsets(center, target);
    Ok(crop_at(volume, start, target, volume.min()))
}

pub(crate) fn crop_at(volume: &Volume, start: [i64; 3], target: [usize; 3], fill: f32) -> Volume {
    let mut values = Vec::with_capacity(target.iter().product());
    for x in 0..target[0] {
        for y in 0..target[1] {
            for z in 0..target[2] {
                let src = [x, y, z].map(|v| v as i64);
                let p = [0, 1, 2].map(|a| start[a] + src[a]);
                let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < volume.extents[a]);
                values.push(if inside {
                    volume.get(p[0] as usize, p[1] as usize, p[2] as usize)
                } else {
                    fill
                });
            }
        }
    }
    Volume {
        extents: target,
        spacing: volume.spacing,
        values,
    }
}

/// Centered crop of `patch` extents; the start is `(voi - patch) / 2`.
pub fn extract_ct_patch(voi: &Volume, patch: [usize; 3]) -> Result<Volume> {
    if (0..3).any(|a| patch[a] > voi.extents[a] || patch[a] == 0) {
        return Err(Error::Config(format!(
            "CT patch {patch:?} does not fit in VOI {:?}",
            voi.extents
        )));
    }
    let start = [0, 1, 2].map(|a| ((voi.extents[a] - patch[a]) / 2) as i64);
    Ok(crop_at(voi, start, patch, 0.0))
}

/// Per-array min-max scaling to `[0, 1]`; a constant input becomes zeros.
pub fn normalize_unit(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![0.0; values.len()];
    }
    let span = f64::from(hi) - f64::from(lo);
    values
        .iter()
        .map(|&v| ((f64::from(v) - f64::from(lo)) / span) as f32)
        .collect()
}
