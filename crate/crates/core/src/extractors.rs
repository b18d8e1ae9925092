//! Radiological (3D) and pathological (2D) vision-transformer feature
//! extractors.
//!
//! CT tokens get a learned positional embedding. Pathology tokens get no
//! positional code at all; instead every token of a patch receives the
//! learned embedding of the patch's magnification level. Both encoders are
//! pre-norm transformer stacks read out by mean-pooling over tokens and a
//! linear projection to the feature size `N`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MagnificationLevel {
    X10,
    X20,
    X40,
    X100,
}

impl MagnificationLevel {
    pub const ALL: [MagnificationLevel; 4] = [Self::X10, Self::X20, Self::X40, Self::X100];

    pub fn embedding_index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Input(format!("no magnification level with index {i}")))
    }

    /// Resampling factor relative to the 10X base.
    pub fn ratio(self) -> usize {
        match self {
            Self::X10 => 1,
            Self::X20 => 2,
            Self::X40 => 4,
            Self::X100 => 10,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::X10 => "10X",
            Self::X20 => "20X",
            Self::X40 => "40X",
            Self::X100 => "100X",
        }
    }
}

impl fmt::Display for MagnificationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MagnificationLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown magnification level `{s}`")))
    }
}

impl Serialize for MagnificationLevel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for MagnificationLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Spatial extents of one input (3 axes for CT, 2 for pathology).
    pub input_extents: Vec<usize>,
    pub token_patch_size: Vec<usize>,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    pub output_dim: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_extents.len() != self.token_patch_size.len() {
            return bad(format!(
                "input extents {:?} and token patch {:?} differ in rank",
                self.input_extents, self.token_patch_size
            ));
        }
        for (&e, &p) in self.input_extents.iter().zip(&self.token_patch_size) {
            if p == 0 || e == 0 || e % p != 0 {
                return bad(format!(
                    "input extents {:?} are not divisible by token patch {:?}",
                    self.input_extents, self.token_patch_size
                ));
            }
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.mlp_dim == 0 || self.output_dim == 0 {
            return bad("channels, mlp_dim and output_dim must be positive".into());
        }
        Ok(())
    }

    pub fn token_grid(&self) -> Vec<usize> {
        self.input_extents
            .iter()
            .zip(&self.token_patch_size)
            .map(|(e, p)| e / p)
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.token_patch_size.iter().product::<usize>()
    }

    fn base(input: Vec<usize>, token: Vec<usize>, channels: usize, output_dim: usize) -> Self {
        ViTConfig {
            input_extents: input,
            token_patch_size: token,
            channels,
            embed_dim: 64,
            heads: 4,
            depth: 2,
            mlp_dim: 128,
            output_dim,
        }
    }

    /// 32³ CT patches cut into 8³ tokens.
    pub fn desk_radiological(output_dim: usize) -> Self {
        Self::base(vec![32; 3], vec![8; 3], 1, output_dim)
    }

    /// 64² RGB patches cut into 16² tokens.
    pub fn desk_pathological(output_dim: usize) -> Self {
        Self::base(vec![64; 2], vec![16; 2], 3, output_dim)
    }

    /// 112³ CT patches with 16³ tokens (343 tokens).
    pub fn paper_radiological() -> Self {
        ViTConfig {
            embed_dim: 768,
            heads: 12,
            depth: 12,
            mlp_dim: 3072,
            ..Self::base(vec![112; 3], vec![16; 3], 1, 1024)
        }
    }

    /// 560² RGB patches with 56² tokens (100 tokens).
    pub fn paper_pathological() -> Self {
        ViTConfig {
            embed_dim: 768,
            heads: 12,
            depth: 12,
            mlp_dim: 3072,
            ..Self::base(vec![560; 2], vec![56; 2], 3, 1024)
        }
    }

    /// Smallest shapes that still exercise every code path; used by gradient checks.
    pub fn miniature_radiological(output_dim: usize) -> Self {
        ViTConfig {
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mlp_dim: 12,
            ..Self::base(vec![4; 3], vec![2; 3], 1, output_dim)
        }
    }

    pub fn miniature_pathological(output_dim: usize) -> Self {
        ViTConfig {
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mlp_dim: 12,
            ..Self::base(vec![4; 2], vec![2; 2], 3, output_dim)
        }
    }
}

/// Patches from one slide. Each patch is a `3×S×S` tensor in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub case_id: String,
    pub patches: Vec<Tensor>,
    pub magnifications: Vec<MagnificationLevel>,
}

impl PatchBag {
    pub fn new(
        case_id: impl Into<String>,
        patches: Vec<Tensor>,
        magnifications: Vec<MagnificationLevel>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if patches.is_empty() {
            return Err(Error::Input(format!("empty patch bag for case {case_id}")));
        }
        if patches.len() != magnifications.len() {
            return Err(Error::Input(format!(
                "case {case_id}: {} patches but {} magnification tags",
                patches.len(),
                magnifications.len()
            )));
        }
        let shape = patches[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || patches.iter().any(|p| p.shape() != shape.as_slice()) {
            return Err(Error::Input(format!(
                "case {case_id}: patches must share one 3×S×S shape"
            )));
        }
        Ok(PatchBag {
            case_id,
            patches,
            magnifications,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// How tokens learn where they came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenCode {
    Positional,
    Magnification,
}

/// A vision transformer whose parameters live under `prefix.` in a
/// [`Parameters`] store.
#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub prefix: String,
    pub cfg: ViTConfig,
    pub code: TokenCode,
}

impl VisionTransformer {
    pub fn radiological(cfg: ViTConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.input_extents.len() != 3 || cfg.channels != 1 {
            return Err(Error::Config(
                "radiological extractor needs 3 spatial axes and 1 channel".into(),
            ));
        }
        Ok(VisionTransformer {
            prefix: "ct".into(),
            cfg,
            code: TokenCode::Positional,
        })
    }

    pub fn pathological(cfg: ViTConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.input_extents.len() != 2 || cfg.channels != 3 {
            return Err(Error::Config(
                "pathological extractor needs 2 spatial axes and 3 channels".into(),
            ));
        }
        Ok(VisionTransformer {
            prefix: "path".into(),
            cfg,
            code: TokenCode::Magnification,
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn block(&self, i: usize, suffix: &str) -> String {
        format!("{}.blocks.{i}.{suffix}", self.prefix)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut Parameters) {
        let c = &self.cfg;
        let e = c.embed_dim;
        let mut linear = |params: &mut Parameters, name: String, fan_in: usize, fan_out: usize| {
            let std = (1.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.insert(
                format!("{name}.w"),
                Tensor::from_fn(&[fan_in, fan_out], |_| normal.sample(rng)),
            );
            // A key bias shifts every score of a query equally and cancels in the softmax.
            if !name.ends_with("attn.k") {
                params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
            }
        };
        linear(params, self.name("embed"), c.patch_dim(), e);
        for i in 0..c.depth {
            params.insert(self.block(i, "ln1.g"), Tensor::ones(&[e]));
            params.insert(self.block(i, "ln1.b"), Tensor::zeros(&[e]));
            for proj in ["q", "k", "v", "o"] {
                linear(params, self.block(i, &format!("attn.{proj}")), e, e);
            }
            params.insert(self.block(i, "ln2.g"), Tensor::ones(&[e]));
            params.insert(self.block(i, "ln2.b"), Tensor::zeros(&[e]));
            linear(params, self.block(i, "mlp.fc1"), e, c.mlp_dim);
            linear(params, self.block(i, "mlp.fc2"), c.mlp_dim, e);
        }
        linear(params, self.name("head"), e, c.output_dim);
        let small = Normal::new(0.0, 0.02).expect("positive std");
        match self.code {
            TokenCode::Positional => {
                params.insert(
                    self.name("pos"),
                    Tensor::from_fn(&[c.token_count(), e], |_| small.sample(rng)),
                );
            }
            TokenCode::Magnification => {
                params.insert(
                    self.name("mag"),
                    Tensor::from_fn(&[MagnificationLevel::ALL.len(), e], |_| small.sample(rng)),
                );
            }
        }
    }

    fn linear<'t>(&self, tape: &'t Tape, params: &Parameters, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(params, &format!("{name}.w"))?;
        let b = tape.param(params, &format!("{name}.b"))?;
        x.matmul(&w)?.add(&b)
    }

    fn embed<'t>(&self, tape: &'t Tape, params: &Parameters, patches: Tensor) -> Result<Var<'t>> {
        self.linear(tape, params, &self.name("embed"), &tape.constant(patches))
    }

    /// Non-overlapping `token_patch_size` cubes of a CT volume, flattened,
    /// projected to `embed_dim`, plus the learned positional embedding.
    pub fn tokenize_volume_3d<'t>(&self, tape: &'t Tape, params: &Parameters, volume: &Tensor) -> Result<Var<'t>> {
        if self.code != TokenCode::Positional {
            return Err(Error::Usage("tokenize_volume_3d on a pathology encoder".into()));
        }
        let patches = patchify(volume, &self.cfg)?;
        let tokens = self.embed(tape, params, patches)?;
        tokens.add(&tape.param(params, &self.name("pos"))?)
    }

    /// Flattened, projected token patches of one RGB patch plus the
    /// embedding of its magnification, added to every token.
    pub fn tokenize_patch_2d<'t>(
        &self,
        tape: &'t Tape,
        params: &Parameters,
        patch: &Tensor,
        mag: MagnificationLevel,
    ) -> Result<Var<'t>> {
        if self.code != TokenCode::Magnification {
            return Err(Error::Usage("tokenize_patch_2d on a CT encoder".into()));
        }
        let patches = patchify(patch, &self.cfg)?;
        let tokens = self.embed(tape, params, patches)?;
        let idx = mag.embedding_index();
        let table = tape.param(params, &self.name("mag"))?;
        let row = table.slice(0, idx, idx + 1)?.reshape(&[self.cfg.embed_dim])?;
        tokens.add(&row)
    }

    /// Pre-norm transformer blocks, mean-pool over tokens, projection to
    /// `output_dim`.
    pub fn transformer_encode<'t>(&self, tape: &'t Tape, params: &Parameters, tokens: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.cfg;
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != c.embed_dim {
            return Err(Error::shape("transformer_encode", &shape, &[0, c.embed_dim]));
        }
        let mut x = *tokens;
        for i in 0..c.depth {
            let h = self.affine_norm(tape, params, &x, &self.block(i, "ln1"))?;
            let a = self.attention(tape, params, i, &h)?;
            x = x.add(&a)?;
            let h = self.affine_norm(tape, params, &x, &self.block(i, "ln2"))?;
            let h = self.linear(tape, params, &self.block(i, "mlp.fc1"), &h)?.gelu()?;
            let h = self.linear(tape, params, &self.block(i, "mlp.fc2"), &h)?;
            x = x.add(&h)?;
        }
        let pooled = x.mean_axis(0)?.reshape(&[1, c.embed_dim])?;
        self.linear(tape, params, &self.name("head"), &pooled)?
            .reshape(&[c.output_dim])
    }

    fn affine_norm<'t>(&self, tape: &'t Tape, params: &Parameters, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
        let g = tape.param(params, &format!("{name}.g"))?;
        let b = tape.param(params, &format!("{name}.b"))?;
        x.layer_norm()?.mul(&g)?.add(&b)
    }

    fn attention<'t>(&self, tape: &'t Tape, params: &Parameters, block: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let c = &self.cfg;
        let dh = c.embed_dim / c.heads;
        let q = self.linear(tape, params, &self.block(block, "attn.q"), x)?;
        let k = x.matmul(&tape.param(params, &self.block(block, "attn.k.w"))?)?;
        let v = self.linear(tape, params, &self.block(block, "attn.v"), x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice(1, lo, hi)?;
            let kh = k.slice(1, lo, hi)?;
            let vh = v.slice(1, lo, hi)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax()?;
            heads.push(scores.matmul(&vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, 1)?
        };
        self.linear(tape, params, &self.block(block, "attn.o"), &merged)
    }
}

/// X_r: tokenized CT volume through the radiological encoder.
pub fn extract_radiological<'t>(
    vit: &VisionTransformer,
    tape: &'t Tape,
    params: &Parameters,
    volume: &Tensor,
) -> Result<Var<'t>> {
    let tokens = vit.tokenize_volume_3d(tape, params, volume)?;
    vit.transformer_encode(tape, params, &tokens)
}

/// X_p: unweighted mean of the per-patch encodings of a bag.
pub fn extract_pathological<'t>(
    vit: &VisionTransformer,
    tape: &'t Tape,
    params: &Parameters,
    bag: &PatchBag,
) -> Result<Var<'t>> {
    if bag.is_empty() {
        return Err(Error::Input(format!("empty patch bag for case {}", bag.case_id)));
    }
    let n = vit.cfg.output_dim;
    // canonical order: magnification, then patch values
    let mut order: Vec<usize> = (0..bag.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| bag.magnifications[i].embedding_index();
        key(a).cmp(&key(b)).then_with(|| {
            let (pa, pb) = (bag.patches[a].data(), bag.patches[b].data());
            pa.iter()
                .zip(pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
    let mut feats = Vec::with_capacity(bag.len());
    for (patch, &mag) in order.iter().map(|&i| (&bag.patches[i], &bag.magnifications[i])) {
        let tokens = vit.tokenize_patch_2d(tape, params, patch, mag)?;
        feats.push(vit.transformer_encode(tape, params, &tokens)?.reshape(&[1, n])?);
    }
    let stacked = if feats.len() == 1 {
        feats[0]
    } else {
        Var::concat(&feats, 0)?
    };
    stacked.mean_axis(0)
}

/// Splits a `C×E1×…×Ek` (or channel-less `E1×…×Ek`) array into flattened
/// non-overlapping token patches, tokens in row-major grid order and each
/// token flattened as (channel, then spatial row-major).
pub fn patchify(input: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let spatial = cfg.input_extents.len();
    let shape = input.shape();
    let (channels, extents) = match shape.len() {
        r if r == spatial && cfg.channels == 1 => (1, shape),
        r if r == spatial + 1 => (shape[0], &shape[1..]),
        _ => return Err(Error::shape("patchify", shape, &cfg.input_extents)),
    };
    if channels != cfg.channels || extents != cfg.input_extents.as_slice() {
        return Err(Error::Config(format!(
            "input of shape {shape:?} does not match configured extents {:?} with {} channels",
            cfg.input_extents, cfg.channels
        )));
    }
    let grid = cfg.token_grid();
    let tp = &cfg.token_patch_size;
    let tokens = cfg.token_count();
    let dim = cfg.patch_dim();
    let in_strides = crate::tensor::strides(extents);
    let plane: usize = extents.iter().product();
    let tp_count: usize = tp.iter().product();
    let mut out = Vec::with_capacity(tokens * dim);
    let mut gidx = vec![0usize; spatial];
    let mut pidx = vec![0usize; spatial];
    for t in 0..tokens {
        unravel(t, &grid, &mut gidx);
        for ch in 0..channels {
            for p in 0..tp_count {
                unravel(p, tp, &mut pidx);
                let mut off = ch * plane;
                for a in 0..spatial {
                    off += (gidx[a] * tp[a] + pidx[a]) * in_strides[a];
                }
                out.push(input.data()[off]);
            }
        }
    }
    Tensor::new(&[tokens, dim], out)
}

fn unravel(mut i: usize, extents: &[usize], out: &mut [usize]) {
    for a in (0..extents.len()).rev() {
        out[a] = i % extents[a];
        i /= extents[a];
    }
}
