//! Feature concatenation, input-dependent kernel generation and the
//! shape-polymorphic dynamic contraction that fuses the two modalities.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Parameters, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynConvConfig {
    /// Feature length `N` of each modality; must equal `2·s³`.
    pub feature_dim: usize,
    /// Number of generated kernels `M`.
    pub kernels: usize,
}

impl DynConvConfig {
    pub fn validate(&self) -> Result<()> {
        block_side(self.feature_dim)?;
        if self.kernels == 0 {
            return Err(Error::Config("dynconv needs at least one kernel".into()));
        }
        Ok(())
    }

    /// `(H, L, D)` of the feature block: `(2s, 2s, s)` paired, `(2s, s, s)` CT only.
    pub fn block_extents(&self, paired: bool) -> Result<[usize; 3]> {
        let s = block_side(self.feature_dim)?;
        Ok([2 * s, if paired { 2 * s } else { s }, s])
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut Parameters) {
        let m = self.kernels;
        let gen_std = (1.0 / (27.0 * self.feature_dim as f64)).sqrt();
        let gen = Normal::new(0.0, gen_std).expect("positive std");
        params.insert("gen.w", Tensor::from_fn(&[m, 1, 3, 3, 3], |_| gen.sample(rng)));
        params.insert("gen.b", Tensor::zeros(&[m]));
        let fc = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("positive std");
        params.insert("fc.w", Tensor::from_fn(&[m], |_| fc.sample(rng)));
        params.insert("fc.b", Tensor::scalar(0.0));
    }
}

fn block_side(n: usize) -> Result<usize> {
    let half = n / 2;
    let s = (half as f64).cbrt().round() as usize;
    if n == 0 || !n.is_multiple_of(2) || s * s * s != half {
        return Err(Error::Config(format!(
            "feature size {n} does not factor into a 2s×s×s block"
        )));
    }
    Ok(s)
}

/// The `H×L×D` block X̃. `L` is doubled when a pathology feature is present.
#[derive(Clone, Copy, Debug)]
pub struct ConcatFeature<'t> {
    pub block: Var<'t>,
    pub paired: bool,
}

/// The `H×L×D×M` weight block W̃ generated from X̃.
#[derive(Clone, Copy, Debug)]
pub struct DynamicWeights<'t> {
    pub block: Var<'t>,
}

/// Concatenates `x_r` (then `x_p`, if present) and reshapes row-major into
/// the feature block.
pub fn concat_reshape<'t>(cfg: &DynConvConfig, x_r: &Var<'t>, x_p: Option<&Var<'t>>) -> Result<ConcatFeature<'t>> {
    let n = cfg.feature_dim;
    for v in std::iter::once(x_r).chain(x_p) {
        if v.shape() != [n] {
            return Err(Error::Config(format!(
                "feature of shape {:?} does not match configured size {n}",
                v.shape()
            )));
        }
    }
    let paired = x_p.is_some();
    let flat = match x_p {
        Some(p) => Var::concat(&[*x_r, *p], 0)?,
        None => *x_r,
    };
    let block = flat.reshape(&cfg.block_extents(paired)?)?;
    Ok(ConcatFeature { block, paired })
}

/// Single-channel conv3d with `M` 3×3×3 kernels, stride 1, padding 1, plus
/// bias, rearranged to `H×L×D×M`.
pub fn generate_weights<'t>(tape: &'t Tape, params: &Parameters, x: &ConcatFeature<'t>) -> Result<DynamicWeights<'t>> {
    let mut ext = vec![1];
    ext.extend(x.block.shape());
    let input = x.block.reshape(&ext)?;
    let kernels = tape.param(params, "gen.w")?;
    let bias = tape.param(params, "gen.b")?;
    let out = input.conv3d(&kernels, [1, 1, 1], [1, 1, 1])?;
    let block = out.permute(&[1, 2, 3, 0])?.add(&bias)?;
    Ok(DynamicWeights { block })
}

/// `z_m = Σ_{h,l,d} w[h,l,d,m] · x[H-h-1, L-l-1, D-d-1]`.
///
/// The output `Z` is what the total loss calls the hybrid feature.
pub fn dynamic_contract<'t>(x: &ConcatFeature<'t>, w: &DynamicWeights<'t>) -> Result<Var<'t>> {
    x.block.dynamic_contract(&w.block)
}

/// Value-level contraction for callers without a tape.
pub fn dynamic_contract_values(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    kernels::dynamic_contract_forward(x, w)
}

/// Affine map `M → 1` and its logistic; returns `(logit, probability)`.
pub fn classify_head<'t>(tape: &'t Tape, params: &Parameters, z: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let w = tape.param(params, "fc.w")?;
    let b = tape.param(params, "fc.b")?;
    let logit = z.inner_product(&w)?.add(&b)?;
    let prob = logit.sigmoid()?;
    Ok((logit, prob))
}
