//! The full dual-modality network: two extractors, dynamic convolution and
//! the classification head, plus the per-batch training objective.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LoadedCase;
use crate::dynconv::{classify_head, concat_reshape, dynamic_contract, generate_weights, DynConvConfig};
use crate::error::{Error, Result};
use crate::extractors::{extract_pathological, extract_radiological, PatchBag, ViTConfig, VisionTransformer};
use crate::losses::{class_loss, contrast_loss, total_loss, ContrastiveBatch, HyperParams};
use crate::tensor::{Parameters, Tape, Tensor, Var};
use crate::types::{BatchMode, Modality, Subtype};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub radiological: ViTConfig,
    pub pathological: ViTConfig,
    pub dynconv: DynConvConfig,
}

impl ModelConfig {
    /// 32³ CT patches, 64² slide patches, `N = 128`, `M = 32`.
    pub fn desk() -> Self {
        ModelConfig {
            radiological: ViTConfig::desk_radiological(128),
            pathological: ViTConfig::desk_pathological(128),
            dynconv: DynConvConfig {
                feature_dim: 128,
                kernels: 32,
            },
        }
    }

    /// 112³ CT, 560² slides, `N = 1024`, `M = 512`.
    pub fn paper() -> Self {
        ModelConfig {
            radiological: ViTConfig::paper_radiological(),
            pathological: ViTConfig::paper_pathological(),
            dynconv: DynConvConfig {
                feature_dim: 1024,
                kernels: 512,
            },
        }
    }

    /// 4³ CT, 4² slides, `N = 16`, `M = 4`.
    pub fn miniature() -> Self {
        ModelConfig {
            radiological: ViTConfig::miniature_radiological(16),
            pathological: ViTConfig::miniature_pathological(16),
            dynconv: DynConvConfig {
                feature_dim: 16,
                kernels: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.radiological.validate()?;
        self.pathological.validate()?;
        self.dynconv.validate()?;
        let n = self.dynconv.feature_dim;
        if self.radiological.output_dim != n || self.pathological.output_dim != n {
            return Err(Error::Config(format!(
                "extractor outputs ({}, {}) must equal the dynconv feature size {n}",
                self.radiological.output_dim, self.pathological.output_dim
            )));
        }
        if self.radiological.input_extents.len() != 3 || self.pathological.input_extents.len() != 2 {
            return Err(Error::Config(
                "radiological input must be 3D and pathological input 2D".into(),
            ));
        }
        Ok(())
    }
}

/// Per-case forward results.
#[derive(Clone, Copy, Debug)]
pub struct CaseOutput<'t> {
    pub x_r: Var<'t>,
    pub x_p: Option<Var<'t>>,
    /// Dynamic-contraction output, the hybrid feature.
    pub z: Var<'t>,
    pub logit: Var<'t>,
    pub prob: Var<'t>,
}

/// Loss pieces of one batch. The contrastive parts are absent when the
/// batch is unpaired or contrastive training is off.
#[derive(Clone, Debug)]
pub struct BatchLoss<'t> {
    pub total: Var<'t>,
    pub class: Var<'t>,
    pub type_loss: Option<Var<'t>>,
    pub correlation: Option<Var<'t>>,
    pub outputs: Vec<CaseOutput<'t>>,
}

pub struct CcdcNet {
    pub cfg: ModelConfig,
    pub radiological: VisionTransformer,
    pub pathological: VisionTransformer,
    path_forwards: AtomicUsize,
}

impl CcdcNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(CcdcNet {
            radiological: VisionTransformer::radiological(cfg.radiological.clone())?,
            pathological: VisionTransformer::pathological(cfg.pathological.clone())?,
            cfg,
            path_forwards: AtomicUsize::new(0),
        })
    }

    pub fn init_params(&self, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::new();
        self.radiological.init_params(&mut rng, &mut params);
        self.pathological.init_params(&mut rng, &mut params);
        self.cfg.dynconv.init_params(&mut rng, &mut params);
        params
    }

    /// Number of pathological-extractor forward passes since construction.
    pub fn path_forward_count(&self) -> usize {
        self.path_forwards.load(Ordering::Relaxed)
    }

    pub fn extract_ct<'t>(&self, tape: &'t Tape, params: &Parameters, ct: &Tensor) -> Result<Var<'t>> {
        extract_radiological(&self.radiological, tape, params, ct)
    }

    pub fn extract_path<'t>(&self, tape: &'t Tape, params: &Parameters, bag: &PatchBag) -> Result<Var<'t>> {
        self.path_forwards.fetch_add(1, Ordering::Relaxed);
        extract_pathological(&self.pathological, tape, params, bag)
    }

    /// Both extractors (pathology only when a bag is given), concatenation,
    /// weight generation, contraction and the head.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &Parameters,
        ct: &Tensor,
        bag: Option<&PatchBag>,
    ) -> Result<CaseOutput<'t>> {
        let x_r = self.extract_ct(tape, params, ct)?;
        let x_p = bag.map(|b| self.extract_path(tape, params, b)).transpose()?;
        let block = concat_reshape(&self.cfg.dynconv, &x_r, x_p.as_ref())?;
        let w = generate_weights(tape, params, &block)?;
        let z = dynamic_contract(&block, &w)?;
        let (logit, prob) = classify_head(tape, params, &z)?;
        Ok(CaseOutput {
            x_r,
            x_p,
            z,
            logit,
            prob,
        })
    }

    /// Total loss for one modality-homogeneous batch. CT-only batches never
    /// touch the pathological extractor.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        params: &Parameters,
        cases: &[&LoadedCase],
        mode: BatchMode,
        hp: &HyperParams,
        contrastive: bool,
    ) -> Result<BatchLoss<'t>> {
        if cases.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let paired = mode.is_paired();
        let mut outputs = Vec::with_capacity(cases.len());
        for case in cases {
            let bag = if paired {
                Some(case.bag.as_ref().ok_or_else(|| {
                    Error::Input(format!(
                        "case {} has no patch bag but is in a paired batch",
                        case.case_id
                    ))
                })?)
            } else {
                None
            };
            outputs.push(self.forward(tape, params, &case.ct, bag)?);
        }
        let probs = stack_scalars(&outputs.iter().map(|o| o.prob).collect::<Vec<_>>())?;
        let targets: Vec<f64> = cases.iter().map(|c| c.target).collect();
        let class = class_loss(&probs, &targets)?;

        let (mut type_loss, mut correlation, mut contrast) = (None, None, None);
        if paired && contrastive && cases.len() >= 2 {
            let b = cases.len();
            let mut features = Vec::with_capacity(2 * b);
            for o in &outputs {
                features.push(o.x_r.l2_normalize()?);
            }
            for o in &outputs {
                features.push(o.x_p.expect("paired output").l2_normalize()?);
            }
            let labels: Vec<Subtype> = cases
                .iter()
                .map(|c| Subtype::from_positive(c.target > 0.5))
                .cycle()
                .take(2 * b)
                .collect();
            let modality = [vec![Modality::Ct; b], vec![Modality::Path; b]].concat();
            let pairing = (0..b).map(|i| (i, b + i)).collect();
            let batch = ContrastiveBatch::new(features, labels, modality, pairing)?;
            let parts = contrast_loss(&batch, hp)?;
            type_loss = Some(parts.type_loss);
            correlation = Some(parts.correlation);
            contrast = Some(parts.combined);
        }
        let total = total_loss(&class, contrast.as_ref(), paired, hp)?;
        Ok(BatchLoss {
            total,
            class,
            type_loss,
            correlation,
            outputs,
        })
    }

    /// LUSC probability for one case, using the slide only in paired mode.
    pub fn predict(&self, params: &Parameters, case: &LoadedCase, mode: BatchMode) -> Result<f64> {
        let tape = Tape::new();
        let bag =
            match mode {
                BatchMode::Paired => Some(case.bag.as_ref().ok_or_else(|| {
                    Error::Input(format!("case {} has no patch bag for paired inference", case.case_id))
                })?),
                BatchMode::CtOnly => None,
            };
        Ok(self.forward(&tape, params, &case.ct, bag)?.prob.item())
    }

    /// Cosine similarity between the CT and pathology features of a paired case.
    pub fn feature_cosine(&self, params: &Parameters, case: &LoadedCase) -> Result<f64> {
        let bag = case
            .bag
            .as_ref()
            .ok_or_else(|| Error::Input(format!("case {} is not paired", case.case_id)))?;
        let tape = Tape::new();
        let a = self.extract_ct(&tape, params, &case.ct)?.value();
        let b = self.extract_path(&tape, params, bag)?.value();
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(dot / (na * nb).max(1e-12))
    }
}

fn stack_scalars<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let parts = xs.iter().map(|x| x.reshape(&[1])).collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Var::concat(&parts, 0)
    }
}

/// SHA-256 of a serializable configuration's canonical JSON.
pub fn config_digest<T: Serialize>(cfg: &T) -> String {
    let text = serde_json::to_string(cfg).expect("configuration serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}
