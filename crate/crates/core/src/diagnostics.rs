//! Finite-difference verification of the full training objective on the
//! miniature model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::GradCheckConfig;
use crate::data::LoadedCase;
use crate::error::Result;
use crate::extractors::{MagnificationLevel, PatchBag};
use crate::losses::HyperParams;
use crate::model::{CcdcNet, ModelConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::types::BatchMode;

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub no_gradient_path: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub mode: BatchMode,
    pub max_rel_error: f64,
    pub non_finite: Option<(String, usize)>,
    pub groups: Vec<GroupResult>,
}

impl ModelGradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "mode {}: worst relative error {:.3e}\n",
            self.mode.as_str(),
            self.max_rel_error
        );
        for g in &self.groups {
            if g.no_gradient_path {
                s += &format!("  {:<28} no gradient path\n", g.group);
            } else {
                s += &format!("  {:<28} {:.3e}\n", g.group, g.max_rel_error);
            }
        }
        s
    }
}

/// Parameter name without its final component, e.g. `ct.blocks.0.attn.q`.
pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

fn group_report(mode: BatchMode, report: &GradCheckReport) -> ModelGradCheck {
    let mut groups: Vec<GroupResult> = Vec::new();
    for p in &report.params {
        let g = param_group(&p.name);
        match groups.iter_mut().find(|r| r.group == g) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(p.max_rel_error);
                r.no_gradient_path &= p.no_gradient_path;
            }
            None => groups.push(GroupResult {
                group: g.to_string(),
                max_rel_error: p.max_rel_error,
                no_gradient_path: p.no_gradient_path,
            }),
        }
    }
    ModelGradCheck {
        mode,
        max_rel_error: report.max_rel_error,
        non_finite: report.non_finite.clone(),
        groups,
    }
}

/// Random miniature cases with alternating subtypes, each with a two-patch bag.
pub fn miniature_cases(model: &ModelConfig, n: usize, seed: u64) -> Result<Vec<LoadedCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ct_ext = model.radiological.input_extents.clone();
    let mut side = vec![3];
    side.extend(&model.pathological.input_extents);
    (0..n)
        .map(|i| {
            let ct = Tensor::from_fn(&ct_ext, |_| rng.random::<f64>());
            let patches = (0..2)
                .map(|_| Tensor::from_fn(&side, |_| rng.random::<f64>()))
                .collect();
            let mags = vec![MagnificationLevel::ALL[i % 4], MagnificationLevel::ALL[(i + 1) % 4]];
            Ok(LoadedCase {
                case_id: format!("mini{i}"),
                target: (i % 2) as f64,
                ct,
                bag: Some(PatchBag::new(format!("mini{i}"), patches, mags)?),
            })
        })
        .collect()
}

/// Checks the full loss (contrastive terms on) of one miniature batch.
/// `corrupt` scales the adjoint of the named operation, for mutation tests.
pub fn model_gradcheck(
    cfg: &GradCheckConfig,
    seed: u64,
    mode: BatchMode,
    corrupt: Option<(&'static str, f64)>,
) -> Result<ModelGradCheck> {
    let net = CcdcNet::new(ModelConfig::miniature())?;
    let params = net.init_params(seed);
    let cases = miniature_cases(&net.cfg, cfg.batch_size.max(2), seed ^ 0x5eed)?;
    let refs: Vec<&LoadedCase> = cases.iter().collect();
    let hp = HyperParams::default();
    let opts = GradCheckOptions {
        step: cfg.step,
        max_coords_per_param: cfg.max_coords_per_param,
        seed,
    };
    let report = grad_check(
        &params,
        |tape, p| {
            if let Some((op, factor)) = corrupt {
                tape.corrupt_adjoint(op, factor);
            }
            Ok(net.batch_loss(tape, p, &refs, mode, &hp, true)?.total)
        },
        &opts,
    )?;
    Ok(group_report(mode, &report))
}
