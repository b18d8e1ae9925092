//! Training objectives: binary cross-entropy, supervised subtype contrast,
//! CT/pathology correlation, and the modality-gated total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use crate::types::{Modality, Subtype};

/// Probabilities are clipped to `[CLIP_EPS, 1 - CLIP_EPS]` before the log.
pub const CLIP_EPS: f64 = 1e-7;

const NORM_TOLERANCE: f64 = 1e-6;

/// Which features act as anchors in the subtype contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSet {
    #[default]
    All,
    CtOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub tau: f64,
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub anchors: AnchorSet,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.07,
            lambda_p: 1.0,
            lambda_c: 1.0,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 400,
            anchors: AnchorSet::All,
        }
    }
}

impl HyperParams {
    pub fn validate(&self, contrastive: bool) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::Config("lambda_p and lambda_c must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || (contrastive && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch size {} is too small (contrastive losses need at least 2)",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// L2-normalized features of one batch with their subtype and modality,
/// plus the CT→pathology pairing as `(ct_index, path_index)`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<'t> {
    pub features: Vec<Var<'t>>,
    pub labels: Vec<Subtype>,
    pub modality: Vec<Modality>,
    pub pairing: Vec<(usize, usize)>,
}

impl<'t> ContrastiveBatch<'t> {
    pub fn new(
        features: Vec<Var<'t>>,
        labels: Vec<Subtype>,
        modality: Vec<Modality>,
        pairing: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Input("empty contrastive batch".into()));
        }
        if labels.len() != n || modality.len() != n {
            return Err(Error::Input(format!(
                "contrastive batch has {n} features, {} labels, {} modality tags",
                labels.len(),
                modality.len()
            )));
        }
        let dim = features.first().map(|f| f.shape());
        for f in &features {
            let v = f.value();
            if Some(f.shape()) != dim || v.rank() != 1 {
                return Err(Error::Input(
                    "contrastive features must be vectors of one length".into(),
                ));
            }
            let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Input(format!("contrastive feature has norm {norm}, expected 1")));
            }
        }
        let mut seen_ct = vec![false; n];
        let mut seen_path = vec![false; n];
        for &(c, p) in &pairing {
            if c >= n || p >= n || modality[c] != Modality::Ct || modality[p] != Modality::Path {
                return Err(Error::Input(format!(
                    "pairing ({c}, {p}) does not link a CT to a pathology feature"
                )));
            }
            if std::mem::replace(&mut seen_ct[c], true) || std::mem::replace(&mut seen_path[p], true) {
                return Err(Error::Input("pairing is not injective".into()));
            }
        }
        Ok(ContrastiveBatch {
            features,
            labels,
            modality,
            pairing,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn stack(&self, rows: &[usize]) -> Result<Var<'t>> {
        let dim = self.features[rows[0]].shape()[0];
        let parts = rows
            .iter()
            .map(|&i| self.features[i].reshape(&[1, dim]))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Var::concat(&parts, 0)
        }
    }
}

/// `-1/N Σ [y log p + (1-y) log(1-p)]` with `p` clipped away from 0 and 1.
pub fn class_loss<'t>(probabilities: &Var<'t>, labels: &[f64]) -> Result<Var<'t>> {
    let shape = probabilities.shape();
    if shape != [labels.len()] || labels.is_empty() {
        return Err(Error::Input(format!(
            "{} labels for probabilities of shape {shape:?}",
            labels.len()
        )));
    }
    let tape = probabilities.tape();
    let p = probabilities.clamp(CLIP_EPS, 1.0 - CLIP_EPS)?;
    let y = tape.constant(Tensor::vector(labels.to_vec()));
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|y| 1.0 - y).collect()));
    let log_p = p.log()?;
    let log_q = p.neg()?.add_scalar(1.0)?.log()?;
    let ll = y.mul(&log_p)?.add(&not_y.mul(&log_q)?)?;
    ll.sum()?.scale(-1.0 / labels.len() as f64)
}

/// Value-level twin of [`class_loss`].
pub fn class_loss_value(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let s: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLIP_EPS, 1.0 - CLIP_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / labels.len() as f64)
}

/// Row-wise `log Σ_j mask[i,j]·exp(s[i,j])`, each row shifted by its largest
/// live entry. Every row needs one live entry.
fn masked_logsumexp<'t>(sim: &Var<'t>, mask: Tensor) -> Result<Var<'t>> {
    let values = sim.value();
    let cols = values.shape()[1];
    let shift: Vec<f64> = values
        .data()
        .chunks(cols)
        .zip(mask.data().chunks(cols))
        .map(|(row, live)| {
            row.iter()
                .zip(live)
                .filter(|(_, &m)| m != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let tape = sim.tape();
    let grid = tape.constant(Tensor::from_fn(values.shape(), |f| shift[f / cols]));
    let mask = tape.constant(mask);
    sim.sub(&grid)?
        .exp()?
        .mul(&mask)?
        .sum_axis(1)?
        .log()?
        .add(&tape.constant(Tensor::vector(shift)))
}

/// Supervised contrastive loss over all anchors: for each anchor `i`,
/// positives are other features of the same subtype and the candidate set is
/// every other feature. Anchors without positives contribute zero.
pub fn type_contrastive_loss<'t>(batch: &ContrastiveBatch<'t>, tau: f64, anchors: AnchorSet) -> Result<Var<'t>> {
    let n = batch.len();
    let anchor_rows: Vec<usize> = (0..n)
        .filter(|&i| anchors == AnchorSet::All || batch.modality[i] == Modality::Ct)
        .filter(|&i| (0..n).any(|p| p != i && batch.labels[p] == batch.labels[i]))
        .collect();
    if anchor_rows.is_empty() {
        return Ok(zero(batch));
    }
    let all: Vec<usize> = (0..n).collect();
    let a = batch.stack(&anchor_rows)?;
    let k = batch.stack(&all)?;
    let sim = a.matmul(&k.transpose()?)?.scale(1.0 / tau)?;
    let na = anchor_rows.len();
    let others = Tensor::from_fn(&[na, n], |f| f64::from(anchor_rows[f / n] != f % n));
    let log_den = masked_logsumexp(&sim, others)?;
    let pos_weight = Tensor::from_fn(&[na, n], |f| {
        let (i, p) = (anchor_rows[f / n], f % n);
        if p != i && batch.labels[p] == batch.labels[i] {
            let count = (0..n).filter(|&q| q != i && batch.labels[q] == batch.labels[i]).count();
            1.0 / count as f64
        } else {
            0.0
        }
    });
    let pos = sim.mul(&sim.tape().constant(pos_weight))?.sum()?;
    log_den.sum()?.sub(&pos)
}

/// InfoNCE from each paired CT feature to its pathology partner, with every
/// pathology feature in the batch as a candidate.
pub fn correlation_contrastive_loss<'t>(batch: &ContrastiveBatch<'t>, tau: f64) -> Result<Var<'t>> {
    let n = batch.len();
    let ct: Vec<usize> = (0..n).filter(|&i| batch.modality[i] == Modality::Ct).collect();
    let path: Vec<usize> = (0..n).filter(|&i| batch.modality[i] == Modality::Path).collect();
    if ct.is_empty() {
        return Ok(zero(batch));
    }
    let mut partner = Vec::with_capacity(ct.len());
    for &j in &ct {
        let p = batch
            .pairing
            .iter()
            .find(|&&(c, _)| c == j)
            .map(|&(_, p)| p)
            .ok_or_else(|| Error::Input(format!("CT feature {j} has no paired pathology feature")))?;
        partner.push(path.iter().position(|&q| q == p).expect("pairing validated"));
    }
    let kc = batch.stack(&ct)?;
    let kp = batch.stack(&path)?;
    let sim = kc.matmul(&kp.transpose()?)?.scale(1.0 / tau)?;
    let np = path.len();
    let log_den = masked_logsumexp(&sim, Tensor::ones(&[ct.len(), np]))?;
    let flat: Vec<usize> = partner.iter().enumerate().map(|(r, &c)| r * np + c).collect();
    let pos = sim.reshape(&[ct.len() * np])?.gather(&flat)?.sum()?;
    log_den.sum()?.sub(&pos)
}

/// The two contrastive terms and their weighted combination.
#[derive(Clone, Copy, Debug)]
pub struct ContrastParts<'t> {
    pub type_loss: Var<'t>,
    pub correlation: Var<'t>,
    pub combined: Var<'t>,
}

/// `L_type + λ_p · L_correlation`.
pub fn contrast_loss<'t>(batch: &ContrastiveBatch<'t>, hp: &HyperParams) -> Result<ContrastParts<'t>> {
    let type_loss = type_contrastive_loss(batch, hp.tau, hp.anchors)?;
    let correlation = correlation_contrastive_loss(batch, hp.tau)?;
    let combined = type_loss.add(&correlation.scale(hp.lambda_p)?)?;
    Ok(ContrastParts {
        type_loss,
        correlation,
        combined,
    })
}

/// `L_class + α·λ_c·L_contrast` with `α = 1` iff the batch is paired. An
/// unpaired batch returns `class_part` itself.
pub fn total_loss<'t>(
    class_part: &Var<'t>,
    contrast_part: Option<&Var<'t>>,
    paired: bool,
    hp: &HyperParams,
) -> Result<Var<'t>> {
    match (paired, contrast_part) {
        (true, Some(c)) => class_part.add(&c.scale(hp.lambda_c)?),
        _ => Ok(*class_part),
    }
}

/// Value-level twin of [`total_loss`].
pub fn total_loss_value(class_part: f64, contrast_part: f64, paired: bool, hp: &HyperParams) -> f64 {
    if paired {
        class_part + hp.lambda_c * contrast_part
    } else {
        class_part
    }
}

fn zero<'t>(batch: &ContrastiveBatch<'t>) -> Var<'t> {
    batch.features[0].tape().constant(Tensor::scalar(0.0))
}
