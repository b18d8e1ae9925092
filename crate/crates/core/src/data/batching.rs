use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BatchMode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub mode: BatchMode,
    pub case_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub warnings: Vec<String>,
}

impl BatchPlan {
    pub fn count(&self, mode: BatchMode) -> usize {
        self.batches.iter().filter(|b| b.mode == mode).count()
    }
}

/// One epoch of modality-homogeneous batches.
///
/// Pools are shuffled with the seed and cut into full batches (the ragged
/// remainder is dropped). Without `mode_mix` the plan holds exactly those
/// batches in a shuffled order. With `mode_mix = m` each of the same number
/// of slots is paired with probability `m`, reshuffling a pool when it runs
/// dry; an empty pool forces the other mode.
pub fn build_batch_plan(
    paired: &[String],
    ct_only: &[String],
    batch_size: usize,
    mode_mix: Option<f64>,
    contrastive: bool,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(m) = mode_mix {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("mode_mix {m} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    if contrastive && paired.len() < batch_size {
        let w = "no full paired batch available: contrastive losses are inactive and training uses the classification loss only";
        log::warn!("{w}");
        warnings.push(w.to_string());
    }
    let mut pools = [
        Pool::new(paired, batch_size, &mut rng),
        Pool::new(ct_only, batch_size, &mut rng),
    ];
    let total = pools[0].full + pools[1].full;
    let mut modes: Vec<BatchMode> = match mode_mix {
        None => {
            let mut m = vec![BatchMode::Paired; pools[0].full];
            m.extend(vec![BatchMode::CtOnly; pools[1].full]);
            m.shuffle(&mut rng);
            m
        }
        Some(mix) => (0..total)
            .map(|_| {
                let want_paired = rng.random::<f64>() < mix;
                match (want_paired, pools[0].full > 0, pools[1].full > 0) {
                    (true, true, _) | (false, true, false) => BatchMode::Paired,
                    _ => BatchMode::CtOnly,
                }
            })
            .collect(),
    };
    let mut batches = Vec::with_capacity(modes.len());
    for mode in modes.drain(..) {
        let pool = &mut pools[usize::from(mode == BatchMode::CtOnly)];
        batches.push(Batch {
            mode,
            case_ids: pool.take(&mut rng),
        });
    }
    Ok(BatchPlan { batches, warnings })
}

struct Pool {
    ids: Vec<String>,
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    full: usize,
}

impl Pool {
    fn new(ids: &[String], size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.shuffle(rng);
        Pool {
            ids: ids.to_vec(),
            order,
            cursor: 0,
            size,
            full: ids.len() / size,
        }
    }

    fn take(&mut self, rng: &mut ChaCha8Rng) -> Vec<String> {
        if self.cursor + self.size > self.full * self.size {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.size]
            .iter()
            .map(|&i| self.ids[i].clone())
            .collect();
        self.cursor += self.size;
        out
    }
}
