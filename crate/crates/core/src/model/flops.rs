use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::Result;
use crate::schedule::LayerSchedule;

/// Multiply-accumulates of one prefill.
///
/// Attention per layer: `q * 4d^2` for the Q/K/V/O projections plus
/// `2 * q * keys * d` for scores and the weighted sum over the full live key
/// block (the causal mask is applied, not skipped). MLP: `q * 8d^2`. Layer 0
/// computes every token over every key; layer `i` computes
/// `min(recompute[i], retain[i-1])` queries over `retain[i-1]` keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub attention: u64,
    pub mlp: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.attention + self.mlp
    }
}

pub fn count_prefill_flops(config: &ModelConfig, t: usize, schedule: &LayerSchedule) -> Result<FlopCount> {
    schedule.validate(config.n_layers, t)?;
    let d = config.d_model as u64;
    let mut out = FlopCount::default();
    for l in 0..config.n_layers {
        let (q, keys) = if l == 0 {
            (t as u64, t as u64)
        } else {
            let keys = schedule.retain[l - 1] as u64;
            ((schedule.recompute[l] as u64).min(keys), keys)
        };
        out.attention += q * 4 * d * d + 2 * q * keys * d;
        out.mlp += q * 8 * d * d;
    }
    Ok(out)
}
