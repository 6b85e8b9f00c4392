//! Per-layer recompute and retention budgets for one prefill.
//!
//! `recompute[i]` is `Recomp[i] = round(T * prod_{j<=i} alpha_recomp[j])`.
//! Layer 0 always computes every token; `recompute[0]` is the number of
//! tokens it marks for recomputation at layer 1. `retain[i]` is the number of
//! tokens left live after layer `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::round_half_up;
use crate::recompute::{default_alpha_ramp, first_layer_budget, product_budgets, HotColdSplit};
use crate::retention::{default_rate, first_layer_ratio, pattern_ratios, PatternKind, RetentionPattern};

/// First-layer inputs derived from the reference prompt before prefill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstLayerRule {
    pub hot: Vec<usize>,
    pub r_dynamic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub alpha_recomp: Vec<f64>,
    pub alpha_retain: Vec<f64>,
    pub recompute: Vec<usize>,
    pub retain: Vec<usize>,
    pub first_layer: Option<FirstLayerRule>,
}

fn step_ratios(t: usize, counts: &[usize]) -> Vec<f64> {
    let mut prev = t as f64;
    counts
        .iter()
        .map(|&c| {
            let a = c as f64 / prev;
            prev = c as f64;
            a
        })
        .collect()
}

impl LayerSchedule {
    /// Every token recomputed and retained at every layer.
    pub fn full(n_layers: usize, t: usize) -> Self {
        Self {
            alpha_recomp: vec![1.0; n_layers],
            alpha_retain: vec![1.0; n_layers],
            recompute: vec![t; n_layers],
            retain: vec![t; n_layers],
            first_layer: None,
        }
    }

    pub fn from_budgets(t: usize, recompute: Vec<usize>, retain: Vec<usize>) -> Result<Self> {
        let s = Self {
            alpha_recomp: step_ratios(t, &recompute),
            alpha_retain: step_ratios(t, &retain),
            recompute,
            retain,
            first_layer: None,
        };
        s.validate(s.recompute.len(), t)?;
        Ok(s)
    }

    pub fn n_layers(&self) -> usize {
        self.recompute.len()
    }

    pub fn is_full_recompute(&self, t: usize) -> bool {
        self.recompute.iter().all(|&r| r >= t)
    }

    pub fn is_full_retain(&self, t: usize) -> bool {
        self.retain.iter().all(|&r| r >= t)
    }

    pub fn validate(&self, n_layers: usize, t: usize) -> Result<()> {
        if self.recompute.len() != n_layers || self.retain.len() != n_layers {
            return Err(Error::Schedule(format!(
                "schedule covers {}/{} layers, model has {n_layers}",
                self.recompute.len(),
                self.retain.len()
            )));
        }
        for (name, v) in [("recompute", &self.recompute), ("retain", &self.retain)] {
            if v.iter().any(|&b| b == 0 || b > t) {
                return Err(Error::Schedule(format!("{name} budgets {v:?} outside [1, {t}]")));
            }
            if v.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Schedule(format!("{name} budgets {v:?} grow with depth")));
            }
        }
        if let Some(rule) = &self.first_layer {
            if rule.hot.iter().any(|&h| h >= t) {
                return Err(Error::Schedule("hot token beyond prompt length".into()));
            }
        }
        Ok(())
    }
}

/// Knobs for [`plan_schedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub omega_cold: f64,
    pub omega_hot: f64,
    /// Ratios for layers `1..n`; empty selects the default ramp.
    pub alpha_recomp: Vec<f64>,
    pub retention: Option<RetentionShape>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionShape {
    pub kind: PatternKind,
    /// Decay/growth rate; `None` halves retention between first and last layer.
    pub rate: Option<f64>,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            omega_cold: crate::recompute::OMEGA_COLD,
            omega_hot: crate::recompute::OMEGA_HOT,
            alpha_recomp: Vec::new(),
            retention: Some(RetentionShape { kind: PatternKind::ExpDecay, rate: None }),
        }
    }
}

/// Closed-form budgets for a `t`-token prompt.
///
/// With a hot/cold split, `recompute[0]` is the first-layer budget and the
/// first layer keeps `max(0.8, r_dynamic)` of the prompt unless hot plus
/// marked tokens exceed that. Without one, every token is recomputed.
pub fn plan_schedule(t: usize, n_layers: usize, split: Option<&HotColdSplit>, params: &ScheduleParams) -> Result<LayerSchedule> {
    if t == 0 || n_layers == 0 {
        return Err(Error::Empty("schedule over zero tokens or layers"));
    }
    let ramp = if params.alpha_recomp.is_empty() { default_alpha_ramp(n_layers) } else { params.alpha_recomp.clone() };
    if ramp.len() != n_layers - 1 {
        return Err(Error::Config(format!("alpha_recomp needs {} entries, got {}", n_layers - 1, ramp.len())));
    }
    if let Some(a) = ramp.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::Config(format!("alpha_recomp entry {a} outside (0, 1]")));
    }

    let (recompute, alpha_recomp) = match split {
        Some(s) => {
            if s.len() != t {
                return Err(Error::Shape(format!("hot/cold split over {} tokens, prompt has {t}", s.len())));
            }
            let b = first_layer_budget(s, params.omega_cold, params.omega_hot);
            let mut alpha = vec![b as f64 / t as f64];
            alpha.extend_from_slice(&ramp);
            (product_budgets(t, &alpha), alpha)
        }
        None => (vec![t; n_layers], vec![1.0; n_layers]),
    };

    let retain = match params.retention {
        None => vec![t; n_layers],
        Some(shape) => {
            let r_dynamic = split.map_or(0.0, |s| s.r_dynamic);
            let target = round_half_up(first_layer_ratio(r_dynamic) * t as f64).clamp(1, t);
            let n_protected = split.map_or(0, |s| s.hot.len()) + if split.is_some() { recompute[0] } else { 0 };
            let first = if n_protected > target { t } else { target };
            let pattern = RetentionPattern {
                kind: shape.kind,
                start_ratio: first as f64 / t as f64,
                rate: shape.rate.unwrap_or_else(|| default_rate(n_layers)),
            };
            let ratios = pattern_ratios(&pattern, n_layers)?;
            let mut out = vec![first];
            for i in 1..n_layers {
                let floor = if split.is_some() { recompute[i].max(1) } else { 1 };
                let v = round_half_up(t as f64 * ratios[i]).max(floor).min(out[i - 1]);
                out.push(v);
            }
            out
        }
    };

    Ok(LayerSchedule {
        alpha_retain: step_ratios(t, &retain),
        alpha_recomp,
        recompute,
        retain,
        first_layer: split.map(|s| FirstLayerRule { hot: s.hot.clone(), r_dynamic: s.r_dynamic }),
    })
}
