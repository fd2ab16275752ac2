//! Task objectives and total-loss composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sigmoid, Tape, Tensor, Var};

/// Observed survival: follow-up time in months, censoring flag, discrete bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTarget {
    pub time: f64,
    pub censored: bool,
    pub bin: usize,
}

/// `−log softmax(logits)[label]` for a 1×C row of logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let classes = tape.shape(logits).1;
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let ls = tape.log_softmax_rows(logits);
    let pick = tape.slice_cols(ls, label, 1)?;
    Ok(tape.scale(pick, -1.0))
}

/// Discrete-time hazard negative log-likelihood.
///
/// With `h_k = sigmoid(z_k)` and `S_k = Π_{j≤k} (1 − h_j)` (`S_{-1} = 1`):
/// censored samples contribute `−log S_bin`, events `−log S_{bin−1} − log h_bin`.
/// Log arguments are clamped at `1e-12`.
///
/// `uncensored_weight` blends in the event-only term:
/// `(1 − w)·nll + w·nll_events_only`. Zero gives the plain form.
pub fn nll_survival(
    tape: &mut Tape,
    hazard_logits: Var,
    target: &SurvivalTarget,
    uncensored_weight: f64,
) -> Result<Var> {
    let bins = tape.shape(hazard_logits).1;
    if target.bin >= bins {
        return Err(Error::LabelOutOfRange {
            label: target.bin,
            classes: bins,
        });
    }
    let h = tape.sigmoid(hazard_logits);
    let neg = tape.scale(h, -1.0);
    let one_minus_h = tape.add_scalar(neg, 1.0);

    // S_{bin-1} and S_bin as running products.
    let mut surv_prev: Option<Var> = None;
    for k in 0..target.bin {
        let f = tape.slice_cols(one_minus_h, k, 1)?;
        surv_prev = Some(match surv_prev {
            None => f,
            Some(s) => tape.mul(s, f)?,
        });
    }
    let log_prev = surv_prev.map(|s| tape.log(s));

    let loss = if target.censored {
        let f = tape.slice_cols(one_minus_h, target.bin, 1)?;
        let surv = match surv_prev {
            None => f,
            Some(s) => tape.mul(s, f)?,
        };
        let l = tape.log(surv);
        tape.scale(l, -1.0)
    } else {
        let hb = tape.slice_cols(h, target.bin, 1)?;
        let log_h = tape.log(hb);
        let total = match log_prev {
            None => log_h,
            Some(lp) => tape.add(lp, log_h)?,
        };
        tape.scale(total, -1.0)
    };

    if uncensored_weight == 0.0 {
        return Ok(loss);
    }
    let mixed = tape.scale(loss, 1.0 - uncensored_weight);
    if target.censored {
        Ok(mixed)
    } else {
        let extra = tape.scale(loss, uncensored_weight);
        tape.add(mixed, extra)
    }
}

/// `objective + γ·modularity`.
pub fn total_loss(tape: &mut Tape, objective: Var, modularity: Var, gamma: f64) -> Result<Var> {
    if gamma == 0.0 {
        return Ok(objective);
    }
    let m = tape.scale(modularity, gamma);
    tape.add(objective, m)
}

/// Risk score for ranking: `−Σ_k S_k` from hazard logits (higher = worse).
pub fn survival_risk(hazard_logits: &Tensor) -> f64 {
    let mut surv = 1.0;
    let mut total = 0.0;
    for &z in hazard_logits.data() {
        surv *= 1.0 - sigmoid(z);
        total += surv;
    }
    -total
}

/// Interior bin edges placing times into `n_bins` discrete intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBins {
    pub edges: Vec<f64>,
}

impl SurvivalBins {
    /// Quantile edges (linear interpolation) of the given event times.
    pub fn from_event_times(times: &[f64], n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("n_bins must be positive".into()));
        }
        if times.is_empty() {
            return Err(Error::Config(
                "no uncensored times to place bin edges".into(),
            ));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let edges = (1..n_bins)
            .map(|k| {
                let pos = (n - 1) as f64 * k as f64 / n_bins as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            })
            .collect();
        Ok(Self { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Index of the interval containing `time`; a time equal to an edge goes up.
    pub fn bin(&self, time: f64) -> usize {
        self.edges.iter().filter(|&&e| time >= e).count()
    }
}
