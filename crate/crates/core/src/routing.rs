//! Top-k rank selection with a loss-free balancing bias.
//!
//! The bias `d` only shifts which ranks are selected; it never enters the
//! adapter output or the loss. After each optimizer step the bias moves by
//! `u · sign(c̄_i − c_i)` toward under-used ranks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Largest `(Ax + d)_i`.
    #[default]
    Signed,
    /// Largest `|(Ax)_i| + d_i`.
    Magnitude,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(Self::Signed),
            "magnitude" => Ok(Self::Magnitude),
            other => Err(Error::param("selection", format!("unknown mode `{other}` (signed|magnitude)"))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Signed => "signed",
            Self::Magnitude => "magnitude",
        })
    }
}

/// Outcome of one top-k selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Selected ranks in descending criterion order.
    pub selected: Vec<usize>,
    /// Raw projection scores `Ax` (before bias).
    pub scores: Vec<f64>,
    /// Binary mask, 1 at selected ranks.
    pub mask: Vec<bool>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn rank(&self) -> usize {
        self.scores.len()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Selects the `k` ranks with the largest criterion value. Ties go to the
/// lower index.
pub fn select_topk(scores: &[f64], bias: &[f64], k: usize, mode: SelectionMode) -> Result<RoutingDecision> {
    let r = scores.len();
    if bias.len() != r {
        return Err(Error::dim("select_topk", r, bias.len()));
    }
    if k == 0 || k > r {
        return Err(Error::param("k", format!("need 1 ≤ k ≤ r = {r}, got {k}")));
    }
    let crit: Vec<f64> = match mode {
        SelectionMode::Signed => scores.iter().zip(bias).map(|(s, d)| s + d).collect(),
        SelectionMode::Magnitude => scores.iter().zip(bias).map(|(s, d)| s.abs() + d).collect(),
    };
    let mut order: Vec<usize> = (0..r).collect();
    // Stable sort on descending criterion keeps lower indices first on ties.
    order.sort_by(|&a, &b| crit[b].total_cmp(&crit[a]));
    order.truncate(k);
    let mut mask = vec![false; r];
    for &i in &order {
        mask[i] = true;
    }
    Ok(RoutingDecision {
        selected: order,
        scores: scores.to_vec(),
        mask,
    })
}

/// Bias, per-window assignment counters, and expected counts for `r` ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceState {
    pub bias: Vec<f64>,
    pub counts: Vec<u64>,
    pub expected: Vec<f64>,
    pub rate: f64,
    pub k: usize,
    /// Tokens routed since the last update.
    pub window_tokens: u64,
    /// Lifetime assignment totals, never reset.
    pub totals: Vec<u64>,
}

pub const DEFAULT_BALANCE_RATE: f64 = 1e-3;

impl BalanceState {
    pub fn new(r: usize, k: usize, rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::param("balance_rate", format!("must be finite and ≥ 0, got {rate}")));
        }
        if k == 0 || k > r {
            return Err(Error::param("k", format!("need 1 ≤ k ≤ r = {r}, got {k}")));
        }
        Ok(Self {
            bias: vec![0.0; r],
            counts: vec![0; r],
            expected: vec![0.0; r],
            rate,
            k,
            window_tokens: 0,
            totals: vec![0; r],
        })
    }

    pub fn rank(&self) -> usize {
        self.bias.len()
    }

    pub fn record_assignments(&mut self, decision: &RoutingDecision) {
        debug_assert_eq!(decision.rank(), self.rank());
        for &i in &decision.selected {
            self.counts[i] += 1;
            self.totals[i] += 1;
        }
        self.window_tokens += 1;
    }

    /// Ends a window: recomputes `c̄ = (k/r) · tokens`, applies
    /// `d_i += u · sign(c̄_i − c_i)` with `sign(0) = 0`, resets the counters.
    pub fn update_bias(&mut self) {
        let r = self.rank() as f64;
        let target = self.k as f64 / r * self.window_tokens as f64;
        self.expected.iter_mut().for_each(|e| *e = target);
        for ((d, &c), &e) in self.bias.iter_mut().zip(&self.counts).zip(&self.expected) {
            let diff = e - c as f64;
            if diff > 0.0 {
                *d += self.rate;
            } else if diff < 0.0 {
                *d -= self.rate;
            }
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.window_tokens = 0;
    }
}

/// Applies one bias step against explicit expected counts and returns the
/// new state. Counts are reset; `expected` is left as supplied.
pub fn update_balance_bias(mut state: BalanceState) -> BalanceState {
    for ((d, &c), &e) in state.bias.iter_mut().zip(&state.counts).zip(&state.expected) {
        let diff = e - c as f64;
        if diff > 0.0 {
            *d += state.rate;
        } else if diff < 0.0 {
            *d -= state.rate;
        }
    }
    state.counts.iter_mut().for_each(|c| *c = 0);
    state.window_tokens = 0;
    state
}

pub fn record_assignments(mut state: BalanceState, decision: &RoutingDecision) -> BalanceState {
    state.record_assignments(decision);
    state
}

/// Coefficient of variation (population std / mean) of a count vector.
pub fn coefficient_of_variation(counts: &[u64]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Synthetic routing stream whose rank scores carry a fixed per-rank
/// offset that rises linearly from 0 to `skew`, plus `N(0, noise²)` jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewedStream {
    pub r: usize,
    pub k: usize,
    pub windows: usize,
    pub tokens_per_window: usize,
    pub skew: f64,
    pub noise: f64,
}

impl Default for SkewedStream {
    fn default() -> Self {
        Self {
            r: 16,
            k: 4,
            windows: 200,
            tokens_per_window: 64,
            skew: 0.1,
            noise: 0.1,
        }
    }
}

/// Routes the stream with bias updates at rate `rate` after every window and
/// returns the final state. The token stream depends only on `seed`.
pub fn simulate_balancing(stream: &SkewedStream, rate: f64, seed: u64) -> Result<BalanceState> {
    let mut state = BalanceState::new(stream.r, stream.k, rate)?;
    let mut rng = crate::linalg::SeededStream::new(seed, 0xBA1A);
    let denom = (stream.r.max(2) - 1) as f64;
    let offsets: Vec<f64> = (0..stream.r).map(|i| stream.skew * i as f64 / denom).collect();
    let mut scores = vec![0.0; stream.r];
    for _ in 0..stream.windows {
        for _ in 0..stream.tokens_per_window {
            for (s, o) in scores.iter_mut().zip(&offsets) {
                *s = o + stream.noise * rng.normal();
            }
            let d = select_topk(&scores, &state.bias, stream.k, SelectionMode::Signed)?;
            state.record_assignments(&d);
        }
        state.update_bias();
    }
    Ok(state)
}
