use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{SelectionMode, DEFAULT_BALANCE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Trainable dense `A` and `B`.
    Lora,
    /// Frozen random `A`, trainable `B`, all ranks active.
    LoraFa,
    /// `N` expert pairs behind a sigmoid-gated top-k router.
    SplitLora,
    /// Frozen sparse `A`, implicit top-k rank routing.
    FlyLora,
    /// FlyLoRA routing with `A` left trainable (ablation).
    FlyLoraTrainableA,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Lora,
        Variant::LoraFa,
        Variant::SplitLora,
        Variant::FlyLora,
        Variant::FlyLoraTrainableA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::LoraFa => "lora-fa",
            Variant::SplitLora => "split-lora",
            Variant::FlyLora => "flylora",
            Variant::FlyLoraTrainableA => "flylora-trn",
        }
    }

    pub fn trains_a(self) -> bool {
        matches!(self, Variant::Lora | Variant::SplitLora | Variant::FlyLoraTrainableA)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::param(
                    "variant",
                    format!("unknown variant `{s}` (lora|lora-fa|split-lora|flylora|flylora-trn)"),
                )
            })
    }
}

/// Shape and hyperparameters of one adapter on an `m × n` linear map.
///
/// `r` is the total rank and `k` the number of ranks (FlyLoRA) or experts
/// (Split-LoRA) active per input. Output scaling is `alpha / r` for every
/// variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub variant: Variant,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub k: usize,
    pub alpha: f64,
    /// Nonzero fraction `p / n` of each row of the frozen sparse projection.
    pub rho: f64,
    pub selection: SelectionMode,
    pub balancing: bool,
    pub balance_rate: f64,
    /// Split-LoRA expert count; ignored elsewhere.
    pub experts: usize,
}

impl AdapterConfig {
    /// Defaults: `alpha = 2r`, `ρ = 1/4`, signed selection, balancing on.
    pub fn new(variant: Variant, m: usize, n: usize, r: usize, k: usize) -> Self {
        let k = match variant {
            Variant::Lora | Variant::LoraFa => r,
            _ => k,
        };
        Self {
            variant,
            m,
            n,
            r,
            k,
            alpha: 2.0 * r as f64,
            rho: 0.25,
            selection: SelectionMode::Signed,
            balancing: true,
            balance_rate: DEFAULT_BALANCE_RATE,
            experts: 1,
        }
    }

    pub fn split(m: usize, n: usize, experts: usize, expert_rank: usize, active: usize) -> Self {
        Self {
            experts,
            ..Self::new(Variant::SplitLora, m, n, experts * expert_rank, active)
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_selection(mut self, mode: SelectionMode) -> Self {
        self.selection = mode;
        self
    }

    pub fn with_balancing(mut self, on: bool, rate: f64) -> Self {
        self.balancing = on;
        self.balance_rate = rate;
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// Nonzeros per row of the sparse projection, `round(ρ n)`.
    pub fn p(&self) -> usize {
        (self.rho * self.n as f64).round() as usize
    }

    pub fn expert_rank(&self) -> usize {
        self.r / self.experts.max(1)
    }

    /// Effective balance rate (0 when balancing is off).
    pub fn effective_balance_rate(&self) -> f64 {
        if self.balancing {
            self.balance_rate
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::param("m/n", "dimensions must be positive"));
        }
        if self.r == 0 || self.r > self.m.min(self.n) {
            return Err(Error::param(
                "r",
                format!("need 1 ≤ r ≤ min(m, n) = {}, got {}", self.m.min(self.n), self.r),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.balance_rate >= 0.0 && self.balance_rate.is_finite()) {
            return Err(Error::param("balance_rate", "must be finite and ≥ 0"));
        }
        match self.variant {
            Variant::SplitLora => {
                if self.experts == 0 || self.r % self.experts != 0 {
                    return Err(Error::param(
                        "experts",
                        format!("expert count {} must divide r = {}", self.experts, self.r),
                    ));
                }
                if self.k == 0 || self.k > self.experts {
                    return Err(Error::param(
                        "k",
                        format!("need 1 ≤ k ≤ experts = {}, got {}", self.experts, self.k),
                    ));
                }
            }
            _ => {
                if self.k == 0 || self.k > self.r {
                    return Err(Error::param("k", format!("need 1 ≤ k ≤ r = {}, got {}", self.r, self.k)));
                }
            }
        }
        if matches!(self.variant, Variant::FlyLora | Variant::FlyLoraTrainableA | Variant::LoraFa) {
            let p = self.p();
            if !(self.rho > 0.0 && self.rho < 1.0) || p == 0 || p >= self.n {
                return Err(Error::param(
                    "rho",
                    format!("need 0 < ρn < n, got ρ = {} (p = {p})", self.rho),
                ));
            }
        }
        Ok(())
    }
}

/// Activated trainable parameters for a `d × d` layer:
/// LoRA `2dr`, Split-LoRA `2dk + dN`, FlyLoRA `dk`.
///
/// Split-LoRA's `k` here counts activated ranks (expert rank × active
/// experts). LoRA-FA is counted as FlyLoRA with `k = r`, since only `B`
/// trains and every rank is active.
pub fn count_activated_params(variant: Variant, d: u64, r: u64, k: u64, experts: u64) -> Result<u64> {
    if d == 0 || r == 0 {
        return Err(Error::param("d/r", "must be positive"));
    }
    Ok(match variant {
        Variant::Lora => 2 * d * r,
        Variant::SplitLora => 2 * d * k + d * experts,
        Variant::FlyLora => d * k,
        Variant::LoraFa => d * r,
        Variant::FlyLoraTrainableA => {
            return Err(Error::param(
                "variant",
                "no activated-parameter formula for flylora-trn",
            ))
        }
    })
}

/// Activated parameter count for a configured adapter with hidden size `d`.
pub fn activated_params_for(config: &AdapterConfig, d: u64) -> Result<u64> {
    let (r, k) = (config.r as u64, config.k as u64);
    match config.variant {
        Variant::SplitLora => count_activated_params(
            Variant::SplitLora,
            d,
            r,
            k * config.expert_rank() as u64,
            config.experts as u64,
        ),
        v => count_activated_params(v, d, r, k, config.experts as u64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_formulas() {
        assert_eq!(count_activated_params(Variant::Lora, 4096, 32, 8, 4).unwrap(), 262_144);
        assert_eq!(count_activated_params(Variant::FlyLora, 4096, 32, 8, 4).unwrap(), 32_768);
        assert_eq!(count_activated_params(Variant::SplitLora, 4096, 32, 8, 4).unwrap(), 81_920);
        assert!(count_activated_params(Variant::FlyLoraTrainableA, 4096, 32, 8, 4).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("dora".parse::<Variant>().is_err());
    }

    #[test]
    fn defaults_and_validation() {
        let c = AdapterConfig::new(Variant::FlyLora, 32, 256, 16, 4);
        assert_eq!(c.alpha, 32.0);
        assert_eq!(c.p(), 64);
        c.validate().unwrap();

        assert!(AdapterConfig::new(Variant::FlyLora, 32, 256, 16, 17).validate().is_err());
        assert!(AdapterConfig::new(Variant::FlyLora, 8, 256, 16, 4).validate().is_err());
        assert!(AdapterConfig::new(Variant::FlyLora, 32, 256, 16, 4).with_rho(1.0).validate().is_err());
        assert!(AdapterConfig::new(Variant::FlyLora, 32, 256, 16, 4).with_alpha(0.0).validate().is_err());
        assert!(AdapterConfig::split(32, 256, 3, 5, 1).validate().is_ok());
        assert!(AdapterConfig::split(32, 256, 4, 4, 5).validate().is_err());

        // LoRA and LoRA-FA always activate every rank.
        assert_eq!(AdapterConfig::new(Variant::LoraFa, 32, 256, 16, 4).k, 16);
    }
}
