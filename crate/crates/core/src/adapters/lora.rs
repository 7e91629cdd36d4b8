use super::{kaiming_uniform, low_rank_output, AdapterConfig, ForwardPass, Variant, STREAM_DENSE_INIT, STREAM_PROJECTION};
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix, SeededStream};
use crate::projection::sparse_projection_from;
use crate::routing::{select_topk, BalanceState};

/// Dense-`A` adapter covering LoRA, LoRA-FA and the trainable-`A` FlyLoRA
/// ablation.
///
/// * `lora`: Kaiming-uniform `A`, trained.
/// * `lora-fa`: sparse random `A` (densified), frozen, all ranks active.
/// * `flylora-trn`: sparse random `A` as the starting point, trained, top-k
///   routed with balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: AdapterConfig,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub base: DenseMatrix,
    pub train_a: bool,
    pub balance: Option<BalanceState>,
    pub(crate) grad_a: DenseMatrix,
    pub(crate) grad_b: DenseMatrix,
}

impl LoraAdapter {
    pub fn new(config: AdapterConfig, base: DenseMatrix, seed: u64) -> Result<Self> {
        config.validate()?;
        let a = match config.variant {
            Variant::Lora => kaiming_uniform(config.r, config.n, &mut SeededStream::new(seed, STREAM_DENSE_INIT)),
            Variant::LoraFa | Variant::FlyLoraTrainableA => {
                let mut stream = SeededStream::new(seed, STREAM_PROJECTION);
                sparse_projection_from(config.n, config.r, config.p(), &mut stream)?.to_dense()
            }
            other => {
                return Err(Error::param("variant", format!("LoraAdapter cannot build {other}")));
            }
        };
        Self::from_parts(config, a, DenseMatrix::zeros(0, 0), base)
    }

    /// Assembles an adapter from explicit factors. An empty `b` means zeros.
    pub fn from_parts(config: AdapterConfig, a: DenseMatrix, b: DenseMatrix, base: DenseMatrix) -> Result<Self> {
        config.validate()?;
        let (m, n, r) = (config.m, config.n, config.r);
        if base.shape() != (m, n) {
            return Err(Error::dim("base weight", format!("{m}×{n}"), format!("{:?}", base.shape())));
        }
        if a.shape() != (r, n) {
            return Err(Error::dim("A", format!("{r}×{n}"), format!("{:?}", a.shape())));
        }
        let b = if b.rows() == 0 { DenseMatrix::zeros(m, r) } else { b };
        if b.shape() != (m, r) {
            return Err(Error::dim("B", format!("{m}×{r}"), format!("{:?}", b.shape())));
        }
        let (train_a, routed) = match config.variant {
            Variant::Lora => (true, false),
            Variant::LoraFa => (false, false),
            Variant::FlyLoraTrainableA => (true, true),
            other => return Err(Error::param("variant", format!("LoraAdapter cannot hold {other}"))),
        };
        let balance = if routed {
            Some(BalanceState::new(r, config.k, config.effective_balance_rate())?)
        } else {
            None
        };
        Ok(Self {
            grad_a: DenseMatrix::zeros(r, n),
            grad_b: DenseMatrix::zeros(m, r),
            config,
            a,
            b,
            base,
            train_a,
            balance,
        })
    }

    pub(crate) fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.config.n {
            return Err(Error::dim("lora forward", self.config.n, x.len()));
        }
        let h = self.a.matvec(x)?;
        let (decision, gates) = match &self.balance {
            Some(bal) => {
                let d = select_topk(&h, &bal.bias, self.config.k, self.config.selection)?;
                let g = d.mask_f64();
                (Some(d), g)
            }
            None => (None, vec![1.0; h.len()]),
        };
        let terms: Vec<(usize, f64)> = (0..h.len()).filter(|&i| gates[i] != 0.0).map(|i| (i, h[i])).collect();
        let output = low_rank_output(&self.base, &self.b, &terms, self.config.scale(), x)?;
        Ok(ForwardPass {
            output,
            hidden: h,
            gates,
            decision,
        })
    }

    pub(crate) fn accumulate(&mut self, x: &[f64], pass: &ForwardPass, upstream: &[f64]) -> Result<()> {
        let (m, r) = (self.config.m, self.config.r);
        if upstream.len() != m || x.len() != self.config.n {
            return Err(Error::dim("lora backward", format!("upstream {m}, input {}", self.config.n), format!("{}, {}", upstream.len(), x.len())));
        }
        if pass.hidden.len() != r || pass.gates.len() != r {
            return Err(Error::Contract("forward pass does not match this adapter".into()));
        }
        let s = self.config.scale();
        let gs = self.grad_b.as_mut_slice();
        for (j, &u) in upstream.iter().enumerate() {
            let row = &mut gs[j * r..(j + 1) * r];
            for i in 0..r {
                if pass.gates[i] != 0.0 {
                    row[i] += s * u * pass.hidden[i];
                }
            }
        }
        if self.train_a {
            // ∂L/∂h_i = s · b_iᵀ u for active ranks; ∂L/∂a_i = (∂L/∂h_i) · x.
            let bt_u = self.b.tr_matvec(upstream)?;
            for i in 0..r {
                if pass.gates[i] != 0.0 {
                    let coef = s * bt_u[i];
                    if coef != 0.0 {
                        crate::linalg::axpy(coef, x, self.grad_a.row_mut(i));
                    }
                }
            }
        }
        if let (Some(bal), Some(d)) = (self.balance.as_mut(), pass.decision.as_ref()) {
            bal.record_assignments(d);
        }
        Ok(())
    }

    pub(crate) fn step(&mut self, scale: f64) {
        self.b.add_scaled(-scale, &self.grad_b).expect("same shape");
        self.grad_b.scale(0.0);
        if self.train_a {
            self.a.add_scaled(-scale, &self.grad_a).expect("same shape");
            self.grad_a.scale(0.0);
        }
        if let Some(bal) = self.balance.as_mut() {
            bal.update_bias();
        }
    }

    /// `‖a_i‖` per rank, a quick view of how far training moved `A`.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.a.rows()).map(|i| dot(self.a.row(i), self.a.row(i)).sqrt()).collect()
    }
}
