use super::{kaiming_uniform, low_rank_output, AdapterConfig, ForwardPass, Variant, STREAM_DENSE_INIT, STREAM_ROUTER};
use crate::error::{Error, Result};
use crate::linalg::{axpy, DenseMatrix, SeededStream};
use crate::routing::{select_topk, RoutingDecision, SelectionMode};

/// `N` experts of rank `r/N` stored as row blocks of one `A` (`r × n`) and
/// column blocks of one `B` (`m × r`), plus an `N × n` router.
///
/// The top-k experts by router logit are active with gate
/// `sigmoid(logit)`; the others are off. Gradients flow through the gates
/// into the router.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAdapter {
    pub config: AdapterConfig,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub router: DenseMatrix,
    pub base: DenseMatrix,
    /// Lifetime selection counts per expert.
    pub totals: Vec<u64>,
    pub(crate) grad_a: DenseMatrix,
    pub(crate) grad_b: DenseMatrix,
    pub(crate) grad_router: DenseMatrix,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl SplitAdapter {
    /// Expert `A` blocks are Kaiming-uniform, `B` starts at zero and the
    /// router is `N(0, 1/n)`.
    pub fn new(config: AdapterConfig, base: DenseMatrix, seed: u64) -> Result<Self> {
        config.validate()?;
        let a = kaiming_uniform(config.r, config.n, &mut SeededStream::new(seed, STREAM_DENSE_INIT));
        let mut rs = SeededStream::new(seed, STREAM_ROUTER);
        let std = 1.0 / (config.n as f64).sqrt();
        let router = DenseMatrix::from_vec(
            config.experts,
            config.n,
            (0..config.experts * config.n).map(|_| std * rs.normal()).collect(),
        )?;
        Self::from_parts(config, a, DenseMatrix::zeros(0, 0), router, base)
    }

    pub fn from_parts(
        config: AdapterConfig,
        a: DenseMatrix,
        b: DenseMatrix,
        router: DenseMatrix,
        base: DenseMatrix,
    ) -> Result<Self> {
        if config.variant != Variant::SplitLora {
            return Err(Error::param("variant", format!("SplitAdapter needs split-lora, got {}", config.variant)));
        }
        config.validate()?;
        let (m, n, r, e) = (config.m, config.n, config.r, config.experts);
        let b = if b.rows() == 0 { DenseMatrix::zeros(m, r) } else { b };
        for (name, got, want) in [
            ("base weight", base.shape(), (m, n)),
            ("A", a.shape(), (r, n)),
            ("B", b.shape(), (m, r)),
            ("router", router.shape(), (e, n)),
        ] {
            if got != want {
                return Err(Error::dim(name, format!("{want:?}"), format!("{got:?}")));
            }
        }
        Ok(Self {
            grad_a: DenseMatrix::zeros(r, n),
            grad_b: DenseMatrix::zeros(m, r),
            grad_router: DenseMatrix::zeros(e, n),
            totals: vec![0; e],
            config,
            a,
            b,
            router,
            base,
        })
    }

    /// Router decision over experts.
    pub fn route(&self, x: &[f64]) -> Result<RoutingDecision> {
        let logits = self.router.matvec(x)?;
        let zero = vec![0.0; logits.len()];
        select_topk(&logits, &zero, self.config.k, SelectionMode::Signed)
    }

    pub(crate) fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.config.n {
            return Err(Error::dim("split_lora_forward", self.config.n, x.len()));
        }
        let decision = self.route(x)?;
        let h = self.a.matvec(x)?;
        let er = self.config.expert_rank();
        let gates: Vec<f64> = (0..self.config.r)
            .map(|i| {
                let e = i / er;
                if decision.mask[e] {
                    sigmoid(decision.scores[e])
                } else {
                    0.0
                }
            })
            .collect();
        let terms: Vec<(usize, f64)> = (0..h.len())
            .filter(|&i| gates[i] != 0.0)
            .map(|i| (i, gates[i] * h[i]))
            .collect();
        let output = low_rank_output(&self.base, &self.b, &terms, self.config.scale(), x)?;
        Ok(ForwardPass {
            output,
            hidden: h,
            gates,
            decision: Some(decision),
        })
    }

    pub(crate) fn accumulate(&mut self, x: &[f64], pass: &ForwardPass, upstream: &[f64]) -> Result<()> {
        let (m, r) = (self.config.m, self.config.r);
        if upstream.len() != m || x.len() != self.config.n {
            return Err(Error::dim("split backward", format!("upstream {m}, input {}", self.config.n), format!("{}, {}", upstream.len(), x.len())));
        }
        let decision = pass
            .decision
            .as_ref()
            .ok_or_else(|| Error::Contract("missing router decision".into()))?;
        if pass.hidden.len() != r || decision.rank() != self.config.experts {
            return Err(Error::Contract("forward pass does not match this adapter".into()));
        }
        let s = self.config.scale();
        let er = self.config.expert_rank();
        let bt_u = self.b.tr_matvec(upstream)?;
        let gs = self.grad_b.as_mut_slice();
        for (j, &u) in upstream.iter().enumerate() {
            let row = &mut gs[j * r..(j + 1) * r];
            for i in 0..r {
                if pass.gates[i] != 0.0 {
                    row[i] += s * u * pass.gates[i] * pass.hidden[i];
                }
            }
        }
        let mut d_gate = vec![0.0; self.config.experts];
        for i in 0..r {
            let g = pass.gates[i];
            if g != 0.0 {
                axpy(s * g * bt_u[i], x, self.grad_a.row_mut(i));
                d_gate[i / er] += s * pass.hidden[i] * bt_u[i];
            }
        }
        for &e in &decision.selected {
            let sg = sigmoid(decision.scores[e]);
            let d_logit = d_gate[e] * sg * (1.0 - sg);
            axpy(d_logit, x, self.grad_router.row_mut(e));
            self.totals[e] += 1;
        }
        Ok(())
    }

    pub(crate) fn step(&mut self, scale: f64) {
        self.b.add_scaled(-scale, &self.grad_b).expect("same shape");
        self.a.add_scaled(-scale, &self.grad_a).expect("same shape");
        self.router.add_scaled(-scale, &self.grad_router).expect("same shape");
        self.grad_b.scale(0.0);
        self.grad_a.scale(0.0);
        self.grad_router.scale(0.0);
    }
}

/// Split-LoRA output for one input.
pub fn split_lora_forward(adapter: &SplitAdapter, x: &[f64]) -> Result<Vec<f64>> {
    Ok(adapter.forward_pass(x)?.output)
}
