//! Low-rank adapter variants sharing one forward/backward interface.
//!
//! Every variant computes `y = W₀x + (α/r) Σ_i g_i b_i (a_i x)` where the
//! gates `g_i` are 1 (LoRA), 1 on the top-k ranks (FlyLoRA), or a sigmoid of
//! the router logit on the ranks of the top-k experts (Split-LoRA).

mod checkpoint;
mod config;
mod fly;
mod lora;
mod split;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{activated_params_for, count_activated_params, AdapterConfig, Variant};
pub use fly::{backward_b, flylora_forward, FlyAdapter};
pub use lora::LoraAdapter;
pub use split::{split_lora_forward, SplitAdapter};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SeededStream};
use crate::routing::RoutingDecision;

pub(crate) const STREAM_PROJECTION: u64 = 0;
pub(crate) const STREAM_DENSE_INIT: u64 = 1;
pub(crate) const STREAM_ROUTER: u64 = 2;

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    /// Projection `h = Ax` for all `r` ranks.
    pub hidden: Vec<f64>,
    /// Per-rank gate actually applied (0 for inactive ranks).
    pub gates: Vec<f64>,
    pub decision: Option<RoutingDecision>,
}

/// `W₀x + s Σ_{(i, c) ∈ terms} b_i c`, accumulating terms in the given order.
pub(crate) fn low_rank_output(
    base: &DenseMatrix,
    b: &DenseMatrix,
    terms: &[(usize, f64)],
    s: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let mut out = base.matvec(x)?;
    let r = b.cols();
    let bs = b.as_slice();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &bs[j * r..(j + 1) * r];
        let mut acc = 0.0;
        for &(i, c) in terms {
            acc += row[i] * c;
        }
        *o += s * acc;
    }
    Ok(out)
}

fn check_factors(w0: &DenseMatrix, b: &DenseMatrix, a: &DenseMatrix, x: &[f64]) -> Result<()> {
    let (m, n) = w0.shape();
    if a.cols() != n || b.rows() != m || b.cols() != a.rows() {
        return Err(Error::dim(
            "adapter factors",
            format!("W₀ {m}×{n}, B {m}×r, A r×{n}"),
            format!("B {:?}, A {:?}", b.shape(), a.shape()),
        ));
    }
    if x.len() != n {
        return Err(Error::dim("adapter input", n, x.len()));
    }
    Ok(())
}

/// `W₀x + (α/r) B A x` with every rank active.
pub fn lora_forward(w0: &DenseMatrix, b: &DenseMatrix, a: &DenseMatrix, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_factors(w0, b, a, x)?;
    let h = a.matvec(x)?;
    let terms: Vec<(usize, f64)> = h.into_iter().enumerate().collect();
    low_rank_output(w0, b, &terms, alpha / a.rows() as f64, x)
}

/// `W₀x + (α/r) Σ_i g_i b_i (a_i x)`; ranks with `g_i = 0` are skipped.
pub fn rankwise_moe_forward(
    w0: &DenseMatrix,
    b: &DenseMatrix,
    a: &DenseMatrix,
    gates: &[f64],
    alpha: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_factors(w0, b, a, x)?;
    if gates.len() != a.rows() {
        return Err(Error::dim("rankwise_moe_forward gates", a.rows(), gates.len()));
    }
    let mut terms = Vec::with_capacity(gates.len());
    for (i, &g) in gates.iter().enumerate() {
        if g != 0.0 {
            terms.push((i, g * crate::linalg::dot(a.row(i), x)));
        }
    }
    low_rank_output(w0, b, &terms, alpha / a.rows() as f64, x)
}

/// Kaiming-uniform `U(−1/√n, 1/√n)` init for an `r × n` down-projection.
pub(crate) fn kaiming_uniform(r: usize, n: usize, stream: &mut SeededStream) -> DenseMatrix {
    let bound = 1.0 / (n as f64).sqrt();
    let data = (0..r * n).map(|_| bound * (2.0 * stream.uniform() - 1.0)).collect();
    DenseMatrix::from_vec(r, n, data).expect("finite init")
}

/// Any adapter variant behind one training interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Fly(FlyAdapter),
    Lora(LoraAdapter),
    Split(SplitAdapter),
}

impl Adapter {
    /// Builds a fresh adapter of `config.variant` on top of `base`.
    pub fn build(config: AdapterConfig, base: DenseMatrix, seed: u64) -> Result<Self> {
        Ok(match config.variant {
            Variant::FlyLora => Adapter::Fly(FlyAdapter::new(config, base, seed)?),
            Variant::SplitLora => Adapter::Split(SplitAdapter::new(config, base, seed)?),
            Variant::Lora | Variant::LoraFa | Variant::FlyLoraTrainableA => {
                Adapter::Lora(LoraAdapter::new(config, base, seed)?)
            }
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        match self {
            Adapter::Fly(a) => &a.config,
            Adapter::Lora(a) => &a.config,
            Adapter::Split(a) => &a.config,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config().variant
    }

    pub fn base(&self) -> &DenseMatrix {
        match self {
            Adapter::Fly(a) => &a.base,
            Adapter::Lora(a) => &a.base,
            Adapter::Split(a) => &a.base,
        }
    }

    pub fn b(&self) -> &DenseMatrix {
        match self {
            Adapter::Fly(a) => &a.b,
            Adapter::Lora(a) => &a.b,
            Adapter::Split(a) => &a.b,
        }
    }

    pub fn b_mut(&mut self) -> &mut DenseMatrix {
        match self {
            Adapter::Fly(a) => &mut a.b,
            Adapter::Lora(a) => &mut a.b,
            Adapter::Split(a) => &mut a.b,
        }
    }

    /// Dense down-projection (densified for FlyLoRA).
    pub fn a_dense(&self) -> DenseMatrix {
        match self {
            Adapter::Fly(a) => a.a.to_dense(),
            Adapter::Lora(a) => a.a.clone(),
            Adapter::Split(a) => a.a.clone(),
        }
    }

    /// Inference-time forward. Routing state is read but never changed.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        match self {
            Adapter::Fly(a) => a.forward_pass(x),
            Adapter::Lora(a) => a.forward_pass(x),
            Adapter::Split(a) => a.forward_pass(x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// `h = Ax` for every rank.
    pub fn projection(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Adapter::Fly(a) => a.a.spmv(x),
            Adapter::Lora(a) => a.a.matvec(x),
            Adapter::Split(a) => a.a.matvec(x),
        }
    }

    /// Per-sample `∂L/∂B` given `upstream = ∂L/∂y`.
    pub fn b_gradient(&self, x: &[f64], pass: &ForwardPass, upstream: &[f64]) -> Result<DenseMatrix> {
        let (m, r) = self.b().shape();
        if upstream.len() != m {
            return Err(Error::dim("upstream gradient", m, upstream.len()));
        }
        if pass.hidden.len() != r || pass.gates.len() != r {
            return Err(Error::Contract("forward pass does not match this adapter".into()));
        }
        if let Adapter::Fly(a) = self {
            let decision = pass
                .decision
                .as_ref()
                .ok_or_else(|| Error::Contract("missing routing decision".into()))?;
            return backward_b(a, x, upstream, decision);
        }
        let s = self.config().scale();
        let mut g = DenseMatrix::zeros(m, r);
        for (j, &u) in upstream.iter().enumerate() {
            let row = g.row_mut(j);
            for i in 0..r {
                if pass.gates[i] != 0.0 {
                    row[i] = s * u * pass.gates[i] * pass.hidden[i];
                }
            }
        }
        Ok(g)
    }

    /// Adds one sample's parameter gradients and records its routing.
    pub fn accumulate(&mut self, x: &[f64], pass: &ForwardPass, upstream: &[f64]) -> Result<()> {
        match self {
            Adapter::Fly(a) => a.accumulate(x, pass, upstream),
            Adapter::Lora(a) => a.accumulate(x, pass, upstream),
            Adapter::Split(a) => a.accumulate(x, pass, upstream),
        }
    }

    /// One SGD step on the mean of `batch` accumulated gradients, then one
    /// balance-bias update. Clears the accumulators.
    pub fn step(&mut self, lr: f64, batch: usize) {
        let scale = lr / batch.max(1) as f64;
        match self {
            Adapter::Fly(a) => a.step(scale),
            Adapter::Lora(a) => a.step(scale),
            Adapter::Split(a) => a.step(scale),
        }
    }

    /// Static update `ΔW = (α/r) B A` over all ranks.
    ///
    /// Split-LoRA has input-dependent gates and no static update.
    pub fn delta_weight(&self) -> Result<DenseMatrix> {
        let s = self.config().scale();
        match self {
            Adapter::Fly(a) => Ok(a.b.matmul(&a.a.to_dense())?.scaled(s)),
            Adapter::Lora(a) => Ok(a.b.matmul(&a.a)?.scaled(s)),
            Adapter::Split(_) => Err(Error::Contract(
                "split-lora gates depend on the input; it has no static ΔW".into(),
            )),
        }
    }

    /// Lifetime per-rank assignment totals for routed adapters.
    pub fn assignment_totals(&self) -> Option<&[u64]> {
        match self {
            Adapter::Fly(a) => Some(&a.balance.totals),
            Adapter::Lora(a) => a.balance.as_ref().map(|b| b.totals.as_slice()),
            Adapter::Split(a) => Some(&a.totals),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_params(&self) -> usize {
        match self {
            Adapter::Fly(a) => a.b.as_slice().len(),
            Adapter::Lora(a) => a.b.as_slice().len() + if a.train_a { a.a.as_slice().len() } else { 0 },
            Adapter::Split(a) => a.b.as_slice().len() + a.a.as_slice().len() + a.router.as_slice().len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(r: usize, c: usize, s: &mut SeededStream) -> DenseMatrix {
        DenseMatrix::from_vec(r, c, s.normal_vec(r * c)).unwrap()
    }

    #[test]
    fn lora_forward_matches_explicit_product() {
        let mut s = SeededStream::new(4, 0);
        let (w0, b, a) = (rand_mat(5, 7, &mut s), rand_mat(5, 3, &mut s), rand_mat(3, 7, &mut s));
        let x = s.normal_vec(7);
        let y = lora_forward(&w0, &b, &a, 6.0, &x).unwrap();
        let ba = b.matmul(&a).unwrap().scaled(2.0);
        let mut oracle = w0.matvec(&x).unwrap();
        for (o, d) in oracle.iter_mut().zip(ba.matvec(&x).unwrap()) {
            *o += d;
        }
        for (p, q) in y.iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_b_returns_base_output() {
        let mut s = SeededStream::new(5, 0);
        let (w0, a) = (rand_mat(4, 6, &mut s), rand_mat(3, 6, &mut s));
        let x = s.normal_vec(6);
        let y = lora_forward(&w0, &DenseMatrix::zeros(4, 3), &a, 6.0, &x).unwrap();
        assert_eq!(y, w0.matvec(&x).unwrap());
    }

    #[test]
    fn unit_gates_reduce_to_lora() {
        let mut s = SeededStream::new(6, 0);
        let (w0, b, a) = (rand_mat(4, 6, &mut s), rand_mat(4, 3, &mut s), rand_mat(3, 6, &mut s));
        let x = s.normal_vec(6);
        let y = rankwise_moe_forward(&w0, &b, &a, &[1.0; 3], 6.0, &x).unwrap();
        let z = lora_forward(&w0, &b, &a, 6.0, &x).unwrap();
        assert_eq!(y, z);
        let half = rankwise_moe_forward(&w0, &b, &a, &[0.0, 1.0, 0.0], 6.0, &x).unwrap();
        let base = w0.matvec(&x).unwrap();
        for j in 0..4 {
            let oracle = base[j] + 2.0 * b.get(j, 1) * crate::linalg::dot(a.row(1), &x);
            assert!((half[j] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_shape_errors() {
        let w0 = DenseMatrix::zeros(4, 6);
        let b = DenseMatrix::zeros(4, 3);
        let a = DenseMatrix::zeros(2, 6);
        assert!(matches!(lora_forward(&w0, &b, &a, 1.0, &[0.0; 6]), Err(Error::Dimension { .. })));
        let a = DenseMatrix::zeros(3, 6);
        assert!(matches!(lora_forward(&w0, &b, &a, 1.0, &[0.0; 5]), Err(Error::Dimension { .. })));
        assert!(rankwise_moe_forward(&w0, &b, &a, &[1.0; 2], 1.0, &[0.0; 6]).is_err());
    }
}
