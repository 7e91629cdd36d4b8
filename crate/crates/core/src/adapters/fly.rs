use super::{low_rank_output, AdapterConfig, ForwardPass, Variant, STREAM_PROJECTION};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, RowSparseMatrix, SeededStream};
use crate::projection::sparse_projection_from;
use crate::routing::{select_topk, BalanceState, RoutingDecision};

/// Frozen sparse `A`, trainable zero-initialised `B`, top-k rank routing.
#[derive(Debug, Clone, PartialEq)]
pub struct FlyAdapter {
    pub config: AdapterConfig,
    pub a: RowSparseMatrix,
    pub b: DenseMatrix,
    pub base: DenseMatrix,
    pub balance: BalanceState,
    pub(crate) grad_b: DenseMatrix,
}

impl FlyAdapter {
    /// `A` is drawn from stream `(seed, 0)`, identical to
    /// `make_sparse_projection` with the same `(n, r, p, seed)`.
    pub fn new(config: AdapterConfig, base: DenseMatrix, seed: u64) -> Result<Self> {
        let mut stream = SeededStream::new(seed, STREAM_PROJECTION);
        let a = sparse_projection_from(config.n, config.r, config.p(), &mut stream)?;
        Self::from_parts(config, a, DenseMatrix::zeros(0, 0), base)
    }

    /// Assembles an adapter from explicit factors. An empty `b` means zeros.
    pub fn from_parts(config: AdapterConfig, a: RowSparseMatrix, b: DenseMatrix, base: DenseMatrix) -> Result<Self> {
        if config.variant != Variant::FlyLora {
            return Err(Error::param("variant", format!("FlyAdapter needs flylora, got {}", config.variant)));
        }
        config.validate()?;
        let (m, n, r) = (config.m, config.n, config.r);
        if base.shape() != (m, n) {
            return Err(Error::dim("base weight", format!("{m}×{n}"), format!("{:?}", base.shape())));
        }
        if (a.rows(), a.cols()) != (r, n) {
            return Err(Error::dim("projection", format!("{r}×{n}"), format!("{}×{}", a.rows(), a.cols())));
        }
        let b = if b.rows() == 0 { DenseMatrix::zeros(m, r) } else { b };
        if b.shape() != (m, r) {
            return Err(Error::dim("B", format!("{m}×{r}"), format!("{:?}", b.shape())));
        }
        let balance = BalanceState::new(r, config.k, config.effective_balance_rate())?;
        Ok(Self {
            grad_b: DenseMatrix::zeros(m, r),
            config,
            a,
            b,
            base,
            balance,
        })
    }

    /// Output and routing decision; no state change.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, RoutingDecision)> {
        let pass = self.forward_pass(x)?;
        Ok((pass.output, pass.decision.expect("flylora always routes")))
    }

    pub(crate) fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.config.n {
            return Err(Error::dim("flylora_forward", self.config.n, x.len()));
        }
        let h = self.a.spmv(x)?;
        let decision = select_topk(&h, &self.balance.bias, self.config.k, self.config.selection)?;
        // Ascending rank order keeps the sum independent of how the bias
        // orders the selected set.
        let terms: Vec<(usize, f64)> = (0..h.len()).filter(|&i| decision.mask[i]).map(|i| (i, h[i])).collect();
        debug_assert_eq!(terms.len(), self.config.k);
        let output = low_rank_output(&self.base, &self.b, &terms, self.config.scale(), x)?;
        let gates = decision.mask_f64();
        Ok(ForwardPass {
            output,
            hidden: h,
            gates,
            decision: Some(decision),
        })
    }

    pub(crate) fn accumulate(&mut self, x: &[f64], pass: &ForwardPass, upstream: &[f64]) -> Result<()> {
        let decision = pass
            .decision
            .as_ref()
            .ok_or_else(|| Error::Contract("missing routing decision".into()))?;
        check_decision(self, x, decision)?;
        if upstream.len() != self.config.m {
            return Err(Error::dim("upstream gradient", self.config.m, upstream.len()));
        }
        accumulate_masked(&mut self.grad_b, self.config.scale(), upstream, &decision.scores, &decision.mask);
        self.balance.record_assignments(decision);
        Ok(())
    }

    pub(crate) fn step(&mut self, scale: f64) {
        self.b.add_scaled(-scale, &self.grad_b).expect("same shape");
        self.grad_b.scale(0.0);
        self.balance.update_bias();
    }
}

fn accumulate_masked(g: &mut DenseMatrix, s: f64, upstream: &[f64], h: &[f64], mask: &[bool]) {
    let r = h.len();
    let gs = g.as_mut_slice();
    for (j, &u) in upstream.iter().enumerate() {
        let row = &mut gs[j * r..(j + 1) * r];
        for i in 0..r {
            if mask[i] {
                row[i] += s * u * h[i];
            }
        }
    }
}

fn check_decision(adapter: &FlyAdapter, x: &[f64], decision: &RoutingDecision) -> Result<()> {
    let (r, k) = (adapter.config.r, adapter.config.k);
    if decision.rank() != r || decision.k() != k || decision.mask.len() != r {
        return Err(Error::Contract(format!(
            "routing decision has rank {} and k {}, adapter has r = {r}, k = {k}",
            decision.rank(),
            decision.k()
        )));
    }
    let h = adapter.a.spmv(x)?;
    if h.iter().zip(&decision.scores).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Contract("routing decision was not produced for this input".into()));
    }
    Ok(())
}

/// Forward pass; in training mode the selection is also recorded in the
/// balance counters.
pub fn flylora_forward(adapter: &mut FlyAdapter, x: &[f64], train: bool) -> Result<(Vec<f64>, RoutingDecision)> {
    let (y, decision) = adapter.forward(x)?;
    if train {
        adapter.balance.record_assignments(&decision);
    }
    Ok((y, decision))
}

/// `∂L/∂B` for one sample: column `i` is `(α/r)(a_i x) · upstream` when rank
/// `i` was selected and zero otherwise.
pub fn backward_b(adapter: &FlyAdapter, x: &[f64], upstream: &[f64], decision: &RoutingDecision) -> Result<DenseMatrix> {
    if x.len() != adapter.config.n {
        return Err(Error::dim("backward_b input", adapter.config.n, x.len()));
    }
    if upstream.len() != adapter.config.m {
        return Err(Error::dim("backward_b upstream", adapter.config.m, upstream.len()));
    }
    check_decision(adapter, x, decision)?;
    let mut g = DenseMatrix::zeros(adapter.config.m, adapter.config.r);
    accumulate_masked(&mut g, adapter.config.scale(), upstream, &decision.scores, &decision.mask);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::lora_forward;
    use crate::projection::{make_sparse_projection, ProjectionSpec};
    use crate::routing::SelectionMode;
    use proptest::prelude::*;

    fn adapter(m: usize, n: usize, r: usize, k: usize, seed: u64) -> FlyAdapter {
        let mut s = SeededStream::new(seed ^ 0xABCD, 9);
        let base = DenseMatrix::from_vec(m, n, s.normal_vec(m * n)).unwrap();
        let mut a = FlyAdapter::new(AdapterConfig::new(Variant::FlyLora, m, n, r, k), base, seed).unwrap();
        a.b = DenseMatrix::from_vec(m, r, s.normal_vec(m * r)).unwrap();
        a
    }

    #[test]
    fn projection_matches_standalone_construction() {
        let a = adapter(8, 64, 8, 2, 17);
        let spec = ProjectionSpec::new(64, 8, 16, 17).unwrap();
        assert_eq!(a.a.checksum(), make_sparse_projection(&spec).unwrap().checksum());
    }

    fn identity_adapter(k: usize) -> FlyAdapter {
        let cfg = AdapterConfig::new(Variant::FlyLora, 2, 2, 2, k).with_alpha(4.0).with_rho(0.5);
        let a = RowSparseMatrix::new(2, 2, 1, vec![0, 1], vec![1.0, 1.0]).unwrap();
        FlyAdapter::from_parts(cfg, a, DenseMatrix::identity(2), DenseMatrix::zeros(2, 2)).unwrap()
    }

    #[test]
    fn two_by_two_worked_example() {
        let a = identity_adapter(1);
        let (y, d) = a.forward(&[3.0, -1.0]).unwrap();
        assert_eq!(d.selected, vec![0]);
        assert_eq!(y, vec![6.0, 0.0]);
        let g = backward_b(&a, &[3.0, -1.0], &[1.0, 0.0], &d).unwrap();
        assert_eq!(g.column(0), vec![6.0, 0.0]);
        assert_eq!(g.column(1), vec![0.0, 0.0]);

        let full = identity_adapter(2);
        let (y, _) = full.forward(&[3.0, -1.0]).unwrap();
        assert_eq!(y, vec![6.0, -2.0]);
    }

    #[test]
    fn zero_b_still_records_selection() {
        let mut a = identity_adapter(1);
        a.b = DenseMatrix::zeros(2, 2);
        let (y, _) = flylora_forward(&mut a, &[3.0, -1.0], true).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert_eq!(a.balance.counts, vec![1, 0]);
    }

    #[test]
    fn fresh_adapter_is_identity_on_base() {
        let mut s = SeededStream::new(1, 0);
        let base = DenseMatrix::from_vec(4, 32, s.normal_vec(128)).unwrap();
        let a = FlyAdapter::new(AdapterConfig::new(Variant::FlyLora, 4, 32, 4, 1), base.clone(), 3).unwrap();
        let x = s.normal_vec(32);
        assert_eq!(a.forward(&x).unwrap().0, base.matvec(&x).unwrap());
    }

    #[test]
    fn output_is_sum_of_selected_rank_one_terms() {
        let a = adapter(8, 40, 8, 3, 2);
        let x = SeededStream::new(2, 5).normal_vec(40);
        let (y, d) = a.forward(&x).unwrap();
        assert_eq!(d.k(), 3);
        let mut oracle = a.base.matvec(&x).unwrap();
        for &i in &d.selected {
            let ax = a.a.row_dot(i, &x);
            for (j, o) in oracle.iter_mut().enumerate() {
                *o += 2.0 * a.b.get(j, i) * ax;
            }
        }
        for (p, q) in y.iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn full_selection_equals_lora_with_densified_projection() {
        let a = adapter(8, 40, 8, 8, 3);
        let x = SeededStream::new(3, 5).normal_vec(40);
        let (y, _) = a.forward(&x).unwrap();
        let z = lora_forward(&a.base, &a.b, &a.a.to_dense(), a.config.alpha, &x).unwrap();
        for (p, q) in y.iter().zip(&z) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn training_forward_records_and_inference_does_not() {
        let mut a = adapter(8, 32, 8, 2, 4);
        let x = SeededStream::new(4, 1).normal_vec(32);
        flylora_forward(&mut a, &x, false).unwrap();
        assert_eq!(a.balance.counts.iter().sum::<u64>(), 0);
        let (_, d) = flylora_forward(&mut a, &x, true).unwrap();
        for i in 0..8 {
            assert_eq!(a.balance.counts[i], u64::from(d.mask[i]));
        }
    }

    #[test]
    fn backward_is_masked_outer_product() {
        let a = adapter(8, 32, 8, 3, 5);
        let x = SeededStream::new(5, 1).normal_vec(32);
        let (_, d) = a.forward(&x).unwrap();
        let u = vec![1.0, -2.0, 0.5, 0.0, 3.0, 0.25, -1.0, 2.0];
        let g = backward_b(&a, &x, &u, &d).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let oracle = if d.mask[i] { 2.0 * a.a.row_dot(i, &x) * u[j] } else { 0.0 };
                assert!((g.get(j, i) - oracle).abs() < 1e-12);
            }
        }
        let g0 = backward_b(&a, &x, &[0.0; 8], &d).unwrap();
        assert!(g0.is_zero());
    }

    #[test]
    fn stale_decisions_are_rejected() {
        let a = adapter(8, 32, 8, 3, 6);
        let mut s = SeededStream::new(6, 1);
        let (x, x2) = (s.normal_vec(32), s.normal_vec(32));
        let (_, d) = a.forward(&x).unwrap();
        assert!(matches!(backward_b(&a, &x2, &[1.0; 8], &d), Err(Error::Contract(_))));
        let mut short = d.clone();
        short.selected.pop();
        assert!(matches!(backward_b(&a, &x, &[1.0; 8], &short), Err(Error::Contract(_))));
        assert!(matches!(backward_b(&a, &x, &[1.0; 7], &d), Err(Error::Dimension { .. })));
    }

    #[test]
    fn wrong_input_length_is_dimension_error() {
        let a = adapter(8, 32, 8, 2, 7);
        assert!(matches!(a.forward(&[0.0; 31]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn magnitude_mode_selects_largest_absolute_scores() {
        let mut a = adapter(8, 32, 8, 2, 8);
        a.config.selection = SelectionMode::Magnitude;
        let x = SeededStream::new(8, 1).normal_vec(32);
        let (_, d) = a.forward(&x).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&p, &q| d.scores[q].abs().total_cmp(&d.scores[p].abs()));
        assert_eq!(d.selected, order[..2].to_vec());
    }

    proptest! {
        #[test]
        fn bias_never_enters_output(seed in 0u64..500, shift in -0.5f64..0.5) {
            let mut a = adapter(6, 24, 6, 2, seed);
            let x = SeededStream::new(seed, 77).normal_vec(24);
            let (y0, d0) = a.forward(&x).unwrap();
            // A uniform shift leaves the selected set unchanged.
            a.balance.bias.iter_mut().for_each(|d| *d += shift);
            let (y1, d1) = a.forward(&x).unwrap();
            prop_assert_eq!(&d0.mask, &d1.mask);
            for (p, q) in y0.iter().zip(&y1) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }
}
