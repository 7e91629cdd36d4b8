//! Frozen sparse random projections and Monte Carlo checks of their
//! distance-preservation and cross-projection orthogonality guarantees.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{derive_seed, norm2, spectral_norm, sub, DenseMatrix, RowSparseMatrix, SeededStream};

const DISTORTION_LABEL: u64 = 0xD157;
const ORTHO_LABEL: u64 = 0x0127;

/// Shape and seed of a projection `A ∈ R^{r×n}` with `p` nonzeros per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub seed: u64,
}

impl ProjectionSpec {
    pub fn new(n: usize, r: usize, p: usize, seed: u64) -> Result<Self> {
        let s = Self { n, r, p, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::param("r", "projection dimension must be positive"));
        }
        if self.p == 0 || self.p >= self.n {
            return Err(Error::param(
                "p",
                format!("need 0 < p < n, got p = {}, n = {}", self.p, self.n),
            ));
        }
        Ok(())
    }

    /// `ρ = p / n`.
    pub fn sparsity(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    /// Per-entry variance of `A`: `σ² = p / (n r²)`.
    pub fn entry_variance(&self) -> f64 {
        entry_variance(self.n, self.r, self.p)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

fn entry_variance(n: usize, r: usize, p: usize) -> f64 {
    p as f64 / (n as f64 * (r * r) as f64)
}

/// Draws `A` from an existing stream: per row, `p` distinct columns chosen
/// uniformly without replacement, values i.i.d. `N(0, 1/r²)`.
pub fn sparse_projection_from(
    n: usize,
    r: usize,
    p: usize,
    stream: &mut SeededStream,
) -> Result<RowSparseMatrix> {
    if r == 0 || p == 0 || p >= n {
        return Err(Error::param("p", format!("need 0 < p < n and r > 0 (n={n}, r={r}, p={p})")));
    }
    let std = 1.0 / r as f64;
    let mut scratch = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(r * p);
    let mut values = Vec::with_capacity(r * p);
    for _ in 0..r {
        indices.extend(stream.sample_distinct(n, p, &mut scratch));
        values.extend((0..p).map(|_| std * stream.normal()));
    }
    RowSparseMatrix::new(r, n, p, indices, values)
}

pub fn make_sparse_projection(spec: &ProjectionSpec) -> Result<RowSparseMatrix> {
    spec.validate()?;
    let mut stream = SeededStream::new(spec.seed, 0);
    sparse_projection_from(spec.n, spec.r, spec.p, &mut stream)
}

/// `‖A(x−y)‖² / (rσ² ‖x−y‖²)`, whose expectation over `A` is 1.
pub fn distortion_ratio(a: &RowSparseMatrix, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != a.cols() || y.len() != a.cols() {
        return Err(Error::dim("distortion_ratio", a.cols(), format!("{} / {}", x.len(), y.len())));
    }
    let diff = sub(x, y);
    let d2 = norm2(&diff).powi(2);
    if d2 == 0.0 {
        return Err(Error::Degenerate("x == y: distortion ratio undefined".into()));
    }
    let proj = a.spmv(&diff)?;
    let p2 = norm2(&proj).powi(2);
    let r = a.rows() as f64;
    let sigma2 = entry_variance(a.cols(), a.rows(), a.nnz_per_row());
    Ok(p2 / (r * sigma2 * d2))
}

/// Lower bound on `P((1−ε)‖x−y‖² ≤ ‖Ax−Ay‖²/(rσ²) ≤ (1+ε)‖x−y‖²)`:
/// `1 − exp(−(ε²−ε³) r/4) − exp(−(ε²−ε³) r / (2(3p/n + 1)))`.
pub fn distance_preservation_bound(n: usize, r: usize, p: usize, eps: f64) -> f64 {
    let g = eps * eps - eps * eps * eps;
    let r = r as f64;
    let rho = p as f64 / n as f64;
    1.0 - (-g * r / 4.0).exp() - (-g * r / (2.0 * (3.0 * rho + 1.0))).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub theoretical_bound: f64,
    pub mean_ratio: f64,
    pub ratios: Vec<f64>,
}

impl DistortionReport {
    pub fn bound_holds(&self) -> bool {
        self.success_rate >= self.theoretical_bound
    }
}

pub fn verify_distance_preservation(
    spec: &ProjectionSpec,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<DistortionReport> {
    spec.validate()?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::param("eps", format!("must lie in (0, 1), got {eps}")));
    }
    if trials < 100 {
        return Err(Error::param("trials", format!("need at least 100, got {trials}")));
    }
    let base = derive_seed(seed, DISTORTION_LABEL);
    let (n, r, p) = (spec.n, spec.r, spec.p);
    let ratios: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut s = SeededStream::new(base, t);
            let a = sparse_projection_from(n, r, p, &mut s)?;
            let x = s.normal_vec(n);
            let y = s.normal_vec(n);
            distortion_ratio(&a, &x, &y)
        })
        .collect::<Result<_>>()?;

    let inside = ratios
        .iter()
        .filter(|&&q| q >= 1.0 - eps && q <= 1.0 + eps)
        .count();
    Ok(DistortionReport {
        n,
        r,
        p,
        epsilon: eps,
        trials,
        success_rate: inside as f64 / trials as f64,
        theoretical_bound: distance_preservation_bound(n, r, p, eps),
        mean_ratio: ratios.iter().sum::<f64>() / trials as f64,
        ratios,
    })
}

/// `A_i A_jᵀ ∈ R^{r×r}`.
pub fn cross_projection_gram(ai: &RowSparseMatrix, aj: &RowSparseMatrix) -> Result<DenseMatrix> {
    if ai.cols() != aj.cols() || ai.rows() != aj.rows() {
        return Err(Error::dim(
            "cross_projection_gram",
            format!("{}x{}", ai.rows(), ai.cols()),
            format!("{}x{}", aj.rows(), aj.cols()),
        ));
    }
    if ai.checksum() == aj.checksum() {
        log::warn!("cross_projection_gram: both projections are identical (same seed?); this is a self-product");
    }
    ai.gram_with(aj)
}

/// Chebyshev tail bound `p² / (n r² ε²)` on `P(‖A_iA_jᵀ‖₂ ≥ εr)`.
pub fn orthogonality_tail_bound(n: usize, r: usize, p: usize, eps: f64) -> f64 {
    let (n, r, p) = (n as f64, r as f64, p as f64);
    p * p / (n * r * r * eps * eps)
}

/// Variance of one entry of `A_iA_jᵀ`: `n σ⁴ = p² / (n r⁴)`.
pub fn gram_entry_variance(n: usize, r: usize, p: usize) -> f64 {
    let (n, r, p) = (n as f64, r as f64, p as f64);
    p * p / (n * r.powi(4))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub epsilon: f64,
    pub pairs: usize,
    pub entry_mean: f64,
    pub entry_variance: f64,
    pub theoretical_entry_variance: f64,
    pub tail_estimate: f64,
    pub chebyshev_bound: f64,
    /// False when the Chebyshev bound is ≥ 1 and says nothing.
    pub bound_informative: bool,
    pub spectral_norms: Vec<f64>,
}

impl OrthogonalityReport {
    pub fn samples(&self) -> usize {
        self.pairs * self.r * self.r
    }

    /// `|mean| ≤ 4 · sqrt(Var_theory / samples)`.
    pub fn mean_within_4se(&self) -> bool {
        let se = (self.theoretical_entry_variance / self.samples() as f64).sqrt();
        self.entry_mean.abs() <= 4.0 * se
    }

    pub fn tail_holds(&self) -> bool {
        !self.bound_informative || self.tail_estimate <= self.chebyshev_bound
    }

    pub fn variance_relative_error(&self) -> f64 {
        (self.entry_variance - self.theoretical_entry_variance).abs() / self.theoretical_entry_variance
    }
}

pub fn verify_orthogonality(
    spec: &ProjectionSpec,
    eps: f64,
    pairs: usize,
    seed: u64,
) -> Result<OrthogonalityReport> {
    spec.validate()?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    if pairs < 50 {
        return Err(Error::param("pairs", format!("need at least 50, got {pairs}")));
    }
    let base = derive_seed(seed, ORTHO_LABEL);
    let (n, r, p) = (spec.n, spec.r, spec.p);

    // Per pair: (sum of entries, sum of squares, spectral norm).
    let per_pair: Vec<(f64, f64, f64)> = (0..pairs as u64)
        .into_par_iter()
        .map(|t| {
            let ai = sparse_projection_from(n, r, p, &mut SeededStream::new(base, 2 * t))?;
            let aj = sparse_projection_from(n, r, p, &mut SeededStream::new(base, 2 * t + 1))?;
            let g = ai.gram_with(&aj)?;
            let s: f64 = g.as_slice().iter().sum();
            let s2: f64 = g.as_slice().iter().map(|v| v * v).sum();
            Ok((s, s2, spectral_norm(&g, 1000, 1e-12)?))
        })
        .collect::<Result<_>>()?;

    let count = (pairs * r * r) as f64;
    let sum: f64 = per_pair.iter().map(|t| t.0).sum();
    let sum2: f64 = per_pair.iter().map(|t| t.1).sum();
    let mean = sum / count;
    let var = (sum2 - count * mean * mean) / (count - 1.0);
    let threshold = eps * r as f64;
    let spectral_norms: Vec<f64> = per_pair.iter().map(|t| t.2).collect();
    let exceed = spectral_norms.iter().filter(|&&s| s >= threshold).count();
    let bound = orthogonality_tail_bound(n, r, p, eps);

    Ok(OrthogonalityReport {
        n,
        r,
        p,
        epsilon: eps,
        pairs,
        entry_mean: mean,
        entry_variance: var,
        theoretical_entry_variance: gram_entry_variance(n, r, p),
        tail_estimate: exceed as f64 / pairs as f64,
        chebyshev_bound: bound,
        bound_informative: bound < 1.0,
        spectral_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structural_invariant_and_determinism() {
        let spec = ProjectionSpec::new(8, 4, 2, 7).unwrap();
        let a = make_sparse_projection(&spec).unwrap();
        for i in 0..a.rows() {
            let (idx, _) = a.row(i);
            assert_eq!(idx.len(), 2);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        let b = make_sparse_projection(&spec).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_spec() {
        assert!(ProjectionSpec::new(8, 4, 8, 0).is_err());
        assert!(ProjectionSpec::new(8, 0, 2, 0).is_err());
        assert!(ProjectionSpec::new(8, 4, 0, 0).is_err());
    }

    #[test]
    fn distortion_forced_by_normalization() {
        // n = 2, r = 2, p = 1: σ² = 1/8, rσ² = 1/4.
        let a = RowSparseMatrix::new(2, 2, 1, vec![0, 1], vec![0.5, 0.5]).unwrap();
        let q = distortion_ratio(&a, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((q - 1.0).abs() < 1e-15);
        assert!(matches!(
            distortion_ratio(&a, &[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bound_formula_values() {
        // ε = 0.5: ε²−ε³ = 1/8; r = 64: 1 − e^{−2} − e^{−8/3.5}.
        let b = distance_preservation_bound(1024, 64, 256, 0.5);
        let expected = 1.0 - (-2.0f64).exp() - (-(8.0 / 3.5f64)).exp();
        assert!((b - expected).abs() < 1e-15);
        assert!((b - 0.763).abs() < 5e-4, "{b}");

        // p = n−1: second exponent's denominator tends to 2·4.
        let n = 1000;
        let near_dense = distance_preservation_bound(n, 64, n - 1, 0.5);
        let rho = (n - 1) as f64 / n as f64;
        let manual = 1.0 - (-2.0f64).exp() - (-(8.0 / (2.0 * (3.0 * rho + 1.0)))).exp();
        assert!((near_dense - manual).abs() < 1e-15);
    }

    #[test]
    fn bound_monotone_in_r() {
        let eps = 0.95;
        let mut prev = f64::NEG_INFINITY;
        for r in (8..=1024).step_by(8) {
            let b = distance_preservation_bound(1 << 14, r, 1 << 12, eps);
            assert!(b > prev && b < 1.0);
            prev = b;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn chebyshev_bound_values() {
        assert!((orthogonality_tail_bound(4096, 32, 1024, 0.5) - 1.0).abs() < 1e-15);
        assert!((orthogonality_tail_bound(65536, 32, 1024, 0.5) - 1.0 / 16.0).abs() < 1e-15);
        assert!((gram_entry_variance(4096, 32, 1024) - 1.0 / 4096.0).abs() < 1e-18);
    }

    #[test]
    fn verify_rejects_bad_parameters() {
        let spec = ProjectionSpec::new(64, 8, 16, 0).unwrap();
        assert!(verify_distance_preservation(&spec, 1.5, 100, 0).is_err());
        assert!(verify_distance_preservation(&spec, 0.0, 100, 0).is_err());
        assert!(verify_distance_preservation(&spec, 0.5, 99, 0).is_err());
        assert!(verify_orthogonality(&spec, -1.0, 50, 0).is_err());
        assert!(verify_orthogonality(&spec, 0.5, 10, 0).is_err());
    }

    #[test]
    fn gram_of_zero_projection_is_zero() {
        let spec = ProjectionSpec::new(32, 4, 8, 1).unwrap();
        let a = make_sparse_projection(&spec).unwrap();
        let z = make_sparse_projection(&spec.with_seed(2)).unwrap().map_values(|_| 0.0);
        assert!(cross_projection_gram(&a, &z).unwrap().is_zero());
    }

    #[test]
    fn self_gram_diagonal_scale() {
        // Diagonal of A Aᵀ is Σ of p squared N(0, 1/r²) draws, mean p/r².
        let spec = ProjectionSpec::new(512, 16, 128, 3).unwrap();
        let a = make_sparse_projection(&spec).unwrap();
        let g = cross_projection_gram(&a, &a).unwrap();
        let mean_diag: f64 = (0..16).map(|i| g.get(i, i)).sum::<f64>() / 16.0;
        let expected = 128.0 / 256.0;
        assert!((mean_diag - expected).abs() < 0.1 * expected, "{mean_diag}");
    }
}
