//! Subspace-analysis toolkit: principal-angle similarity between singular
//! subspaces, spectral-interval scans, energy CDFs, activation probes, and
//! gate-alignment profiles.
//!
//! The central scalar is [`principal_similarity`]: for two matrices with
//! orthonormal columns B₁, B₂ spanning subspaces of the same ambient space,
//! the similarity is σ_max(B₂ᵀB₁) — the cosine of the smallest principal
//! angle. It is 1 when the spans intersect in some direction, 0 when they are
//! orthogonal, and invariant under re-parameterizing either basis.

use crate::linalg::{
    gram_defect, matmul, matmul_transa, svd, LinalgError, Matrix, OrthonormalBasis, SvdFactors,
};
use thiserror::Error;

/// Gram defect allowed on bases fed to similarity computations. Looser than
/// the [`OrthonormalBasis`] constructor because callers often pass freshly
/// computed SVD factors that have accumulated a few ulps of drift.
pub const BASIS_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{which} basis is not orthonormal: Gram defect {defect:.3e} exceeds {tol:.3e}")]
    NotOrthonormal {
        which: &'static str,
        defect: f64,
        tol: f64,
    },
    #[error("bases live in different spaces: {lhs} rows vs {rhs} rows")]
    RowCountMismatch { lhs: usize, rhs: usize },
    #[error("subspace interval must satisfy 1 ≤ start ≤ end, got {start}..={end}")]
    BadInterval { start: usize, end: usize },
    #[error("interval end {end} exceeds the {cols} columns of basis {basis_index}")]
    IntervalOutOfRange {
        basis_index: usize,
        end: usize,
        cols: usize,
    },
    #[error("similarity matrix invariant violated: {detail}")]
    BadSimilarityMatrix { detail: String },
    #[error("spectrum must be non-empty")]
    EmptySpectrum,
    #[error("spectrum must be finite, non-negative, and descending; violation at index {index}")]
    BadSpectrum { index: usize },
    #[error("spectrum is identically zero")]
    AllZeroSpectrum,
    #[error("fraction must lie in (0, 1], got {value}")]
    BadFraction { value: f64 },
    #[error("threshold scale must be positive, got {value}")]
    BadThresholdScale { value: f64 },
    #[error("need at least two bases, got {got}")]
    TooFewBases { got: usize },
    #[error("rank must satisfy 1 ≤ k ≤ {max}, got {k}")]
    BadRank { k: usize, max: usize },
    #[error("index list is not a permutation of 0..{len}: {detail}")]
    NotPermutation { len: usize, detail: String },
    #[error("head and tail subspaces overlap: max |headᵀ·tail| = {overlap:.3e}")]
    OverlappingSubspaces { overlap: f64 },
    #[error("projection onto the {which} subspace has zero norm")]
    ZeroProjection { which: &'static str },
    #[error("gate vector has zero norm")]
    ZeroGate,
    #[error("gate vector length {gate} does not match basis rows {rows}")]
    GateShape { gate: usize, rows: usize },
}

/// Which singular-vector side of a weight matrix carries the feature space
/// an expert reads or writes.
///
/// A projection applied as `W·x` reads its input through the right singular
/// vectors (`V`) and writes through the left (`U`). Up- and gate-projections
/// are compared on their input side, down-projections on their output side,
/// so all three land in the same `d_model`-dimensional space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSide {
    UpOrGate,
    Down,
}

/// SVD of a weight matrix together with the side selected for comparison.
#[derive(Debug, Clone)]
pub struct ComparisonBasis {
    pub factors: SvdFactors,
    pub side: WeightSide,
}

impl ComparisonBasis {
    /// The selected singular-vector matrix: `v` for [`WeightSide::UpOrGate`],
    /// `u` for [`WeightSide::Down`]. Columns are orthonormal and ordered by
    /// descending singular value.
    pub fn basis(&self) -> &Matrix {
        match self.side {
            WeightSide::UpOrGate => &self.factors.v,
            WeightSide::Down => &self.factors.u,
        }
    }

    pub fn sigma(&self) -> &[f64] {
        &self.factors.sigma
    }
}

pub fn comparison_basis(w: &Matrix, side: WeightSide) -> Result<ComparisonBasis, MetricsError> {
    let factors = svd(w)?;
    Ok(ComparisonBasis { factors, side })
}

fn require_orthonormal(b: &Matrix, which: &'static str) -> Result<(), MetricsError> {
    let defect = gram_defect(b)?;
    if defect > BASIS_TOL {
        return Err(MetricsError::NotOrthonormal {
            which,
            defect,
            tol: BASIS_TOL,
        });
    }
    Ok(())
}

/// Cosine of the smallest principal angle between the column spans of two
/// orthonormal bases: σ_max(b₂ᵀ·b₁). Always in [0, 1] up to roundoff.
pub fn principal_similarity(b1: &Matrix, b2: &Matrix) -> Result<f64, MetricsError> {
    if b1.rows != b2.rows {
        return Err(MetricsError::RowCountMismatch {
            lhs: b1.rows,
            rhs: b2.rows,
        });
    }
    require_orthonormal(b1, "first")?;
    require_orthonormal(b2, "second")?;
    let cross = matmul_transa(b2, b1)?;
    Ok(svd(&cross)?.sigma.first().copied().unwrap_or(0.0))
}

/// 1-based inclusive range of spectral indices (columns of a singular-vector
/// basis ordered by descending singular value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubspaceInterval {
    pub start: usize,
    pub end: usize,
}

impl SubspaceInterval {
    pub fn new(start: usize, end: usize) -> Result<Self, MetricsError> {
        if start < 1 || end < start {
            return Err(MetricsError::BadInterval { start, end });
        }
        Ok(SubspaceInterval { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Copy of the basis columns this interval selects.
    pub fn slice(&self, basis: &Matrix) -> Matrix {
        basis.columns(self.start - 1, self.end)
    }
}

/// Symmetric matrix of pairwise subspace similarities with unit diagonal.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    const TOL: f64 = 1e-9;

    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, MetricsError> {
        if n == 0 || values.len() != n * n {
            return Err(MetricsError::BadSimilarityMatrix {
                detail: format!("expected {n}x{n} values, got {}", values.len()),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < -Self::TOL || v > 1.0 + Self::TOL {
                    return Err(MetricsError::BadSimilarityMatrix {
                        detail: format!("entry ({i},{j}) = {v} outside [0, 1]"),
                    });
                }
                let vt = values[j * n + i];
                if (v - vt).abs() > Self::TOL {
                    return Err(MetricsError::BadSimilarityMatrix {
                        detail: format!("asymmetry at ({i},{j}): {v} vs {vt}"),
                    });
                }
            }
            let d = values[i * n + i];
            if (d - 1.0).abs() > Self::TOL {
                return Err(MetricsError::BadSimilarityMatrix {
                    detail: format!("diagonal ({i},{i}) = {d} is not 1"),
                });
            }
        }
        Ok(SimilarityMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.n && j < self.n);
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean of the strictly-upper-triangle entries (i < j). The diagonal is
    /// identically 1 and would only dilute the statistic.
    pub fn mean_off_diagonal(&self) -> f64 {
        assert!(self.n >= 2, "no off-diagonal entries in a 1x1 matrix");
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                sum += self.values[i * self.n + j];
                count += 1;
            }
        }
        sum / count as f64
    }
}

/// Similarity of every pair of bases restricted to one spectral interval.
/// Every entry, diagonal included, is computed by [`principal_similarity`].
pub fn pairwise_expert_similarity(
    bases: &[Matrix],
    interval: SubspaceInterval,
) -> Result<SimilarityMatrix, MetricsError> {
    if bases.len() < 2 {
        return Err(MetricsError::TooFewBases { got: bases.len() });
    }
    let rows = bases[0].rows;
    for (idx, b) in bases.iter().enumerate() {
        if b.rows != rows {
            return Err(MetricsError::RowCountMismatch {
                lhs: rows,
                rhs: b.rows,
            });
        }
        if interval.end > b.cols {
            return Err(MetricsError::IntervalOutOfRange {
                basis_index: idx,
                end: interval.end,
                cols: b.cols,
            });
        }
    }
    let slices: Vec<Matrix> = bases.iter().map(|b| interval.slice(b)).collect();
    let n = slices.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = principal_similarity(&slices[j], &slices[i])?;
        }
    }
    SimilarityMatrix::new(n, values)
}

/// Cumulative fraction of squared spectral mass: out[m] = Σ_{i≤m} σ_i² / Σ σ².
pub fn energy_cdf(sigma: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if sigma.is_empty() {
        return Err(MetricsError::EmptySpectrum);
    }
    for (i, &s) in sigma.iter().enumerate() {
        if !s.is_finite() || s < 0.0 {
            return Err(MetricsError::BadSpectrum { index: i });
        }
        if i + 1 < sigma.len() && sigma[i + 1] > s {
            return Err(MetricsError::BadSpectrum { index: i + 1 });
        }
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(MetricsError::AllZeroSpectrum);
    }
    let mut acc = 0.0;
    Ok(sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect())
}

/// Partition the spectral indices 1..=p into consecutive blocks of size
/// ceil(fraction·p) (the final block may be shorter) and report the mean
/// off-diagonal pairwise similarity inside each block.
pub fn interval_similarity_scan(
    bases: &[Matrix],
    fraction: f64,
) -> Result<Vec<(SubspaceInterval, f64)>, MetricsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::BadFraction { value: fraction });
    }
    if bases.len() < 2 {
        return Err(MetricsError::TooFewBases { got: bases.len() });
    }
    let p = bases[0].cols;
    for b in bases {
        if b.cols != p {
            return Err(MetricsError::BadSimilarityMatrix {
                detail: format!("bases carry different column counts: {p} vs {}", b.cols),
            });
        }
    }
    let block = ((fraction * p as f64).ceil() as usize).clamp(1, p);
    let mut out = Vec::new();
    let mut start = 1usize;
    while start <= p {
        let end = (start + block - 1).min(p);
        let interval = SubspaceInterval::new(start, end)?;
        let sim = pairwise_expert_similarity(bases, interval)?;
        out.push((interval, sim.mean_off_diagonal()));
        start = end + 1;
    }
    Ok(out)
}

/// Per-parameter knobs of the analysis pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Fraction of the spectrum treated as the "head" interval.
    pub head_fraction: f64,
    /// Multiplier c on the RMS projection magnitude used as the activation
    /// threshold τ.
    pub activation_threshold_scale: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            head_fraction: 0.01,
            activation_threshold_scale: 1.0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(MetricsError::BadFraction {
                value: self.head_fraction,
            });
        }
        if !(self.activation_threshold_scale > 0.0) {
            return Err(MetricsError::BadThresholdScale {
                value: self.activation_threshold_scale,
            });
        }
        Ok(())
    }

    /// Number of leading spectral directions in the head interval: at least
    /// one, at most the full spectrum.
    pub fn head_rank(&self, p: usize) -> usize {
        ((self.head_fraction * p as f64).ceil() as usize).clamp(1, p.max(1))
    }
}

/// Fraction of tokens whose projection onto each singular direction exceeds
/// the data-scaled threshold τ = c · RMS of all projection entries.
///
/// `x` is tokens×d (one token per row), `v` is d×p with one direction per
/// column. Ratios are per direction.
pub fn activation_ratio(
    x: &Matrix,
    v: &Matrix,
    config: &AnalysisConfig,
) -> Result<Vec<f64>, MetricsError> {
    config.validate()?;
    let proj = matmul(x, v)?;
    let tokens = proj.rows as f64;
    let rms = (proj.frobenius_norm_sq() / proj.data.len() as f64).sqrt();
    let tau = config.activation_threshold_scale * rms;
    let mut out = vec![0.0; proj.cols];
    for (m, ratio) in out.iter_mut().enumerate() {
        let mut count = 0usize;
        for t in 0..proj.rows {
            if proj.get(t, m).abs() > tau {
                count += 1;
            }
        }
        *ratio = count as f64 / tokens;
    }
    Ok(out)
}

fn validate_permutation(perm: &[usize], len: usize) -> Result<(), MetricsError> {
    if perm.len() != len {
        return Err(MetricsError::NotPermutation {
            len,
            detail: format!("length {} instead of {len}", perm.len()),
        });
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len {
            return Err(MetricsError::NotPermutation {
                len,
                detail: format!("index {p} out of range"),
            });
        }
        if seen[p] {
            return Err(MetricsError::NotPermutation {
                len,
                detail: format!("index {p} repeated"),
            });
        }
        seen[p] = true;
    }
    Ok(())
}

fn flat_cosine(a: &Matrix, b: &Matrix, which: &'static str) -> Result<f64, MetricsError> {
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::ZeroProjection { which });
    }
    let mut dot = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        dot += x * y;
    }
    Ok(dot / (na * nb))
}

/// Token-order sensitivity probe. Projects the token matrix onto two disjoint
/// subspaces, shuffles the token order, and reports the cosine similarity
/// between the flattened original and shuffled projections for each subspace.
/// Content that depends on token position decorrelates under the shuffle;
/// content that is i.i.d. across tokens does not (in expectation).
pub fn shuffle_projection_delta(
    x: &Matrix,
    head: &OrthonormalBasis,
    tail: &OrthonormalBasis,
    perm: &[usize],
) -> Result<(f64, f64), MetricsError> {
    if head.rows() != x.cols || tail.rows() != x.cols {
        return Err(MetricsError::RowCountMismatch {
            lhs: x.cols,
            rhs: if head.rows() != x.cols {
                head.rows()
            } else {
                tail.rows()
            },
        });
    }
    let overlap = matmul_transa(head.matrix(), tail.matrix())?.max_abs();
    if overlap > BASIS_TOL {
        return Err(MetricsError::OverlappingSubspaces { overlap });
    }
    validate_permutation(perm, x.rows)?;
    let shuffled = Matrix::from_fn(x.rows, x.cols, |r, c| x.get(perm[r], c));
    let mut out = [0.0; 2];
    for (slot, (basis, which)) in [(head, "head"), (tail, "tail")].iter().enumerate() {
        let p0 = matmul(x, basis.matrix())?;
        let p1 = matmul(&shuffled, basis.matrix())?;
        out[slot] = flat_cosine(&p0, &p1, which)?;
    }
    Ok((out[0], out[1]))
}

/// Which singular-vector factor of a gradient to compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralSide {
    Left,
    Right,
}

/// Similarity of the dominant rank-k singular subspaces of two gradients
/// (right = row space, left = column space).
pub fn gradient_subspace_similarity(
    g1: &Matrix,
    g2: &Matrix,
    k: usize,
    side: SpectralSide,
) -> Result<f64, MetricsError> {
    if g1.rows != g2.rows || g1.cols != g2.cols {
        return Err(MetricsError::RowCountMismatch {
            lhs: g1.rows,
            rhs: g2.rows,
        });
    }
    let p = g1.rows.min(g1.cols);
    if k == 0 || k > p {
        return Err(MetricsError::BadRank { k, max: p });
    }
    let f1 = svd(g1)?;
    let f2 = svd(g2)?;
    let (b1, b2) = match side {
        SpectralSide::Right => (f1.v.columns(0, k), f2.v.columns(0, k)),
        SpectralSide::Left => (f1.u.columns(0, k), f2.u.columns(0, k)),
    };
    principal_similarity(&b1, &b2)
}

/// |cos| between a gate row and each basis direction: profile[m] =
/// |⟨w, b_m⟩| / ‖w‖. Squared entries sum to at most 1 for an orthonormal
/// basis (Bessel).
pub fn gate_alignment_profile(w: &[f64], basis: &Matrix) -> Result<Vec<f64>, MetricsError> {
    if w.len() != basis.rows {
        return Err(MetricsError::GateShape {
            gate: w.len(),
            rows: basis.rows,
        });
    }
    require_orthonormal(basis, "gate-alignment")?;
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(MetricsError::ZeroGate);
    }
    let mut out = vec![0.0; basis.cols];
    for (m, slot) in out.iter_mut().enumerate() {
        let mut d = 0.0;
        for (r, &wr) in w.iter().enumerate() {
            d += wr * basis.get(r, m);
        }
        *slot = d.abs() / norm;
    }
    Ok(out)
}

/// Similarity of the dominant right singular subspaces of two token batches,
/// at rank ceil(fraction · d) where d is the shared column count.
pub fn data_subspace_similarity(
    xa: &Matrix,
    xb: &Matrix,
    fraction: f64,
) -> Result<f64, MetricsError> {
    if xa.cols != xb.cols {
        return Err(MetricsError::RowCountMismatch {
            lhs: xa.cols,
            rhs: xb.cols,
        });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::BadFraction { value: fraction });
    }
    let d = xa.cols;
    let k = ((fraction * d as f64).ceil() as usize).clamp(1, d);
    let p = xa.rows.min(xa.cols).min(xb.rows.min(xb.cols));
    if k > p {
        return Err(MetricsError::BadRank { k, max: p });
    }
    let fa = svd(xa)?;
    let fb = svd(xb)?;
    principal_similarity(&fa.v.columns(0, k), &fb.v.columns(0, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, gaussian, qr_orthonormal};
    use crate::util::rng_for;
    use rand::{Rng, RngCore};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, 100);
        qr_orthonormal(&gaussian(rows, cols, &mut rng, 1.0))
            .unwrap()
            .into_matrix()
    }

    /// Oracle: largest singular value of b2ᵀ·b1 via power iteration on the
    /// normal matrix, independent of the Jacobi SVD used by the library.
    fn similarity_powit(b1: &Matrix, b2: &Matrix) -> f64 {
        let cross = matmul_transa(b2, b1).unwrap();
        let g = matmul_transa(&cross, &cross).unwrap();
        let n = g.rows;
        let mut x = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..50_000 {
            let mut y = vec![0.0; n];
            for i in 0..n {
                y[i] = dot(g.row(i), &x);
            }
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for v in y.iter_mut() {
                *v /= norm;
            }
            let mut gy = vec![0.0; n];
            for i in 0..n {
                gy[i] = dot(g.row(i), &y);
            }
            let nl = dot(&y, &gy);
            let done = (nl - lambda).abs() <= 1e-15 * nl.max(1e-300);
            lambda = nl;
            x = y;
            if done {
                break;
            }
        }
        lambda.max(0.0).sqrt()
    }

    fn coords(rows: usize, picks: &[usize]) -> Matrix {
        Matrix::from_fn(rows, picks.len(), |r, c| if r == picks[c] { 1.0 } else { 0.0 })
    }

    #[test]
    fn comparison_basis_selects_expected_side() {
        let d = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let up = comparison_basis(&d, WeightSide::UpOrGate).unwrap();
        assert!(up.basis().bits_eq(&Matrix::identity(2)));
        let down = comparison_basis(&d, WeightSide::Down).unwrap();
        assert!(down.basis().bits_eq(&Matrix::identity(2)));
        assert_eq!(up.sigma(), &[2.0, 1.0]);

        let mut rng = rng_for(21, 0);
        let w = gaussian(8, 6, &mut rng, 1.0);
        for side in [WeightSide::UpOrGate, WeightSide::Down] {
            let cb = comparison_basis(&w, side).unwrap();
            assert!(gram_defect(cb.basis()).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn principal_similarity_analytic_cases() {
        let b = coords(4, &[0, 1]);
        assert!((principal_similarity(&b, &b).unwrap() - 1.0).abs() <= 1e-12);

        let b2 = coords(4, &[2, 3]);
        assert!(principal_similarity(&b, &b2).unwrap().abs() <= 1e-12);

        let e1 = coords(4, &[0]);
        let diag = Matrix::new(4, 1, vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0]).unwrap();
        let s = principal_similarity(&e1, &diag).unwrap();
        assert!((s - FRAC_1_SQRT_2).abs() <= 1e-10, "45 degrees: {s}");
    }

    #[test]
    fn principal_similarity_matches_power_iteration_oracle() {
        for seed in 0..6u64 {
            let b1 = random_orthonormal(16, 3, 300 + seed);
            let b2 = random_orthonormal(16, 3, 400 + seed);
            let got = principal_similarity(&b1, &b2).unwrap();
            let want = similarity_powit(&b1, &b2);
            assert!((got - want).abs() <= 1e-10, "seed {seed}: {got} vs {want}");
            assert!((0.0..=1.0 + 1e-9).contains(&got));
            // Symmetry under argument swap.
            let rev = principal_similarity(&b2, &b1).unwrap();
            assert!((got - rev).abs() <= 1e-12);
        }
    }

    #[test]
    fn principal_similarity_is_rotation_invariant() {
        let b1 = random_orthonormal(12, 4, 31);
        let b2 = random_orthonormal(12, 4, 32);
        let base = principal_similarity(&b1, &b2).unwrap();
        for seed in 0..5u64 {
            let q = random_orthonormal(4, 4, 500 + seed);
            let b2q = matmul(&b2, &q).unwrap();
            let rotated = principal_similarity(&b1, &b2q).unwrap();
            assert!(
                (rotated - base).abs() <= 1e-10,
                "rotation {seed} moved similarity by {}",
                (rotated - base).abs()
            );
        }
    }

    #[test]
    fn principal_similarity_grows_under_containment() {
        let frame = random_orthonormal(10, 5, 33);
        let a = random_orthonormal(10, 2, 34);
        let b = frame.columns(0, 2);
        let b_ext = frame.columns(0, 4);
        let small = principal_similarity(&a, &b).unwrap();
        let big = principal_similarity(&a, &b_ext).unwrap();
        assert!(big >= small - 1e-12, "containment: {small} -> {big}");
    }

    #[test]
    fn principal_similarity_rejects_bad_inputs() {
        let skew = Matrix::new(3, 2, vec![1.0, 0.8, 0.0, 0.6, 0.0, 0.0]).unwrap();
        let ok = coords(3, &[0]);
        match principal_similarity(&skew, &ok) {
            Err(MetricsError::NotOrthonormal { defect, .. }) => assert!(defect > 1e-8),
            other => panic!("expected orthonormality error, got {other:?}"),
        }
        let tall = coords(4, &[0]);
        assert!(matches!(
            principal_similarity(&ok, &tall),
            Err(MetricsError::RowCountMismatch { .. })
        ));
    }

    #[test]
    fn pairwise_similarity_patterns() {
        let b = random_orthonormal(8, 4, 35);
        let interval = SubspaceInterval::new(1, 4).unwrap();
        let same = pairwise_expert_similarity(&[b.clone(), b.clone()], interval).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((same.get(i, j) - 1.0).abs() <= 1e-9);
            }
        }

        let d1 = coords(8, &[0, 1]);
        let d2 = coords(8, &[2, 3]);
        let d3 = coords(8, &[4, 5]);
        let disjoint =
            pairwise_expert_similarity(&[d1, d2, d3], SubspaceInterval::new(1, 2).unwrap())
                .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((disjoint.get(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_similarity_matches_scalar_recomputation() {
        let bases: Vec<Matrix> = (0..4).map(|i| random_orthonormal(10, 6, 600 + i)).collect();
        let interval = SubspaceInterval::new(2, 4).unwrap();
        let m = pairwise_expert_similarity(&bases, interval).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want =
                    principal_similarity(&interval.slice(&bases[j]), &interval.slice(&bases[i]))
                        .unwrap();
                assert!((m.get(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_similarity_interval_bound_names_basis() {
        let b1 = random_orthonormal(8, 4, 36);
        let b2 = random_orthonormal(8, 3, 37);
        let err = pairwise_expert_similarity(&[b1, b2], SubspaceInterval::new(1, 4).unwrap())
            .unwrap_err();
        match err {
            MetricsError::IntervalOutOfRange {
                basis_index, end, cols,
            } => {
                assert_eq!((basis_index, end, cols), (1, 4, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn energy_cdf_cases() {
        let got = energy_cdf(&[3.0, 1.0]).unwrap();
        assert!((got[0] - 0.9).abs() <= 1e-15);
        assert!((got[1] - 1.0).abs() <= 1e-15);

        let got = energy_cdf(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        for (i, v) in got.iter().enumerate() {
            assert!((v - 0.25 * (i + 1) as f64).abs() <= 1e-15);
        }

        let got = energy_cdf(&[2.0, 1.0, 1.0]).unwrap();
        assert!((got[0] - 4.0 / 6.0).abs() <= 1e-15);
        assert!((got[1] - 5.0 / 6.0).abs() <= 1e-15);
        assert!((got[2] - 1.0).abs() <= 1e-15);

        assert!(matches!(energy_cdf(&[]), Err(MetricsError::EmptySpectrum)));
        assert!(matches!(
            energy_cdf(&[0.0, 0.0]),
            Err(MetricsError::AllZeroSpectrum)
        ));
        assert!(matches!(
            energy_cdf(&[1.0, 2.0]),
            Err(MetricsError::BadSpectrum { index: 1 })
        ));
        assert!(matches!(
            energy_cdf(&[1.0, -0.5]),
            Err(MetricsError::BadSpectrum { index: 1 })
        ));
    }

    #[test]
    fn energy_cdf_matches_direct_summation() {
        let mut rng = rng_for(38, 0);
        let mut sigma: Vec<f64> = (0..17)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z.abs() + 0.01
            })
            .collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got = energy_cdf(&sigma).unwrap();
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        for m in 0..sigma.len() {
            let mut acc = 0.0;
            for s in &sigma[..=m] {
                acc += s * s;
            }
            assert!((got[m] - acc / total).abs() <= 1e-14, "index {m}");
        }
        assert!((got[sigma.len() - 1] - 1.0).abs() <= 1e-12);
        for m in 1..got.len() {
            assert!(got[m] >= got[m - 1]);
        }
    }

    #[test]
    fn interval_scan_block_structure_and_values() {
        let b = random_orthonormal(9, 8, 39);
        let same = interval_similarity_scan(&[b.clone(), b.clone()], 0.25).unwrap();
        // ceil(0.25·8) = 2 → four blocks of two.
        assert_eq!(same.len(), 4);
        for (iv, mean) in &same {
            assert_eq!(iv.len(), 2);
            assert!((mean - 1.0).abs() <= 1e-9);
        }
        assert_eq!(same[0].0, SubspaceInterval::new(1, 2).unwrap());
        assert_eq!(same[3].0, SubspaceInterval::new(7, 8).unwrap());

        let d1 = coords(8, &[0, 1, 2, 3]);
        let d2 = coords(8, &[4, 5, 6, 7]);
        let disjoint = interval_similarity_scan(&[d1, d2], 0.5).unwrap();
        assert_eq!(disjoint.len(), 2);
        for (_, mean) in &disjoint {
            assert!(mean.abs() <= 1e-12);
        }

        // Uneven tail: p=8, fraction 0.4 → block 4? ceil(3.2)=4 → [1..4],[5..8].
        let scan = interval_similarity_scan(&[b.clone(), b.clone()], 0.4).unwrap();
        assert_eq!(scan.len(), 2);

        // fraction 0.3 on p=8 → ceil(2.4)=3 → [1..3],[4..6],[7..8] (short tail).
        let scan = interval_similarity_scan(&[b.clone(), b], 0.3).unwrap();
        assert_eq!(scan.len(), 3);
        assert_eq!(scan[2].0, SubspaceInterval::new(7, 8).unwrap());

        let lone = random_orthonormal(8, 8, 40);
        assert!(matches!(
            interval_similarity_scan(&[lone], 0.5),
            Err(MetricsError::TooFewBases { got: 1 })
        ));
    }

    #[test]
    fn interval_scan_matches_manual_recomputation() {
        let bases: Vec<Matrix> = (0..3).map(|i| random_orthonormal(12, 8, 700 + i)).collect();
        let scan = interval_similarity_scan(&bases, 0.25).unwrap();
        for (iv, mean) in &scan {
            let m = pairwise_expert_similarity(&bases, *iv).unwrap();
            let mut sum = 0.0;
            let mut cnt = 0;
            for i in 0..3 {
                for j in (i + 1)..3 {
                    sum += m.get(i, j);
                    cnt += 1;
                }
            }
            assert!((mean - sum / cnt as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn activation_ratio_threshold_behavior() {
        let mut rng = rng_for(41, 0);
        let x = gaussian(20, 6, &mut rng, 1.0);
        let v = random_orthonormal(6, 3, 42);

        let tiny = AnalysisConfig {
            activation_threshold_scale: 1e-12,
            ..Default::default()
        };
        let all_on = activation_ratio(&x, &v, &tiny).unwrap();
        assert!(all_on.iter().all(|&r| r == 1.0), "{all_on:?}");

        let huge = AnalysisConfig {
            activation_threshold_scale: 1e12,
            ..Default::default()
        };
        let all_off = activation_ratio(&x, &v, &huge).unwrap();
        assert!(all_off.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn activation_ratio_separates_loud_direction() {
        // Projections: first direction ±10, other three ±0.1. RMS ≈ 5.0, so
        // with c=1 only the first direction clears the threshold.
        let tokens = 16;
        let v = coords(4, &[0, 1, 2, 3]);
        let x = Matrix::from_fn(tokens, 4, |t, c| {
            let sign = if (t + c) % 2 == 0 { 1.0 } else { -1.0 };
            if c == 0 {
                10.0 * sign
            } else {
                0.1 * sign
            }
        });
        let got = activation_ratio(&x, &v, &AnalysisConfig::default()).unwrap();
        assert_eq!(got, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shuffle_probe_identity_and_constant_rows() {
        let head = OrthonormalBasis::new(coords(6, &[0, 1])).unwrap();
        let tail = OrthonormalBasis::new(coords(6, &[2, 3])).unwrap();
        let mut rng = rng_for(43, 0);
        let x = gaussian(10, 6, &mut rng, 1.0);

        let id: Vec<usize> = (0..10).collect();
        let (ch, ct) = shuffle_projection_delta(&x, &head, &tail, &id).unwrap();
        assert!((ch - 1.0).abs() <= 1e-12 && (ct - 1.0).abs() <= 1e-12);

        let row: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let constant = Matrix::from_fn(10, 6, |_, c| row[c]);
        let rev: Vec<usize> = (0..10).rev().collect();
        let (ch, ct) = shuffle_projection_delta(&constant, &head, &tail, &rev).unwrap();
        assert!((ch - 1.0).abs() <= 1e-12 && (ct - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shuffle_probe_detects_positional_content() {
        // Head content is a zero-mean positional ramp: only token order makes
        // it what it is, so a shuffle decorrelates it. Tail content is i.i.d.
        // noise around a large constant, and the constant (token-mean) part
        // is untouched by any shuffle, so its cosine stays near 1.
        let head = OrthonormalBasis::new(coords(6, &[0, 1])).unwrap();
        let tail = OrthonormalBasis::new(coords(6, &[2, 3])).unwrap();
        let tokens = 64;
        let mut rng = rng_for(44, 0);
        let noise = gaussian(tokens, 2, &mut rng, 1.0);
        let ramp = |t: usize| t as f64 / (tokens - 1) as f64 - 0.5;
        let x = Matrix::from_fn(tokens, 6, |t, c| match c {
            0 => ramp(t),
            1 => -ramp(t),
            2 | 3 => 5.0 + noise.get(t, c - 2),
            _ => 0.0,
        });
        let mut perm: Vec<usize> = (0..tokens).collect();
        // Deterministic Fisher–Yates driven by the seeded stream.
        for i in (1..tokens).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        let (ch, ct) = shuffle_projection_delta(&x, &head, &tail, &perm).unwrap();
        assert!(ch < ct, "head {ch} should decorrelate below tail {ct}");

        // Oracle recomputation with flat dot products.
        let shuffled = Matrix::from_fn(tokens, 6, |r, c| x.get(perm[r], c));
        for (basis, got) in [(&head, ch), (&tail, ct)] {
            let a = matmul(&x, basis.matrix()).unwrap();
            let b = matmul(&shuffled, basis.matrix()).unwrap();
            let want = dot(&a.data, &b.data) / (a.frobenius_norm() * b.frobenius_norm());
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn shuffle_probe_rejects_bad_inputs() {
        let head = OrthonormalBasis::new(coords(6, &[0, 1])).unwrap();
        let overlapping = OrthonormalBasis::new(coords(6, &[1, 2])).unwrap();
        let tail = OrthonormalBasis::new(coords(6, &[2, 3])).unwrap();
        let x = Matrix::zeros(4, 6);
        let id: Vec<usize> = (0..4).collect();
        assert!(matches!(
            shuffle_projection_delta(&x, &head, &overlapping, &id),
            Err(MetricsError::OverlappingSubspaces { .. })
        ));
        assert!(matches!(
            shuffle_projection_delta(&x, &head, &tail, &[0, 0, 1, 2]),
            Err(MetricsError::NotPermutation { .. })
        ));
        // All-zero tokens project to zero norm.
        assert!(matches!(
            shuffle_projection_delta(&x, &head, &tail, &id),
            Err(MetricsError::ZeroProjection { .. })
        ));
    }

    #[test]
    fn gradient_subspace_similarity_cases() {
        let mut rng = rng_for(45, 0);
        let g = gaussian(7, 5, &mut rng, 1.0);
        let doubled = g.scaled(2.0);
        for side in [SpectralSide::Right, SpectralSide::Left] {
            let s = gradient_subspace_similarity(&g, &doubled, 2, side).unwrap();
            assert!((s - 1.0).abs() <= 1e-9, "scaling changed subspace: {s}");
        }

        let e11 = Matrix::from_fn(4, 4, |r, c| if r == 0 && c == 0 { 1.0 } else { 0.0 });
        let e22 = Matrix::from_fn(4, 4, |r, c| if r == 1 && c == 1 { 1.0 } else { 0.0 });
        let s = gradient_subspace_similarity(&e11, &e22, 1, SpectralSide::Right).unwrap();
        assert!(s.abs() <= 1e-12);

        // Rank-1 outer products sharing the right factor x.
        let x: Vec<f64> = vec![0.5, -0.25, 1.5, 0.0, 2.0];
        let d1: Vec<f64> = vec![1.0, -2.0, 0.5];
        let d2: Vec<f64> = vec![-0.7, 0.1, 3.0];
        let g1 = Matrix::from_fn(3, 5, |r, c| d1[r] * x[c]);
        let g2 = Matrix::from_fn(3, 5, |r, c| d2[r] * x[c]);
        let s = gradient_subspace_similarity(&g1, &g2, 1, SpectralSide::Right).unwrap();
        assert!((s - 1.0).abs() <= 1e-10, "shared right factor: {s}");

        assert!(matches!(
            gradient_subspace_similarity(&g1, &g2, 0, SpectralSide::Right),
            Err(MetricsError::BadRank { .. })
        ));
        assert!(matches!(
            gradient_subspace_similarity(&g1, &g2, 4, SpectralSide::Right),
            Err(MetricsError::BadRank { .. })
        ));
    }

    #[test]
    fn gate_alignment_profile_cases() {
        let basis = coords(5, &[0, 1, 2]);
        let b1: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(
            gate_alignment_profile(&b1, &basis).unwrap(),
            vec![1.0, 0.0, 0.0]
        );

        let ortho: Vec<f64> = vec![0.0, 0.0, 0.0, 2.0, -1.0];
        let profile = gate_alignment_profile(&ortho, &basis).unwrap();
        assert!(profile.iter().all(|&v| v == 0.0));

        let mixed: Vec<f64> = vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0, 0.0];
        let profile = gate_alignment_profile(&mixed, &basis).unwrap();
        assert!((profile[0] - FRAC_1_SQRT_2).abs() <= 1e-12);
        assert!((profile[1] - FRAC_1_SQRT_2).abs() <= 1e-12);
        assert!(profile[2].abs() <= 1e-12);
        let bessel: f64 = profile.iter().map(|v| v * v).sum();
        assert!(bessel <= 1.0 + 1e-9);

        assert!(matches!(
            gate_alignment_profile(&[0.0; 5], &basis),
            Err(MetricsError::ZeroGate)
        ));
        assert!(matches!(
            gate_alignment_profile(&[1.0; 4], &basis),
            Err(MetricsError::GateShape { .. })
        ));
    }

    #[test]
    fn data_subspace_similarity_cases() {
        let mut rng = rng_for(46, 0);
        let xa = gaussian(12, 6, &mut rng, 1.0);
        // Row permutation leaves XᵀX (hence the right singular subspace) alone.
        let perm: Vec<usize> = vec![5, 2, 9, 0, 11, 7, 1, 10, 3, 8, 6, 4];
        let xb = Matrix::from_fn(12, 6, |r, c| xa.get(perm[r], c));
        let s = data_subspace_similarity(&xa, &xb, 0.5).unwrap();
        assert!((s - 1.0).abs() <= 1e-9, "row shuffle moved subspace: {s}");

        let a1 = Matrix::from_fn(6, 4, |r, c| if c == 0 { r as f64 + 1.0 } else { 0.0 });
        let a2 = Matrix::from_fn(6, 4, |r, c| if c == 1 { r as f64 + 1.0 } else { 0.0 });
        // fraction 0.25 on d=4 → k=1.
        let s = data_subspace_similarity(&a1, &a2, 0.25).unwrap();
        assert!(s.abs() <= 1e-12);

        assert!(matches!(
            data_subspace_similarity(&xa, &Matrix::zeros(12, 5), 0.5),
            Err(MetricsError::RowCountMismatch { .. })
        ));
        assert!(matches!(
            data_subspace_similarity(&xa, &xa, 0.0),
            Err(MetricsError::BadFraction { .. })
        ));
    }

    #[test]
    fn analysis_config_head_rank() {
        let cfg = AnalysisConfig::default();
        assert_eq!(cfg.head_rank(8), 1);
        assert_eq!(cfg.head_rank(100), 1);
        assert_eq!(cfg.head_rank(101), 2);
        let half = AnalysisConfig {
            head_fraction: 0.5,
            ..Default::default()
        };
        assert_eq!(half.head_rank(8), 4);
        let full = AnalysisConfig {
            head_fraction: 1.0,
            ..Default::default()
        };
        assert_eq!(full.head_rank(8), 8);
        assert!(AnalysisConfig {
            head_fraction: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
