//! The decoupled expert weight object: one shared low-rank common matrix
//! plus per-expert unique matrices confined to the orthogonal complement of
//! the common subspace pair.
//!
//! A [`DecoupledLinear`] holds `W_c = U_k Σ_k V_kᵀ` (rank ≤ k) together with
//! E unique matrices `W_u⁽ⁱ⁾` satisfying `U_kᵀ·W_u⁽ⁱ⁾ = 0` and
//! `W_u⁽ⁱ⁾·V_k = 0`. The effective weight of expert i is the proxy
//! `W_c + W_u⁽ⁱ⁾`. Gradients computed on the proxy are split by
//! [`DecoupledLinear::split_gradient`] into a component absorbed by the
//! shared matrix and a complement component that stays private to the
//! expert; a periodic [`DecoupledLinear::refresh_basis`] re-derives the
//! subspace pair from the drifted `W_c` and re-projects the uniques,
//! recording how much of their energy the new subspace swallowed.

use crate::linalg::{
    gaussian, matmul, matmul_transa, matmul_transb, svd, LinalgError, Matrix, OrthonormalBasis,
};
use crate::optim::{apply_update, OptimizerKind, ParamState};
use crate::util::rng_for;
use thiserror::Error;

/// Fresh-draw retries allowed when QR reports a rank-deficient sample.
pub const INIT_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum DecoupledError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("common rank k must satisfy 1 ≤ k < min({rows},{cols}), got {k}")]
    BadRank { k: usize, rows: usize, cols: usize },
    #[error("need at least one expert")]
    NoExperts,
    #[error("init scale must be positive and finite, got {scale}")]
    BadScale { scale: f64 },
    #[error("refresh interval must be ≥ 1")]
    BadRefreshInterval,
    #[error("complement draw stayed rank-deficient after {attempts} attempts")]
    QrRetries { attempts: usize },
    #[error("expert index {index} out of range for {n_experts} experts")]
    ExpertIndex { index: usize, n_experts: usize },
    #[error("expert index {index} appears more than once in one update")]
    DuplicateExpert { index: usize },
    #[error("optimizer state tracks {states} experts but the layer has {n_experts}")]
    StateCount { states: usize, n_experts: usize },
    #[error("inconsistent decoupled tensors: {detail}")]
    BadParts { detail: String },
}

/// Seeded initialization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub seed: u64,
    /// Entry standard deviation of the Gaussian reference matrix whose SVD
    /// supplies the singular values and the common subspace.
    pub scale: f64,
    pub k: usize,
    pub n_experts: usize,
}

/// Per-expert bookkeeping from one basis refresh.
#[derive(Debug, Clone)]
pub struct UniqueRefresh {
    pub norm_sq_before: f64,
    pub norm_sq_after: f64,
    /// ‖W_u − projected W_u‖²_F — the Frobenius energy removed to restore
    /// the complement invariant.
    pub dropped_energy: f64,
}

#[derive(Debug, Clone)]
pub struct RefreshOutcome {
    pub per_expert: Vec<UniqueRefresh>,
}

impl RefreshOutcome {
    pub fn total_dropped(&self) -> f64 {
        self.per_expert.iter().map(|r| r.dropped_energy).sum()
    }
}

/// Optimizer state for one decoupled weight: the shared block plus one block
/// per unique expert, each with independent moments.
#[derive(Debug, Clone)]
pub struct DecoupledStates {
    pub common: ParamState,
    pub uniques: Vec<ParamState>,
}

impl DecoupledStates {
    pub fn new(n_experts: usize) -> Self {
        DecoupledStates {
            common: ParamState::new(),
            uniques: vec![ParamState::new(); n_experts],
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoupledLinear {
    rows: usize,
    cols: usize,
    k: usize,
    w_c: Matrix,
    u_k: OrthonormalBasis,
    v_k: OrthonormalBasis,
    sigma_k: Vec<f64>,
    uniques: Vec<Matrix>,
    refresh_interval: usize,
    steps_since_refresh: usize,
}

/// Deterministic stream tags for the seeded draws: tag 0 is the reference
/// matrix; each (expert, attempt, side) triple gets its own stream so a
/// retry never reuses bytes.
fn draw_tag(expert: usize, attempt: usize, side: u64) -> u64 {
    1 + ((expert * INIT_ATTEMPTS + attempt) as u64) * 2 + side
}

/// Orthonormal basis of a random full-rank subspace of the orthogonal
/// complement of `anchor`: draw Gaussian columns, project out the anchor
/// span, orthonormalize. Retries with a fresh stream on rank deficiency.
fn complement_basis(
    anchor: &OrthonormalBasis,
    seed: u64,
    expert: usize,
    side: u64,
) -> Result<OrthonormalBasis, DecoupledError> {
    let dim = anchor.rows();
    let comp = dim - anchor.cols();
    for attempt in 0..INIT_ATTEMPTS {
        let mut rng = rng_for(seed, draw_tag(expert, attempt, side));
        let z = gaussian(dim, comp, &mut rng, 1.0);
        let coeff = matmul_transa(anchor.matrix(), &z)?;
        let mut projected = z;
        let back = matmul(anchor.matrix(), &coeff)?;
        projected.add_scaled(&back, -1.0)?;
        match crate::linalg::qr_orthonormal(&projected) {
            Ok(q) => return Ok(q),
            Err(LinalgError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(DecoupledError::QrRetries {
        attempts: INIT_ATTEMPTS,
    })
}

/// u · diag(s) · vᵀ over the first `s.len()` columns of each basis.
fn scaled_outer(u: &Matrix, s: &[f64], v: &Matrix) -> Result<Matrix, LinalgError> {
    let mut us = u.columns(0, s.len());
    for (t, &st) in s.iter().enumerate() {
        for r in 0..us.rows {
            us.data[r * us.cols + t] *= st;
        }
    }
    matmul_transb(&us, &v.columns(0, s.len()))
}

/// Full spectrum of the seeded Gaussian reference draw behind
/// [`init_decoupled`] for this shape: the first `spec.k` values land on the
/// common matrix and the remaining `min(rows, cols) − spec.k` become every
/// expert's unique singular values. Exposed so callers can verify a fresh
/// weight against the draw without reaching into the construction.
pub fn reference_spectrum(
    rows: usize,
    cols: usize,
    spec: &InitSpec,
) -> Result<Vec<f64>, DecoupledError> {
    if rows == 0 || cols == 0 {
        return Err(DecoupledError::BadParts {
            detail: format!("empty reference shape {rows}x{cols}"),
        });
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(DecoupledError::BadScale { scale: spec.scale });
    }
    let reference = gaussian(rows, cols, &mut rng_for(spec.seed, 0), spec.scale);
    Ok(svd(&reference)?.sigma)
}

/// Build a fresh decoupled weight.
///
/// The singular values come from the SVD of a seeded Gaussian reference
/// matrix with entry std `spec.scale` (see [`reference_spectrum`]): its
/// top-k factors become the common matrix, and every expert receives the
/// tail values laid along its own random complement subspace pair. Bitwise
/// deterministic in `spec.seed`.
pub fn init_decoupled(
    rows: usize,
    cols: usize,
    spec: &InitSpec,
    refresh_interval: usize,
) -> Result<DecoupledLinear, DecoupledError> {
    let p = rows.min(cols);
    if spec.k == 0 || spec.k >= p {
        return Err(DecoupledError::BadRank {
            k: spec.k,
            rows,
            cols,
        });
    }
    if spec.n_experts == 0 {
        return Err(DecoupledError::NoExperts);
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(DecoupledError::BadScale { scale: spec.scale });
    }
    if refresh_interval == 0 {
        return Err(DecoupledError::BadRefreshInterval);
    }

    let mut rng = rng_for(spec.seed, 0);
    let reference = gaussian(rows, cols, &mut rng, spec.scale);
    let f = svd(&reference)?;
    let u_k = OrthonormalBasis::new(f.u.columns(0, spec.k))?;
    let v_k = OrthonormalBasis::new(f.v.columns(0, spec.k))?;
    let sigma_k = f.sigma[..spec.k].to_vec();
    let w_c = scaled_outer(&f.u, &sigma_k, &f.v)?;
    let tail = &f.sigma[spec.k..p];

    let mut uniques = Vec::with_capacity(spec.n_experts);
    for i in 0..spec.n_experts {
        let ub = complement_basis(&u_k, spec.seed, i, 0)?;
        let vb = complement_basis(&v_k, spec.seed, i, 1)?;
        // diag(tail) zero-padded to (rows−k)×(cols−k): only the first
        // tail.len() columns of each complement basis carry weight.
        let w_u = scaled_outer(ub.matrix(), tail, vb.matrix())?;
        uniques.push(w_u);
    }

    Ok(DecoupledLinear {
        rows,
        cols,
        k: spec.k,
        w_c,
        u_k,
        v_k,
        sigma_k,
        uniques,
        refresh_interval,
        steps_since_refresh: 0,
    })
}

impl DecoupledLinear {
    /// Reassemble from stored tensors (checkpoint load). Validates shapes,
    /// basis orthonormality, and the spectral ordering; the complement
    /// residual is *not* rechecked because a legitimately saved model may
    /// sit mid-interval with accumulated drift.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w_c: Matrix,
        u_k: Matrix,
        v_k: Matrix,
        sigma_k: Vec<f64>,
        uniques: Vec<Matrix>,
        refresh_interval: usize,
        steps_since_refresh: usize,
    ) -> Result<Self, DecoupledError> {
        let (rows, cols) = (w_c.rows, w_c.cols);
        let k = u_k.cols;
        if k == 0 || k >= rows.min(cols) {
            return Err(DecoupledError::BadRank { k, rows, cols });
        }
        if u_k.rows != rows || v_k.rows != cols || v_k.cols != k {
            return Err(DecoupledError::BadParts {
                detail: format!(
                    "bases {}x{} / {}x{} do not fit a {rows}x{cols} weight with k={k}",
                    u_k.rows, u_k.cols, v_k.rows, v_k.cols
                ),
            });
        }
        if sigma_k.len() != k {
            return Err(DecoupledError::BadParts {
                detail: format!("{} spectral values for k={k}", sigma_k.len()),
            });
        }
        for (i, &s) in sigma_k.iter().enumerate() {
            let ok = s.is_finite() && s >= 0.0 && (i == 0 || sigma_k[i - 1] >= s);
            if !ok {
                return Err(DecoupledError::BadParts {
                    detail: format!("spectral values not descending non-negative at {i}"),
                });
            }
        }
        if uniques.is_empty() {
            return Err(DecoupledError::NoExperts);
        }
        for (i, u) in uniques.iter().enumerate() {
            if u.rows != rows || u.cols != cols {
                return Err(DecoupledError::BadParts {
                    detail: format!("unique {i} is {}x{}, expected {rows}x{cols}", u.rows, u.cols),
                });
            }
        }
        if refresh_interval == 0 {
            return Err(DecoupledError::BadRefreshInterval);
        }
        Ok(DecoupledLinear {
            rows,
            cols,
            k,
            w_c,
            u_k: OrthonormalBasis::new(u_k)?,
            v_k: OrthonormalBasis::new(v_k)?,
            sigma_k,
            uniques,
            refresh_interval,
            steps_since_refresh,
        })
    }

    /// Extract the rank-k component shared by a set of same-shape weights
    /// and rebuild a decoupled bank around it.
    ///
    /// The right basis is taken from the SVD of the row-stacked bank, where
    /// input directions common to every expert accumulate energy while
    /// expert-specific ones stay diluted. The shared matrix is the expert
    /// mean restricted to that basis (re-factored so the stored spectrum
    /// describes it exactly), and each expert keeps its residual projected
    /// into the double complement. The second return value is the total
    /// squared Frobenius energy the residuals lost to that projection.
    pub fn decompose(
        weights: &[Matrix],
        k: usize,
        refresh_interval: usize,
    ) -> Result<(Self, f64), DecoupledError> {
        Self::decompose_along(weights, weights, k, refresh_interval)
    }

    /// Like [`DecoupledLinear::decompose`], but the right basis is pooled
    /// from `directions` instead of the weights themselves.
    ///
    /// Useful when the structure worth sharing is not yet prominent in the
    /// weights — most notably when `directions` are per-expert gradients,
    /// whose dominant right subspace is the input structure every expert is
    /// currently learning. Direction matrices may have any height but must
    /// match the weights' width.
    pub fn decompose_along(
        weights: &[Matrix],
        directions: &[Matrix],
        k: usize,
        refresh_interval: usize,
    ) -> Result<(Self, f64), DecoupledError> {
        let first = weights.first().ok_or(DecoupledError::NoExperts)?;
        let (rows, cols) = (first.rows, first.cols);
        if k == 0 || k >= rows.min(cols) {
            return Err(DecoupledError::BadRank { k, rows, cols });
        }
        if refresh_interval == 0 {
            return Err(DecoupledError::BadRefreshInterval);
        }
        for (i, w) in weights.iter().enumerate() {
            if w.rows != rows || w.cols != cols {
                return Err(DecoupledError::BadParts {
                    detail: format!(
                        "weight {i} is {}x{}, expected {rows}x{cols}",
                        w.rows, w.cols
                    ),
                });
            }
        }
        if directions.is_empty() {
            return Err(DecoupledError::BadParts {
                detail: "no direction matrices to pool a basis from".into(),
            });
        }
        for (i, m) in directions.iter().enumerate() {
            if m.cols != cols {
                return Err(DecoupledError::BadParts {
                    detail: format!(
                        "direction {i} has width {}, expected {cols}",
                        m.cols
                    ),
                });
            }
        }

        let total_rows: usize = directions.iter().map(|m| m.rows).sum();
        let mut stack = Matrix::zeros(total_rows, cols);
        let mut at = 0usize;
        for m in directions {
            stack.data[at..at + m.data.len()].copy_from_slice(&m.data);
            at += m.data.len();
        }
        let pooled = svd(&stack)?;
        let v_pool = pooled.v.columns(0, k);

        let mut mean = Matrix::zeros(rows, cols);
        for w in weights {
            mean = mean.plus(w)?;
        }
        let mean = mean.scaled(1.0 / weights.len() as f64);
        let mv = matmul(&mean, &v_pool)?;
        let restricted = matmul_transb(&mv, &v_pool)?;
        let f = svd(&restricted)?;
        let sigma_k = f.sigma[..k].to_vec();
        let w_c = scaled_outer(&f.u, &sigma_k, &f.v)?;
        let u_k = OrthonormalBasis::new(f.u.columns(0, k))?;
        let v_k = OrthonormalBasis::new(f.v.columns(0, k))?;

        let u = u_k.matrix();
        let v = v_k.matrix();
        let mut uniques = Vec::with_capacity(weights.len());
        let mut dropped = 0.0;
        for w in weights {
            let r = w.minus(&w_c)?;
            let coeff = matmul_transa(u, &r)?;
            let pu = matmul(u, &coeff)?;
            let rest = r.minus(&pu)?;
            let rv = matmul(&rest, v)?;
            let rest_pv = matmul_transb(&rv, v)?;
            let w_u = rest.minus(&rest_pv)?;
            dropped += r.frobenius_norm_sq() - w_u.frobenius_norm_sq();
            uniques.push(w_u);
        }

        Ok((
            DecoupledLinear {
                rows,
                cols,
                k,
                w_c,
                u_k,
                v_k,
                sigma_k,
                uniques,
                refresh_interval,
                steps_since_refresh: 0,
            },
            dropped,
        ))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_experts(&self) -> usize {
        self.uniques.len()
    }

    pub fn common(&self) -> &Matrix {
        &self.w_c
    }

    pub fn common_mut(&mut self) -> &mut Matrix {
        &mut self.w_c
    }

    pub fn basis_u(&self) -> &OrthonormalBasis {
        &self.u_k
    }

    pub fn basis_v(&self) -> &OrthonormalBasis {
        &self.v_k
    }

    pub fn sigma_k(&self) -> &[f64] {
        &self.sigma_k
    }

    pub fn refresh_interval(&self) -> usize {
        self.refresh_interval
    }

    pub fn steps_since_refresh(&self) -> usize {
        self.steps_since_refresh
    }

    pub fn unique(&self, i: usize) -> Result<&Matrix, DecoupledError> {
        self.uniques.get(i).ok_or(DecoupledError::ExpertIndex {
            index: i,
            n_experts: self.uniques.len(),
        })
    }

    pub fn unique_mut(&mut self, i: usize) -> Result<&mut Matrix, DecoupledError> {
        let n = self.uniques.len();
        self.uniques
            .get_mut(i)
            .ok_or(DecoupledError::ExpertIndex {
                index: i,
                n_experts: n,
            })
    }

    /// Effective weight of expert i: common plus unique.
    pub fn proxy_weight(&self, i: usize) -> Result<Matrix, DecoupledError> {
        Ok(self.w_c.plus(self.unique(i)?)?)
    }

    /// Split a proxy gradient into the part absorbed by the shared matrix
    /// and the complement part private to the expert.
    ///
    /// With P_U = U_kU_kᵀ and P_V = V_kV_kᵀ:
    /// `g_c = P_U·g + (I−P_U)·g·P_V` and `g_u = g − g_c`, which equals
    /// `(I−P_U)·g·(I−P_V)` algebraically.
    pub fn split_gradient(&self, g: &Matrix) -> Result<(Matrix, Matrix), DecoupledError> {
        if g.rows != self.rows || g.cols != self.cols {
            return Err(LinalgError::ShapeMismatch {
                context: "split_gradient",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: g.rows,
                rhs_cols: g.cols,
            }
            .into());
        }
        let u = self.u_k.matrix();
        let v = self.v_k.matrix();
        let coeff = matmul_transa(u, g)?;
        let pu_g = matmul(u, &coeff)?;
        let rest = g.minus(&pu_g)?;
        let rv = matmul(&rest, v)?;
        let rest_pv = matmul_transb(&rv, v)?;
        let g_c = pu_g.plus(&rest_pv)?;
        let g_u = g.minus(&g_c)?;
        Ok((g_c, g_u))
    }

    /// One training step: split each active expert's proxy gradient, apply
    /// the optimizer to the shared matrix on the *sum* of the common parts
    /// (the chain rule through a parameter shared by every active expert),
    /// and to each active unique on its own complement part. Experts are
    /// processed in ascending index order regardless of input order, so the
    /// shared-gradient summation is reproducible. An empty update only
    /// advances the refresh counter.
    pub fn accumulate_updates(
        &mut self,
        per_expert_grads: &[(usize, Matrix)],
        states: &mut DecoupledStates,
        kind: OptimizerKind,
        lr: f64,
    ) -> Result<(), DecoupledError> {
        if states.uniques.len() != self.uniques.len() {
            return Err(DecoupledError::StateCount {
                states: states.uniques.len(),
                n_experts: self.uniques.len(),
            });
        }
        let mut order: Vec<usize> = (0..per_expert_grads.len()).collect();
        order.sort_by_key(|&slot| per_expert_grads[slot].0);
        for w in order.windows(2) {
            if per_expert_grads[w[0]].0 == per_expert_grads[w[1]].0 {
                return Err(DecoupledError::DuplicateExpert {
                    index: per_expert_grads[w[0]].0,
                });
            }
        }
        let mut common_sum: Option<Matrix> = None;
        let mut unique_parts: Vec<(usize, Matrix)> = Vec::with_capacity(order.len());
        for slot in order {
            let (index, ref g) = per_expert_grads[slot];
            if index >= self.uniques.len() {
                return Err(DecoupledError::ExpertIndex {
                    index,
                    n_experts: self.uniques.len(),
                });
            }
            let (g_c, g_u) = self.split_gradient(g)?;
            match common_sum.as_mut() {
                Some(acc) => acc.add_scaled(&g_c, 1.0)?,
                None => common_sum = Some(g_c),
            }
            unique_parts.push((index, g_u));
        }
        if let Some(total) = common_sum {
            apply_update(&mut self.w_c, &total, &mut states.common, kind, lr)?;
        }
        for (index, g_u) in unique_parts {
            apply_update(
                &mut self.uniques[index],
                &g_u,
                &mut states.uniques[index],
                kind,
                lr,
            )?;
        }
        self.steps_since_refresh += 1;
        Ok(())
    }

    pub fn needs_refresh(&self) -> bool {
        self.steps_since_refresh >= self.refresh_interval
    }

    /// Re-derive the subspace pair from the current shared matrix and, when
    /// `reproject` is set, push every unique back into the new complement,
    /// logging the Frobenius energy each one lost. Resets the step counter.
    pub fn refresh_basis(&mut self, reproject: bool) -> Result<RefreshOutcome, DecoupledError> {
        let f = svd(&self.w_c)?;
        self.u_k = OrthonormalBasis::new(f.u.columns(0, self.k))?;
        self.v_k = OrthonormalBasis::new(f.v.columns(0, self.k))?;
        self.sigma_k = f.sigma[..self.k].to_vec();

        let u = self.u_k.matrix();
        let v = self.v_k.matrix();
        let mut per_expert = Vec::with_capacity(self.uniques.len());
        for w_u in self.uniques.iter_mut() {
            let norm_sq_before = w_u.frobenius_norm_sq();
            if reproject {
                let coeff = matmul_transa(u, w_u)?;
                let pu = matmul(u, &coeff)?;
                let rest = w_u.minus(&pu)?;
                let rv = matmul(&rest, v)?;
                let rest_pv = matmul_transb(&rv, v)?;
                let projected = rest.minus(&rest_pv)?;
                let dropped_energy = w_u.minus(&projected)?.frobenius_norm_sq();
                *w_u = projected;
                let norm_sq_after = w_u.frobenius_norm_sq();
                per_expert.push(UniqueRefresh {
                    norm_sq_before,
                    norm_sq_after,
                    dropped_energy,
                });
            } else {
                per_expert.push(UniqueRefresh {
                    norm_sq_before,
                    norm_sq_after: norm_sq_before,
                    dropped_energy: 0.0,
                });
            }
        }
        self.steps_since_refresh = 0;
        Ok(RefreshOutcome { per_expert })
    }

    /// Worst complement violation over all uniques:
    /// max_i max(‖U_kᵀ·W_u⁽ⁱ⁾‖_max, ‖W_u⁽ⁱ⁾·V_k‖_max).
    pub fn orthogonality_residual(&self) -> Result<f64, DecoupledError> {
        let u = self.u_k.matrix();
        let v = self.v_k.matrix();
        let mut worst = 0.0f64;
        for w_u in &self.uniques {
            worst = worst.max(matmul_transa(u, w_u)?.max_abs());
            worst = worst.max(matmul(w_u, v)?.max_abs());
        }
        Ok(worst)
    }
}
