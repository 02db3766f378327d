//! Synthetic planted-subspace data, training loops for both layer variants,
//! and the measurement drivers: gradient-alignment reports, rank sweeps,
//! learning-rate stress runs, and post-training specialization reports.
//!
//! The task plants an orthonormal subspace `C = span(A)` of rank `r` inside
//! the token space and draws every token as a mix of a component inside `C`
//! (fraction `rho` of the energy) and a component in its complement. Targets
//! come from a fixed seeded linear map, either raw (regression) or through
//! an entrywise sign (classification). Training a mixture layer on this data
//! makes the planted subspace the dominant right factor of every expert's
//! gradient, which is exactly the structure the decoupled variant is built
//! to absorb into its shared block.

use crate::decoupled::{DecoupledError, DecoupledStates};
use crate::linalg::{gaussian, matmul, qr_orthonormal, svd, LinalgError, Matrix};
use crate::metrics::{
    comparison_basis, gate_alignment_profile, gradient_subspace_similarity,
    pairwise_expert_similarity, principal_similarity, AnalysisConfig, MetricsError,
    SimilarityMatrix, SpectralSide, SubspaceInterval, WeightSide,
};
use crate::moe::{
    aux_gate_gradient, init_layer, layer_backward, layer_forward, load_balance_loss,
    ExpertBank, ExpertGrads, MoeConfig, MoeError, MoeLayerParams, Variant,
};
use crate::optim::{apply_update, OptimizerKind, ParamState};
use crate::util::{rng_for, subseed};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Decoupled(#[from] DecoupledError),
    #[error("invalid task spec: {detail}")]
    BadTaskSpec { detail: String },
    #[error("invalid train config: {detail}")]
    BadTrainConfig { detail: String },
    #[error("invalid learning-rate list: {detail}")]
    BadLrList { detail: String },
    #[error("task dimension {task_d} does not match layer width {model_d}")]
    WidthMismatch { task_d: usize, model_d: usize },
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    LinearRegression,
    SubspaceClassification,
}

impl fmt::Display for TargetRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetRule::LinearRegression => "regression",
            TargetRule::SubspaceClassification => "classification",
        })
    }
}

impl FromStr for TargetRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(TargetRule::LinearRegression),
            "classification" => Ok(TargetRule::SubspaceClassification),
            other => Err(format!(
                "unknown target rule '{other}' (expected regression or classification)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    /// Token dimension (must equal the layer's d_model).
    pub d: usize,
    /// Rank of the planted shared subspace.
    pub r: usize,
    /// Fraction of expected token energy inside the planted subspace, (0,1].
    pub rho: f64,
    /// Tokens per batch.
    pub n_tokens: usize,
    pub rule: TargetRule,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn toy() -> Self {
        SyntheticTaskSpec {
            d: 32,
            r: 4,
            rho: 0.9,
            n_tokens: 32,
            rule: TargetRule::LinearRegression,
            seed: 11,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |detail: String| Err(HarnessError::BadTaskSpec { detail });
        if self.r == 0 || self.r >= self.d {
            return fail(format!("rank r={} not in 1..{}", self.r, self.d));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho={} not in (0,1]", self.rho));
        }
        if self.n_tokens == 0 {
            return fail("zero tokens per batch".into());
        }
        Ok(())
    }
}

const TAG_PLANTED: u64 = 1;
const TAG_TARGET_MAP: u64 = 2;
const TAG_DATA: u64 = 3;

/// The planted subspace basis `a` (d×r) and an orthonormal basis of its
/// complement `a_perp` (d×(d−r)). Fixed by the spec seed alone.
#[derive(Debug, Clone)]
pub struct PlantedBasis {
    pub a: Matrix,
    pub a_perp: Matrix,
}

pub fn planted_basis(spec: &SyntheticTaskSpec) -> Result<PlantedBasis, HarnessError> {
    spec.validate()?;
    let g = gaussian(spec.d, spec.d, &mut rng_for(spec.seed, TAG_PLANTED), 1.0);
    let q = qr_orthonormal(&g)?.into_matrix();
    Ok(PlantedBasis {
        a: q.columns(0, spec.r),
        a_perp: q.columns(spec.r, spec.d),
    })
}

/// The fixed seeded linear map behind the targets.
fn target_map(spec: &SyntheticTaskSpec) -> Matrix {
    let scale = 1.0 / (spec.d as f64).sqrt();
    gaussian(spec.d, spec.d, &mut rng_for(spec.seed, TAG_TARGET_MAP), scale)
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// n_tokens × d, one token per row.
    pub x: Matrix,
    /// n_tokens × d regression values or ±1 sign patterns.
    pub targets: Matrix,
}

/// Draw one batch. Component variances are normalized so the *measured*
/// shared-energy fraction ‖X·A‖²_F/‖X‖²_F concentrates at `rho` regardless
/// of the subspace dimensions: tokens are
/// `x = √(rho/r)·A·z + √((1−rho)/(d−r))·A_⊥·w` with standard Gaussian z, w.
pub fn gen_batch(spec: &SyntheticTaskSpec, batch_index: u64) -> Result<Batch, HarnessError> {
    spec.validate()?;
    let basis = planted_basis(spec)?;
    let mut rng = rng_for(subseed(spec.seed, TAG_DATA), batch_index);
    let z = gaussian(spec.n_tokens, spec.r, &mut rng, 1.0);
    let w = gaussian(spec.n_tokens, spec.d - spec.r, &mut rng, 1.0);
    let shared_scale = (spec.rho / spec.r as f64).sqrt();
    let noise_scale = ((1.0 - spec.rho) / (spec.d - spec.r) as f64).sqrt();
    let mut x = crate::linalg::matmul_transb(&z, &basis.a)?.scaled(shared_scale);
    x.add_scaled(
        &crate::linalg::matmul_transb(&w, &basis.a_perp)?,
        noise_scale,
    )?;

    let m = target_map(spec);
    let mut targets = crate::linalg::matmul_transb(&x, &m)?;
    if spec.rule == TargetRule::SubspaceClassification {
        for v in targets.data.iter_mut() {
            *v = if *v >= 0.0 { 1.0 } else { -1.0 };
        }
    }
    Ok(Batch { x, targets })
}

/// ‖X·A‖²_F / ‖X‖²_F — the fraction of the batch energy inside span(A).
pub fn measured_shared_fraction(x: &Matrix, a: &Matrix) -> Result<f64, HarnessError> {
    let proj = matmul(x, a)?;
    let total = x.frobenius_norm_sq();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(proj.frobenius_norm_sq() / total)
}

/// Mean squared error `0.5·‖y−t‖²_F / n_tokens` and its gradient in `y`.
pub fn mse_loss(y: &Matrix, targets: &Matrix) -> Result<(f64, Matrix), HarnessError> {
    let diff = y.minus(targets)?;
    let n = y.rows as f64;
    let loss = 0.5 * diff.frobenius_norm_sq() / n;
    Ok((loss, diff.scaled(1.0 / n)))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Basis-refresh cadence for the decoupled variant (in steps).
    pub refresh_interval: usize,
    /// Metrics-row cadence (a row is always written for the final step).
    pub log_every: u64,
    /// Layer-initialization seed.
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            steps: 500,
            lr: 0.5,
            optimizer: OptimizerKind::Sgd,
            refresh_interval: 16,
            log_every: 10,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |detail: String| Err(HarnessError::BadTrainConfig { detail });
        if self.steps == 0 {
            return fail("steps must be ≥ 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr={} must be finite and ≥ 0", self.lr));
        }
        if self.refresh_interval == 0 {
            return fail("refresh_interval must be ≥ 1".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be ≥ 1".into());
        }
        Ok(())
    }
}

/// One logged observation. Losses are measured on the step's batch before
/// the update; the state columns (similarity, residual, dropped energy)
/// describe the parameters after the update and any basis refresh.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub task_loss: f64,
    pub aux_loss: f64,
    /// Mean off-diagonal pairwise similarity of the experts' top
    /// up-projection directions (unique parts for the decoupled variant).
    pub expert_similarity: f64,
    /// Mean pairwise right-subspace similarity of the active experts'
    /// up-projection gradients this step; 0 when fewer than two were active.
    pub grad_similarity: f64,
    /// Decoupled variant: worst complement violation across the three
    /// decoupled blocks; 0 for the baseline.
    pub ortho_residual: f64,
    /// Unique-weight energy discarded by a basis refresh at this step;
    /// 0 on steps without a refresh and for the baseline.
    pub dropped_energy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub task_loss: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub log: MetricsLog,
    pub divergence: Option<Divergence>,
    pub initial_task_loss: f64,
    pub final_task_loss: f64,
    pub peak_aux_loss: f64,
}

/// Task loss beyond this value counts as divergence even while finite.
pub const DIVERGENCE_LOSS_LIMIT: f64 = 1e6;

fn role_grad(g: &ExpertGrads, role: usize) -> &Matrix {
    match role {
        0 => &g.gate_proj,
        1 => &g.up_proj,
        _ => &g.down_proj,
    }
}

/// Mean off-diagonal pairwise similarity of the experts' head-interval
/// up-projection subspaces (unique parts for the decoupled variant).
/// Returns 0 for a single-expert layer.
pub fn expert_head_similarity(
    params: &MoeLayerParams,
    head_rank: usize,
) -> Result<f64, HarnessError> {
    let ups = up_weight_matrices(params)?;
    if ups.len() < 2 {
        return Ok(0.0);
    }
    let bases: Vec<Matrix> = ups
        .iter()
        .map(|w| Ok(comparison_basis(w, WeightSide::UpOrGate)?.basis().clone()))
        .collect::<Result<_, HarnessError>>()?;
    let interval = SubspaceInterval::new(1, head_rank)?;
    let sim = pairwise_expert_similarity(&bases, interval)?;
    Ok(sim.mean_off_diagonal())
}

/// The per-expert weight carrying each expert's individual character: the
/// dense up-projection, or the unique up-projection part for the decoupled
/// variant.
fn up_weight_matrices(params: &MoeLayerParams) -> Result<Vec<Matrix>, HarnessError> {
    match &params.bank {
        ExpertBank::Dense(experts) => Ok(experts.iter().map(|e| e.up_proj.clone()).collect()),
        ExpertBank::Decoupled { up, .. } => (0..up.n_experts())
            .map(|e| Ok(up.unique(e)?.clone()))
            .collect(),
    }
}

fn mean_pairwise_grad_similarity(
    grads: &[&Matrix],
    rank: usize,
) -> Result<f64, HarnessError> {
    if grads.len() < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..grads.len() {
        for j in (i + 1)..grads.len() {
            sum += gradient_subspace_similarity(grads[i], grads[j], rank, SpectralSide::Right)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Train the layer in place on the synthetic task. One fresh batch per step
/// (batch index = step); decoupled blocks update through the gradient split
/// and refresh their bases on the interval they were built with. Divergence
/// (non-finite task loss or loss above [`DIVERGENCE_LOSS_LIMIT`]) stops the
/// run and is reported as data, not as an error.
pub fn train(
    params: &mut MoeLayerParams,
    task: &SyntheticTaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainRun, HarnessError> {
    params.config.validate()?;
    task.validate()?;
    cfg.validate()?;
    if task.d != params.config.d_model {
        return Err(HarnessError::WidthMismatch {
            task_d: task.d,
            model_d: params.config.d_model,
        });
    }
    let n_experts = params.config.n_experts;
    let aux_coef = params.config.aux_coef;
    let grad_rank = task.r.min(params.config.d_model).min(params.config.d_ff);
    let head_rank = AnalysisConfig::default()
        .head_rank(params.config.d_model.min(params.config.d_ff));

    let mut gate_state = ParamState::new();
    let mut dense_states: Vec<[ParamState; 3]> = match &params.bank {
        ExpertBank::Dense(_) => (0..n_experts)
            .map(|_| [ParamState::new(), ParamState::new(), ParamState::new()])
            .collect(),
        _ => Vec::new(),
    };
    let mut sd_states: Vec<DecoupledStates> = match &params.bank {
        ExpertBank::Decoupled { .. } => {
            (0..3).map(|_| DecoupledStates::new(n_experts)).collect()
        }
        _ => Vec::new(),
    };

    let mut log = MetricsLog::default();
    let mut divergence = None;
    let mut initial_task_loss = f64::NAN;
    let mut final_task_loss = f64::NAN;
    let mut peak_aux_loss = f64::NEG_INFINITY;

    for step_idx in 0..cfg.steps {
        let step = step_idx + 1;
        let batch = gen_batch(task, step_idx)?;
        let (y, cache) = layer_forward(params, &batch.x)?;
        let (task_loss, dy) = mse_loss(&y, &batch.targets)?;
        let aux_loss = load_balance_loss(&cache.routing);
        if step == 1 {
            initial_task_loss = task_loss;
        }
        final_task_loss = task_loss;
        peak_aux_loss = peak_aux_loss.max(aux_loss);

        let diverged = !task_loss.is_finite() || task_loss > DIVERGENCE_LOSS_LIMIT;
        if diverged {
            divergence = Some(Divergence { step, task_loss });
            log.rows.push(MetricsRow {
                step,
                task_loss,
                aux_loss,
                expert_similarity: expert_head_similarity(params, head_rank)?,
                grad_similarity: 0.0,
                ortho_residual: ortho_residual(params)?,
                dropped_energy: 0.0,
            });
            break;
        }

        let (grads, _) = layer_backward(params, &cache, &dy)?;
        let mut gate_grad = grads.w_gate.clone();
        if aux_coef != 0.0 {
            let aux_grad = aux_gate_gradient(&cache.routing, &batch.x)?;
            gate_grad.add_scaled(&aux_grad, aux_coef)?;
        }
        apply_update(
            &mut params.w_gate,
            &gate_grad,
            &mut gate_state,
            cfg.optimizer,
            cfg.lr,
        )?;

        let counts = cache.expert_token_counts();
        let mut dropped_energy = 0.0;
        match &mut params.bank {
            ExpertBank::Dense(experts) => {
                for (e, ex) in experts.iter_mut().enumerate() {
                    for (role, w) in [&mut ex.gate_proj, &mut ex.up_proj, &mut ex.down_proj]
                        .into_iter()
                        .enumerate()
                    {
                        apply_update(
                            w,
                            role_grad(&grads.experts[e], role),
                            &mut dense_states[e][role],
                            cfg.optimizer,
                            cfg.lr,
                        )?;
                    }
                }
                if let (Some(sw), Some(sg)) = (&mut params.shared, &grads.shared) {
                    // Shared expert rides on the gate optimizer-state slot
                    // rules: its own three states, appended after the banks.
                    // Lazily sized on first use.
                    if dense_states.len() == n_experts {
                        dense_states.push([
                            ParamState::new(),
                            ParamState::new(),
                            ParamState::new(),
                        ]);
                    }
                    let st = dense_states.last_mut().expect("just ensured");
                    apply_update(&mut sw.gate_proj, &sg.gate_proj, &mut st[0], cfg.optimizer, cfg.lr)?;
                    apply_update(&mut sw.up_proj, &sg.up_proj, &mut st[1], cfg.optimizer, cfg.lr)?;
                    apply_update(&mut sw.down_proj, &sg.down_proj, &mut st[2], cfg.optimizer, cfg.lr)?;
                }
            }
            ExpertBank::Decoupled { gate, up, down } => {
                for (role, dl) in [gate, up, down].into_iter().enumerate() {
                    let updates: Vec<(usize, Matrix)> = (0..n_experts)
                        .filter(|&e| counts[e] > 0)
                        .map(|e| (e, role_grad(&grads.experts[e], role).clone()))
                        .collect();
                    dl.accumulate_updates(&updates, &mut sd_states[role], cfg.optimizer, cfg.lr)?;
                    if dl.needs_refresh() {
                        let outcome = dl.refresh_basis(true)?;
                        dropped_energy += outcome.total_dropped();
                    }
                }
            }
        }

        if step % cfg.log_every == 0 || step == cfg.steps {
            let active_grads: Vec<&Matrix> = (0..n_experts)
                .filter(|&e| counts[e] > 0)
                .map(|e| &grads.experts[e].up_proj)
                .collect();
            log.rows.push(MetricsRow {
                step,
                task_loss,
                aux_loss,
                expert_similarity: expert_head_similarity(params, head_rank)?,
                grad_similarity: mean_pairwise_grad_similarity(&active_grads, grad_rank)?,
                ortho_residual: ortho_residual(params)?,
                dropped_energy,
            });
        }
    }

    Ok(TrainRun {
        log,
        divergence,
        initial_task_loss,
        final_task_loss,
        peak_aux_loss,
    })
}

fn ortho_residual(params: &MoeLayerParams) -> Result<f64, HarnessError> {
    match &params.bank {
        ExpertBank::Dense(_) => Ok(0.0),
        ExpertBank::Decoupled { gate, up, down } => {
            let mut worst = 0.0f64;
            for dl in [gate, up, down] {
                worst = worst.max(dl.orthogonality_residual()?);
            }
            Ok(worst)
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient-alignment measurement
// ---------------------------------------------------------------------------

/// Alignment of per-expert up-projection gradients with each other and with
/// the planted subspace, from one forward/backward on a fresh batch.
#[derive(Debug)]
pub struct GradAlignReport {
    /// Subspace rank used for every comparison.
    pub rank: usize,
    /// Experts that received at least one token, ascending.
    pub active: Vec<usize>,
    /// Experts that received no tokens (excluded from all comparisons).
    pub excluded: Vec<usize>,
    /// Pairwise right-subspace similarity of raw gradients, indexed like
    /// `active`; absent when fewer than two experts were active.
    pub pairwise: Option<SimilarityMatrix>,
    /// Similarity of each active expert's top right gradient subspace with
    /// the planted basis, aligned with `active`.
    pub align_to_c: Vec<f64>,
    /// Decoupled variant only: the same alignment measured on the unique
    /// part of the split gradient, aligned with `active`.
    pub unique_align_to_c: Option<Vec<f64>>,
}

/// Top-`rank` right singular subspace of a gradient.
fn right_subspace(g: &Matrix, rank: usize) -> Result<Matrix, HarnessError> {
    let f = svd(g)?;
    let k = rank.min(f.v.cols);
    Ok(f.v.columns(0, k))
}

/// ‖G·(I−P_A)‖_F / ‖G‖_F — relative gradient energy outside span(A), for an
/// orthonormal `a` (columns spanning the subspace).
pub fn gradient_complement_residual(g: &Matrix, a: &Matrix) -> Result<f64, HarnessError> {
    let norm = g.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let ga = matmul(g, a)?;
    let projected = crate::linalg::matmul_transb(&ga, a)?;
    let outside = g.minus(&projected)?;
    Ok(outside.frobenius_norm() / norm)
}

pub fn measure_gradient_alignment(
    params: &MoeLayerParams,
    task: &SyntheticTaskSpec,
    rank: usize,
    batch_index: u64,
) -> Result<GradAlignReport, HarnessError> {
    task.validate()?;
    if task.d != params.config.d_model {
        return Err(HarnessError::WidthMismatch {
            task_d: task.d,
            model_d: params.config.d_model,
        });
    }
    let batch = gen_batch(task, batch_index)?;
    let (y, cache) = layer_forward(params, &batch.x)?;
    let (_, dy) = mse_loss(&y, &batch.targets)?;
    let (grads, _) = layer_backward(params, &cache, &dy)?;
    let counts = cache.expert_token_counts();
    let active: Vec<usize> = (0..params.config.n_experts)
        .filter(|&e| counts[e] > 0)
        .collect();
    let excluded: Vec<usize> = (0..params.config.n_experts)
        .filter(|&e| counts[e] == 0)
        .collect();
    let rank = rank
        .min(params.config.d_model)
        .min(params.config.d_ff)
        .max(1);

    let raw: Vec<&Matrix> = active.iter().map(|&e| &grads.experts[e].up_proj).collect();
    let pairwise = if raw.len() >= 2 {
        let n = raw.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = if i == j {
                    1.0
                } else {
                    gradient_subspace_similarity(raw[i], raw[j], rank, SpectralSide::Right)?
                };
            }
        }
        Some(SimilarityMatrix::new(n, values)?)
    } else {
        None
    };

    let planted = planted_basis(task)?;
    let mut align_to_c = Vec::with_capacity(active.len());
    for g in &raw {
        let rb = right_subspace(g, rank)?;
        align_to_c.push(principal_similarity(&rb, &planted.a)?);
    }

    let unique_align_to_c = match &params.bank {
        ExpertBank::Decoupled { up, .. } => {
            let mut vals = Vec::with_capacity(active.len());
            for (idx, &_e) in active.iter().enumerate() {
                let (_, g_u) = up.split_gradient(raw[idx])?;
                let rb = right_subspace(&g_u, rank)?;
                vals.push(principal_similarity(&rb, &planted.a)?);
            }
            Some(vals)
        }
        ExpertBank::Dense(_) => None,
    };

    Ok(GradAlignReport {
        rank,
        active,
        excluded,
        pairwise,
        align_to_c,
        unique_align_to_c,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RankSweepRow {
    pub k: usize,
    pub final_loss: f64,
    pub mean_expert_similarity: f64,
}

/// One deterministic decoupled training run per rank, shared seeds.
pub fn rank_sweep(
    moe_base: &MoeConfig,
    task: &SyntheticTaskSpec,
    cfg: &TrainConfig,
    ks: &[usize],
) -> Result<Vec<RankSweepRow>, HarnessError> {
    let head_rank =
        AnalysisConfig::default().head_rank(moe_base.d_model.min(moe_base.d_ff));
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut config = moe_base.clone();
        config.variant = Variant::Sd;
        config.k = k;
        let mut params = init_layer(&config, cfg.refresh_interval, cfg.seed)?;
        let run = train(&mut params, task, cfg)?;
        rows.push(RankSweepRow {
            k,
            final_loss: run.final_task_loss,
            mean_expert_similarity: expert_head_similarity(&params, head_rank)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrStressRow {
    pub variant: Variant,
    pub lr: f64,
    pub diverged: bool,
    pub divergence_step: Option<u64>,
    pub peak_aux_loss: f64,
}

/// Run both variants across an ascending list of learning rates and record
/// where each one diverges. Divergence is data here, never an error.
pub fn lr_stress(
    moe_base: &MoeConfig,
    task: &SyntheticTaskSpec,
    cfg: &TrainConfig,
    lrs: &[f64],
) -> Result<Vec<LrStressRow>, HarnessError> {
    if lrs.is_empty() {
        return Err(HarnessError::BadLrList {
            detail: "empty".into(),
        });
    }
    for pair in lrs.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(HarnessError::BadLrList {
                detail: format!("not strictly ascending: {} then {}", pair[0], pair[1]),
            });
        }
    }
    if !(lrs[0] > 0.0) {
        return Err(HarnessError::BadLrList {
            detail: format!("first entry {} not positive", lrs[0]),
        });
    }
    let mut rows = Vec::with_capacity(2 * lrs.len());
    for variant in [Variant::Baseline, Variant::Sd] {
        for &lr in lrs {
            let mut config = moe_base.clone();
            config.variant = variant;
            let mut run_cfg = cfg.clone();
            run_cfg.lr = lr;
            let mut params = init_layer(&config, run_cfg.refresh_interval, run_cfg.seed)?;
            let run = train(&mut params, task, &run_cfg)?;
            rows.push(LrStressRow {
                variant,
                lr,
                diverged: run.divergence.is_some(),
                divergence_step: run.divergence.map(|d| d.step),
                peak_aux_loss: run.peak_aux_loss,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Specialization report
// ---------------------------------------------------------------------------

/// How individual the experts are after training: pairwise similarity of
/// their top up-projection directions and each gate row's alignment profile
/// over its own expert's input-side singular basis.
#[derive(Debug)]
pub struct SpecializationReport {
    pub head_rank: usize,
    pub pairwise: SimilarityMatrix,
    pub mean_similarity: f64,
    /// Per expert: |⟨gate row, basis column⟩| / ‖gate row‖ for every column
    /// of that expert's input-side singular basis.
    pub gate_profiles: Vec<Vec<f64>>,
}

pub fn specialization_report(
    params: &MoeLayerParams,
    analysis: &AnalysisConfig,
) -> Result<SpecializationReport, HarnessError> {
    analysis.validate()?;
    let ups = up_weight_matrices(params)?;
    let p = params.config.d_model.min(params.config.d_ff);
    let head_rank = analysis.head_rank(p);
    let bases: Vec<Matrix> = ups
        .iter()
        .map(|w| Ok(comparison_basis(w, WeightSide::UpOrGate)?.basis().clone()))
        .collect::<Result<_, HarnessError>>()?;
    let interval = SubspaceInterval::new(1, head_rank)?;
    let pairwise = pairwise_expert_similarity(&bases, interval)?;
    let mean_similarity = pairwise.mean_off_diagonal();
    let mut gate_profiles = Vec::with_capacity(bases.len());
    for (e, basis) in bases.iter().enumerate() {
        gate_profiles.push(gate_alignment_profile(params.w_gate.row(e), basis)?);
    }
    Ok(SpecializationReport {
        head_rank,
        pairwise,
        mean_similarity,
        gate_profiles,
    })
}

// ---------------------------------------------------------------------------
// Variant comparison
// ---------------------------------------------------------------------------

/// One arm of a variant comparison: the parameters it ended with, its
/// training run, and the resulting specialization measurements.
#[derive(Debug)]
pub struct CompareArm {
    pub params: MoeLayerParams,
    pub run: TrainRun,
    pub specialization: SpecializationReport,
}

/// Dense-vs-decoupled comparison under one seed and one batch schedule.
#[derive(Debug)]
pub struct CompareReport {
    pub warm_steps: u64,
    pub arm_steps: u64,
    pub warm_run: TrainRun,
    /// Residual energy discarded when the warmed dense bank was rebuilt in
    /// decoupled form.
    pub decompose_dropped: f64,
    pub baseline: CompareArm,
    pub sd: CompareArm,
}

/// Train both layer variants from a common warm start and measure how each
/// update rule distributes further learning across experts.
///
/// The first half of the step budget trains one dense bank that both arms
/// inherit. The baseline arm keeps training it unchanged; the other arm is
/// first rebuilt around the rank-k component the warmed experts share — the
/// state the decoupled update rule is designed to maintain, with the shared
/// input directions held in the common block and the per-expert parts
/// confined to its complement — and then trains for the same number of
/// steps on the same batches. Starting both arms from identical weights and
/// data isolates the quantity under comparison: where each rule sends the
/// learning that follows.
pub fn compare_variants(
    config: &MoeConfig,
    task: &SyntheticTaskSpec,
    cfg: &TrainConfig,
    analysis: &AnalysisConfig,
) -> Result<CompareReport, HarnessError> {
    cfg.validate()?;
    analysis.validate()?;
    if cfg.steps < 2 {
        return Err(HarnessError::BadTrainConfig {
            detail: "a comparison needs at least 2 steps (warm-up plus arms)".into(),
        });
    }
    if config.include_shared_expert {
        return Err(HarnessError::BadTrainConfig {
            detail: "comparison runs on a plain bank, without the always-on shared expert".into(),
        });
    }
    let mut dense_cfg = config.clone();
    dense_cfg.variant = Variant::Baseline;
    dense_cfg.validate()?;
    let mut sd_cfg = config.clone();
    sd_cfg.variant = Variant::Sd;
    sd_cfg.validate()?;

    let warm_steps = cfg.steps / 2;
    let arm_steps = cfg.steps - warm_steps;
    let warm_cfg = TrainConfig {
        steps: warm_steps,
        ..cfg.clone()
    };
    let arm_cfg = TrainConfig {
        steps: arm_steps,
        ..cfg.clone()
    };

    let mut warm_params = init_layer(&dense_cfg, cfg.refresh_interval, cfg.seed)?;
    let warm_run = train(&mut warm_params, task, &warm_cfg)?;

    // Rebuild around the gradient-pooled basis: per-expert gradients share
    // their dominant input directions long before the weights do, so the
    // next scheduled batch tells the decomposition which subspace the bank
    // is learning.
    let (mut sd_params, decompose_dropped) = {
        let batch = gen_batch(task, warm_steps)?;
        let (y, cache) = layer_forward(&warm_params, &batch.x)?;
        let (_, dy) = mse_loss(&y, &batch.targets)?;
        let (grads, _) = layer_backward(&warm_params, &cache, &dy)?;
        warm_params.decompose_along(sd_cfg.k, cfg.refresh_interval, &grads)?
    };
    let mut baseline_params = warm_params;

    let baseline_run = train(&mut baseline_params, task, &arm_cfg)?;
    let sd_run = train(&mut sd_params, task, &arm_cfg)?;

    let baseline = CompareArm {
        specialization: specialization_report(&baseline_params, analysis)?,
        run: baseline_run,
        params: baseline_params,
    };
    let sd = CompareArm {
        specialization: specialization_report(&sd_params, analysis)?,
        run: sd_run,
        params: sd_params,
    };
    Ok(CompareReport {
        warm_steps,
        arm_steps,
        warm_run,
        decompose_dropped,
        baseline,
        sd,
    })
}
