//! A single mixture-of-experts feed-forward layer in two variants — dense
//! per-expert weights ("baseline") and shared-plus-complement decoupled
//! weights ("sd") — with softmax top-n routing, SwiGLU experts, an exact
//! hand-written backward pass, and a load-balance auxiliary loss.
//!
//! The backward pass differentiates the *entire* forward map, including the
//! renormalization of the selected routing weights and the softmax beneath
//! it. [`grad_check`] verifies every gradient against central finite
//! differences and is wired into the test suite and the CLI.

use crate::decoupled::{init_decoupled, DecoupledError, DecoupledLinear, InitSpec};
use crate::linalg::{gaussian, matmul, matmul_transa, matmul_transb, LinalgError, Matrix};
use crate::util::{rng_for, subseed};
use serde::Serialize;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Decoupled(#[from] DecoupledError),
    #[error("invalid layer configuration: {detail}")]
    BadConfig { detail: String },
    #[error("input has width {got}, layer expects {want}")]
    InputWidth { got: usize, want: usize },
    #[error("expert index {index} out of range for {n_experts} experts")]
    ExpertIndex { index: usize, n_experts: usize },
    #[error("cache does not match current parameters (they changed since forward)")]
    StaleCache,
    #[error("token batch is empty")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Sd,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Sd => "sd",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "sd" => Ok(Variant::Sd),
            other => Err(format!("unknown variant '{other}' (expected baseline or sd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_n: usize,
    pub variant: Variant,
    /// Common-subspace rank (sd variant only).
    pub k: usize,
    pub aux_coef: f64,
    /// Baseline only: an always-on expert added with weight 1.
    pub include_shared_expert: bool,
}

impl MoeConfig {
    /// Desk-scale default: big enough to show the subspace effects, small
    /// enough that every verification run finishes in seconds.
    pub fn toy() -> Self {
        MoeConfig {
            d_model: 32,
            d_ff: 64,
            n_experts: 4,
            top_n: 2,
            variant: Variant::Sd,
            k: 4,
            aux_coef: 0.01,
            include_shared_expert: false,
        }
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        let fail = |detail: String| Err(MoeError::BadConfig { detail });
        if self.d_model == 0 || self.d_ff == 0 {
            return fail(format!("zero width: d_model={}, d_ff={}", self.d_model, self.d_ff));
        }
        if self.n_experts == 0 {
            return fail("no experts".into());
        }
        if self.top_n == 0 || self.top_n > self.n_experts {
            return fail(format!(
                "top_n={} not in 1..={}",
                self.top_n, self.n_experts
            ));
        }
        if !(self.aux_coef >= 0.0 && self.aux_coef.is_finite()) {
            return fail(format!("aux_coef={} must be finite and ≥ 0", self.aux_coef));
        }
        if self.variant == Variant::Sd {
            let p = self.d_model.min(self.d_ff);
            if self.k == 0 || self.k >= p {
                return fail(format!("k={} not in 1..{p} for the sd variant", self.k));
            }
            if self.include_shared_expert {
                return fail("shared expert is a baseline-only option".into());
            }
        }
        Ok(())
    }
}

/// One SwiGLU expert: y = down_proj · (silu(gate_proj·x) ⊙ (up_proj·x)).
#[derive(Debug, Clone)]
pub struct SwigluExpert {
    /// d_ff × d_model
    pub gate_proj: Matrix,
    /// d_ff × d_model
    pub up_proj: Matrix,
    /// d_model × d_ff
    pub down_proj: Matrix,
}

#[derive(Debug, Clone)]
pub enum ExpertBank {
    Dense(Vec<SwigluExpert>),
    Decoupled {
        gate: DecoupledLinear,
        up: DecoupledLinear,
        down: DecoupledLinear,
    },
}

impl ExpertBank {
    pub fn n_experts(&self) -> usize {
        match self {
            ExpertBank::Dense(v) => v.len(),
            ExpertBank::Decoupled { gate, .. } => gate.n_experts(),
        }
    }

    /// Materialize the weight triple of one expert (sd: common + unique).
    pub fn expert_weights(&self, e: usize) -> Result<SwigluExpert, MoeError> {
        match self {
            ExpertBank::Dense(v) => v
                .get(e)
                .cloned()
                .ok_or(MoeError::ExpertIndex {
                    index: e,
                    n_experts: v.len(),
                }),
            ExpertBank::Decoupled { gate, up, down } => Ok(SwigluExpert {
                gate_proj: gate.proxy_weight(e)?,
                up_proj: up.proxy_weight(e)?,
                down_proj: down.proxy_weight(e)?,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoeLayerParams {
    pub config: MoeConfig,
    /// n_experts × d_model; row i scores expert i.
    pub w_gate: Matrix,
    pub bank: ExpertBank,
    pub shared: Option<SwigluExpert>,
}

const TAG_W_GATE: u64 = 1;
const TAG_SHARED: u64 = 90;
const TAG_DENSE: u64 = 100;
const TAG_SD_GATE: u64 = 201;
const TAG_SD_UP: u64 = 202;
const TAG_SD_DOWN: u64 = 203;

fn seeded_expert(seed: u64, tag: u64, d_model: usize, d_ff: usize) -> SwigluExpert {
    let in_scale = 1.0 / (d_model as f64).sqrt();
    let hid_scale = 1.0 / (d_ff as f64).sqrt();
    SwigluExpert {
        gate_proj: gaussian(d_ff, d_model, &mut rng_for(seed, tag), in_scale),
        up_proj: gaussian(d_ff, d_model, &mut rng_for(seed, tag + 1), in_scale),
        down_proj: gaussian(d_model, d_ff, &mut rng_for(seed, tag + 2), hid_scale),
    }
}

/// Seeded construction of a full layer. Bitwise deterministic in `seed`.
pub fn init_layer(
    config: &MoeConfig,
    refresh_interval: usize,
    seed: u64,
) -> Result<MoeLayerParams, MoeError> {
    config.validate()?;
    let gate_scale = 1.0 / (config.d_model as f64).sqrt();
    let w_gate = gaussian(
        config.n_experts,
        config.d_model,
        &mut rng_for(seed, TAG_W_GATE),
        gate_scale,
    );
    let bank = match config.variant {
        Variant::Baseline => {
            let experts = (0..config.n_experts)
                .map(|e| seeded_expert(seed, TAG_DENSE + 3 * e as u64, config.d_model, config.d_ff))
                .collect();
            ExpertBank::Dense(experts)
        }
        Variant::Sd => {
            let mk = |tag: u64, rows: usize, cols: usize| {
                init_decoupled(
                    rows,
                    cols,
                    &InitSpec {
                        seed: subseed(seed, tag),
                        scale: 1.0 / (cols as f64).sqrt(),
                        k: config.k,
                        n_experts: config.n_experts,
                    },
                    refresh_interval,
                )
            };
            ExpertBank::Decoupled {
                gate: mk(TAG_SD_GATE, config.d_ff, config.d_model)?,
                up: mk(TAG_SD_UP, config.d_ff, config.d_model)?,
                down: mk(TAG_SD_DOWN, config.d_model, config.d_ff)?,
            }
        }
    };
    let shared = if config.include_shared_expert {
        Some(seeded_expert(seed, TAG_SHARED, config.d_model, config.d_ff))
    } else {
        None
    };
    Ok(MoeLayerParams {
        config: config.clone(),
        w_gate,
        bank,
        shared,
    })
}

impl MoeLayerParams {
    /// Order-sensitive content hash used to detect parameter mutation
    /// between forward and backward.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.eat(&self.w_gate);
        match &self.bank {
            ExpertBank::Dense(experts) => {
                for e in experts {
                    h.eat(&e.gate_proj);
                    h.eat(&e.up_proj);
                    h.eat(&e.down_proj);
                }
            }
            ExpertBank::Decoupled { gate, up, down } => {
                for dl in [gate, up, down] {
                    h.eat(dl.common());
                    for i in 0..dl.n_experts() {
                        h.eat(dl.unique(i).expect("index in range"));
                    }
                }
            }
        }
        if let Some(s) = &self.shared {
            h.eat(&s.gate_proj);
            h.eat(&s.up_proj);
            h.eat(&s.down_proj);
        }
        h.0
    }

    /// Rebuild a dense bank in decoupled form by extracting, per projection
    /// role, the rank-k component its experts share. The gate is carried
    /// over unchanged; an always-on shared expert has no decoupled
    /// counterpart and is rejected. Returns the new parameters together
    /// with the total residual energy the complement projection discarded.
    pub fn decompose(
        &self,
        k: usize,
        refresh_interval: usize,
    ) -> Result<(MoeLayerParams, f64), MoeError> {
        self.decompose_impl(k, refresh_interval, None)
    }

    /// Like [`MoeLayerParams::decompose`], but each role's common basis is
    /// pooled from the per-expert gradients in `grads` instead of the
    /// weights themselves. Right after initialization the weights are pure
    /// noise while the gradients already share their dominant input
    /// directions, so gradient-guided pooling finds the subspace the bank
    /// is about to learn rather than the one it randomly started with.
    pub fn decompose_along(
        &self,
        k: usize,
        refresh_interval: usize,
        grads: &LayerGrads,
    ) -> Result<(MoeLayerParams, f64), MoeError> {
        self.decompose_impl(k, refresh_interval, Some(grads))
    }

    fn decompose_impl(
        &self,
        k: usize,
        refresh_interval: usize,
        grads: Option<&LayerGrads>,
    ) -> Result<(MoeLayerParams, f64), MoeError> {
        let experts = match &self.bank {
            ExpertBank::Dense(v) => v,
            ExpertBank::Decoupled { .. } => {
                return Err(MoeError::BadConfig {
                    detail: "decompose expects a dense expert bank".into(),
                })
            }
        };
        if self.shared.is_some() || self.config.include_shared_expert {
            return Err(MoeError::BadConfig {
                detail: "an always-on shared expert cannot be decomposed".into(),
            });
        }
        if let Some(g) = grads {
            if g.experts.len() != experts.len() {
                return Err(MoeError::BadConfig {
                    detail: format!(
                        "{} gradient sets for {} experts",
                        g.experts.len(),
                        experts.len()
                    ),
                });
            }
        }
        let mut config = self.config.clone();
        config.variant = Variant::Sd;
        config.k = k;
        config.validate()?;

        let build = |wpick: fn(&SwigluExpert) -> &Matrix,
                     gpick: fn(&ExpertGrads) -> &Matrix|
         -> Result<(DecoupledLinear, f64), MoeError> {
            let weights: Vec<Matrix> = experts.iter().map(|e| wpick(e).clone()).collect();
            Ok(match grads {
                Some(g) => {
                    let dirs: Vec<Matrix> = g.experts.iter().map(|e| gpick(e).clone()).collect();
                    DecoupledLinear::decompose_along(&weights, &dirs, k, refresh_interval)?
                }
                None => DecoupledLinear::decompose(&weights, k, refresh_interval)?,
            })
        };
        let (gate, d_gate) = build(|e| &e.gate_proj, |g| &g.gate_proj)?;
        let (up, d_up) = build(|e| &e.up_proj, |g| &g.up_proj)?;
        let (down, d_down) = build(|e| &e.down_proj, |g| &g.down_proj)?;
        Ok((
            MoeLayerParams {
                config,
                w_gate: self.w_gate.clone(),
                bank: ExpertBank::Decoupled { gate, up, down },
                shared: None,
            },
            d_gate + d_up + d_down,
        ))
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn eat(&mut self, m: &Matrix) {
        for &v in &m.data {
            for b in v.to_bits().to_le_bytes() {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x100000001b3);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

/// Per-token expert selection: full softmax distribution, the top-n expert
/// indices (ascending), and their probabilities renormalized to sum to 1.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// tokens × n_experts softmax probabilities.
    pub probs: Matrix,
    /// Per token: selected expert indices, sorted ascending.
    pub selected: Vec<Vec<usize>>,
    /// Per token: renormalized weights matching `selected`.
    pub weights: Vec<Vec<f64>>,
}

impl RoutingDecision {
    pub fn n_tokens(&self) -> usize {
        self.probs.rows
    }

    pub fn n_experts(&self) -> usize {
        self.probs.cols
    }

    pub fn top_n(&self) -> usize {
        self.selected.first().map_or(0, |s| s.len())
    }
}

/// Score tokens against the gate and select experts. Logits are
/// `x · w_gateᵀ`; the softmax is max-subtracted for stability.
pub fn route(w_gate: &Matrix, x: &Matrix, top_n: usize) -> Result<RoutingDecision, MoeError> {
    let logits = matmul_transb(x, w_gate)?;
    route_from_logits(&logits, top_n)
}

/// Selection from precomputed logits (tokens × n_experts). Top-n by logit,
/// ties broken toward the lowest expert index; selected probabilities are
/// renormalized to sum to exactly the quotient of their softmax masses.
pub fn route_from_logits(logits: &Matrix, top_n: usize) -> Result<RoutingDecision, MoeError> {
    let (tokens, n_experts) = (logits.rows, logits.cols);
    if top_n == 0 || top_n > n_experts {
        return Err(MoeError::BadConfig {
            detail: format!("top_n={top_n} not in 1..={n_experts}"),
        });
    }
    let mut probs = Matrix::zeros(tokens, n_experts);
    let mut selected = Vec::with_capacity(tokens);
    let mut weights = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let row = logits.row(t);
        let hi = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (e, &l) in row.iter().enumerate() {
            let p = (l - hi).exp();
            probs.data[t * n_experts + e] = p;
            z += p;
        }
        for e in 0..n_experts {
            probs.data[t * n_experts + e] /= z;
        }

        let mut order: Vec<usize> = (0..n_experts).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("finite logits")
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..top_n].to_vec();
        chosen.sort_unstable();

        let mass: f64 = chosen.iter().map(|&e| probs.get(t, e)).sum();
        let w: Vec<f64> = chosen.iter().map(|&e| probs.get(t, e) / mass).collect();
        selected.push(chosen);
        weights.push(w);
    }
    Ok(RoutingDecision {
        probs,
        selected,
        weights,
    })
}

// ---------------------------------------------------------------------------
// SwiGLU
// ---------------------------------------------------------------------------

/// Activation applied to the gate branch. `Identity` exists so gradient
/// checks can exercise the exactly-linear regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Act {
    Silu,
    #[cfg_attr(not(test), allow(dead_code))]
    Identity,
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Act {
    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            Act::Silu => z * logistic(z),
            Act::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Act::Silu => {
                let l = logistic(z);
                l * (1.0 + z * (1.0 - l))
            }
            Act::Identity => 1.0,
        }
    }
}

/// Cached intermediates of a SwiGLU application over a token block.
#[derive(Debug, Clone)]
pub struct SwigluTrace {
    /// Gate-branch pre-activations, tokens × d_ff.
    pub g: Matrix,
    /// Up-branch values, tokens × d_ff.
    pub u: Matrix,
    /// Gated hidden state act(g) ⊙ u, tokens × d_ff.
    pub h: Matrix,
}

fn swiglu_with_act(
    w: &SwigluExpert,
    x: &Matrix,
    act: Act,
) -> Result<(Matrix, SwigluTrace), MoeError> {
    let g = matmul_transb(x, &w.gate_proj)?;
    let u = matmul_transb(x, &w.up_proj)?;
    let mut h = Matrix::zeros(g.rows, g.cols);
    for i in 0..h.data.len() {
        h.data[i] = act.value(g.data[i]) * u.data[i];
    }
    let y = matmul_transb(&h, &w.down_proj)?;
    Ok((y, SwigluTrace { g, u, h }))
}

/// y = down·(silu(gate·xᵗ) ⊙ (up·xᵗ)) for a batch of row tokens, returning
/// the intermediates needed by the backward pass.
pub fn swiglu_forward(w: &SwigluExpert, x: &Matrix) -> Result<(Matrix, SwigluTrace), MoeError> {
    swiglu_with_act(w, x, Act::Silu)
}

// ---------------------------------------------------------------------------
// Layer forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ExpertBlockCache {
    /// Token rows routed to this expert, ascending.
    tokens: Vec<usize>,
    /// Routing weight per routed token, aligned with `tokens`.
    weights: Vec<f64>,
    /// Gathered inputs and SwiGLU trace for the block (absent when the
    /// expert received no tokens).
    block: Option<(Matrix, SwigluTrace, Matrix)>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    act: Act,
    x: Matrix,
    pub routing: RoutingDecision,
    per_expert: Vec<ExpertBlockCache>,
    shared: Option<SwigluTrace>,
}

impl ForwardCache {
    /// Tokens routed to each expert this batch.
    pub fn expert_token_counts(&self) -> Vec<usize> {
        self.per_expert.iter().map(|c| c.tokens.len()).collect()
    }
}

fn gather_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), x.cols, |r, c| x.get(idx[r], c))
}

pub(crate) fn layer_forward_with_act(
    params: &MoeLayerParams,
    x: &Matrix,
    act: Act,
) -> Result<(Matrix, ForwardCache), MoeError> {
    params.config.validate()?;
    if x.cols != params.config.d_model {
        return Err(MoeError::InputWidth {
            got: x.cols,
            want: params.config.d_model,
        });
    }
    let routing = route(&params.w_gate, x, params.config.top_n)?;
    let mut y = Matrix::zeros(x.rows, params.config.d_model);

    let n_experts = params.config.n_experts;
    let mut per_expert = Vec::with_capacity(n_experts);
    for e in 0..n_experts {
        let mut tokens = Vec::new();
        let mut wts = Vec::new();
        for t in 0..x.rows {
            if let Some(pos) = routing.selected[t].iter().position(|&s| s == e) {
                tokens.push(t);
                wts.push(routing.weights[t][pos]);
            }
        }
        let block = if tokens.is_empty() {
            None
        } else {
            let xe = gather_rows(x, &tokens);
            let w = params.bank.expert_weights(e)?;
            let (ye, trace) = swiglu_with_act(&w, &xe, act)?;
            for (row, (&t, &wt)) in tokens.iter().zip(&wts).enumerate() {
                for c in 0..y.cols {
                    y.data[t * y.cols + c] += wt * ye.get(row, c);
                }
            }
            Some((xe, trace, ye))
        };
        per_expert.push(ExpertBlockCache {
            tokens,
            weights: wts,
            block,
        });
    }

    let shared = match &params.shared {
        Some(sw) => {
            let (ys, trace) = swiglu_with_act(sw, x, act)?;
            for i in 0..y.data.len() {
                y.data[i] += ys.data[i];
            }
            Some(trace)
        }
        None => None,
    };

    let cache = ForwardCache {
        fingerprint: params.fingerprint(),
        act,
        x: x.clone(),
        routing,
        per_expert,
        shared,
    };
    Ok((y, cache))
}

/// Route the batch, run every active expert on its token block, and blend
/// with the renormalized routing weights (plus the always-on shared expert
/// when configured).
pub fn layer_forward(
    params: &MoeLayerParams,
    x: &Matrix,
) -> Result<(Matrix, ForwardCache), MoeError> {
    layer_forward_with_act(params, x, Act::Silu)
}

/// Gradients of one layer, matching the parameter layout.
#[derive(Debug, Clone)]
pub struct ExpertGrads {
    pub gate_proj: Matrix,
    pub up_proj: Matrix,
    pub down_proj: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w_gate: Matrix,
    /// Per expert. For the sd variant these are gradients of the *proxy*
    /// weight, to be split into common/unique parts by the caller. Inactive
    /// experts hold zeros.
    pub experts: Vec<ExpertGrads>,
    pub shared: Option<ExpertGrads>,
}

/// Backward through a SwiGLU block. Returns (dW_gate, dW_up, dW_down, dX).
fn swiglu_backward(
    w: &SwigluExpert,
    x: &Matrix,
    trace: &SwigluTrace,
    dy: &Matrix,
    act: Act,
) -> Result<(Matrix, Matrix, Matrix, Matrix), MoeError> {
    // y = h·W_Dᵀ  ⇒  dh = dy·W_D, dW_D = dyᵀ·h
    let dh = matmul(dy, &w.down_proj)?;
    let d_down = matmul_transa(dy, &trace.h)?;
    // h = act(g) ⊙ u
    let mut dg = Matrix::zeros(dh.rows, dh.cols);
    let mut du = Matrix::zeros(dh.rows, dh.cols);
    for i in 0..dh.data.len() {
        let a = act.value(trace.g.data[i]);
        let da = act.derivative(trace.g.data[i]);
        du.data[i] = dh.data[i] * a;
        dg.data[i] = dh.data[i] * trace.u.data[i] * da;
    }
    // g = x·W_Gᵀ, u = x·W_Uᵀ
    let d_gate = matmul_transa(&dg, x)?;
    let d_up = matmul_transa(&du, x)?;
    let mut dx = matmul(&dg, &w.gate_proj)?;
    dx.add_scaled(&matmul(&du, &w.up_proj)?, 1.0)?;
    Ok((d_gate, d_up, d_down, dx))
}

/// Exact gradients of the forward map for every parameter and the input.
///
/// Fails with [`MoeError::StaleCache`] if the parameters changed since the
/// cache was produced.
pub fn layer_backward(
    params: &MoeLayerParams,
    cache: &ForwardCache,
    dy: &Matrix,
) -> Result<(LayerGrads, Matrix), MoeError> {
    if cache.fingerprint != params.fingerprint() {
        return Err(MoeError::StaleCache);
    }
    let x = &cache.x;
    if dy.rows != x.rows || dy.cols != params.config.d_model {
        return Err(LinalgError::ShapeMismatch {
            context: "layer_backward",
            lhs_rows: x.rows,
            lhs_cols: params.config.d_model,
            rhs_rows: dy.rows,
            rhs_cols: dy.cols,
        }
        .into());
    }
    let tokens = x.rows;
    let n_experts = params.config.n_experts;
    let routing = &cache.routing;

    // Per-token gradient on the *renormalized* routing weights:
    // dw_{t,e} = ⟨dy_t, raw expert output⟩.
    let mut dweight: Vec<Vec<f64>> = routing
        .selected
        .iter()
        .map(|sel| vec![0.0; sel.len()])
        .collect();

    let mut expert_grads = Vec::with_capacity(n_experts);
    let mut dx_expert = Matrix::zeros(tokens, x.cols);
    for e in 0..n_experts {
        let ec = &cache.per_expert[e];
        let Some((xe, trace, ye)) = &ec.block else {
            expert_grads.push(ExpertGrads {
                gate_proj: Matrix::zeros(params.config.d_ff, params.config.d_model),
                up_proj: Matrix::zeros(params.config.d_ff, params.config.d_model),
                down_proj: Matrix::zeros(params.config.d_model, params.config.d_ff),
            });
            continue;
        };
        // Expert-path upstream: weight_{t,e} · dy_t; gate-path side output:
        // dw_{t,e} = ⟨dy_t, ye_row⟩.
        let mut dye = Matrix::zeros(xe.rows, params.config.d_model);
        for (row, (&t, &wt)) in ec.tokens.iter().zip(&ec.weights).enumerate() {
            let mut dot = 0.0;
            for c in 0..dy.cols {
                let d = dy.get(t, c);
                dye.data[row * dye.cols + c] = wt * d;
                dot += d * ye.get(row, c);
            }
            let pos = routing.selected[t]
                .iter()
                .position(|&s| s == e)
                .expect("cached token is routed to this expert");
            dweight[t][pos] = dot;
        }
        let w = params.bank.expert_weights(e)?;
        let (d_gate, d_up, d_down, dxe) = swiglu_backward(&w, xe, trace, &dye, cache.act)?;
        for (row, &t) in ec.tokens.iter().enumerate() {
            for c in 0..x.cols {
                dx_expert.data[t * x.cols + c] += dxe.get(row, c);
            }
        }
        expert_grads.push(ExpertGrads {
            gate_proj: d_gate,
            up_proj: d_up,
            down_proj: d_down,
        });
    }

    // Routing backward: renormalization, then softmax.
    let mut dlogits = Matrix::zeros(tokens, n_experts);
    for t in 0..tokens {
        let sel = &routing.selected[t];
        let wts = &routing.weights[t];
        let mass: f64 = sel.iter().map(|&e| routing.probs.get(t, e)).sum();
        // w_j = s_j / Z over the selected set:
        // ds_j = (dw_j − Σ_i dw_i·w_i) / Z.
        let inner: f64 = dweight[t].iter().zip(wts).map(|(dw, w)| dw * w).sum();
        let mut ds = vec![0.0; n_experts];
        for (pos, &e) in sel.iter().enumerate() {
            ds[e] = (dweight[t][pos] - inner) / mass;
        }
        // Softmax backward over all experts.
        let srow = routing.probs.row(t);
        let dot: f64 = ds.iter().zip(srow).map(|(d, s)| d * s).sum();
        for e in 0..n_experts {
            dlogits.data[t * n_experts + e] = srow[e] * (ds[e] - dot);
        }
    }
    let d_w_gate = matmul_transa(&dlogits, x)?;
    let mut dx = matmul(&dlogits, &params.w_gate)?;
    dx.add_scaled(&dx_expert, 1.0)?;

    let shared_grads = match (&params.shared, &cache.shared) {
        (Some(sw), Some(trace)) => {
            let (d_gate, d_up, d_down, dxs) = swiglu_backward(sw, x, trace, dy, cache.act)?;
            dx.add_scaled(&dxs, 1.0)?;
            Some(ExpertGrads {
                gate_proj: d_gate,
                up_proj: d_up,
                down_proj: d_down,
            })
        }
        _ => None,
    };

    Ok((
        LayerGrads {
            w_gate: d_w_gate,
            experts: expert_grads,
            shared: shared_grads,
        },
        dx,
    ))
}

// ---------------------------------------------------------------------------
// Load-balance auxiliary loss
// ---------------------------------------------------------------------------

/// Switch-style balance loss: `E · Σ_i f_i · P_i` with `f_i` the fraction of
/// routed slots taken by expert i (counts / (tokens · top_n)) and `P_i` its
/// mean softmax probability. Equals 1 for perfectly uniform routing.
pub fn load_balance_loss(routing: &RoutingDecision) -> f64 {
    let tokens = routing.n_tokens();
    let n_experts = routing.n_experts();
    let top_n = routing.top_n().max(1);
    let mut f = vec![0.0; n_experts];
    for sel in &routing.selected {
        for &e in sel {
            f[e] += 1.0;
        }
    }
    let slots = (tokens * top_n) as f64;
    for v in f.iter_mut() {
        *v /= slots;
    }
    let mut loss = 0.0;
    for e in 0..n_experts {
        let mut p = 0.0;
        for t in 0..tokens {
            p += routing.probs.get(t, e);
        }
        p /= tokens as f64;
        loss += f[e] * p;
    }
    n_experts as f64 * loss
}

/// Gradient of [`load_balance_loss`] with respect to the gate matrix, with
/// the count fractions treated as constants (they are piecewise constant in
/// the parameters anyway). Returns an n_experts × d_model matrix.
pub fn aux_gate_gradient(routing: &RoutingDecision, x: &Matrix) -> Result<Matrix, MoeError> {
    let tokens = routing.n_tokens();
    let n_experts = routing.n_experts();
    if x.rows != tokens {
        return Err(MoeError::BadConfig {
            detail: format!("{} tokens in routing, {} rows of input", tokens, x.rows),
        });
    }
    let top_n = routing.top_n().max(1);
    let mut f = vec![0.0; n_experts];
    for sel in &routing.selected {
        for &e in sel {
            f[e] += 1.0;
        }
    }
    let slots = (tokens * top_n) as f64;
    for v in f.iter_mut() {
        *v /= slots;
    }
    // L = E·Σ_i f_i·mean_t(s_{t,i})  ⇒  ∂L/∂s_{t,i} = E·f_i/T.
    let scale = n_experts as f64 / tokens as f64;
    let mut dlogits = Matrix::zeros(tokens, n_experts);
    for t in 0..tokens {
        let srow = routing.probs.row(t);
        let dot: f64 = f.iter().zip(srow).map(|(fi, s)| scale * fi * s).sum();
        for e in 0..n_experts {
            dlogits.data[t * n_experts + e] = srow[e] * (scale * f[e] - dot);
        }
    }
    Ok(matmul_transa(&dlogits, x)?)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// Result of comparing the analytic backward pass against central finite
/// differences on the total loss (task + aux).
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub entries_checked: usize,
    pub entries_total: usize,
    pub step_size: f64,
}

/// Parameter blocks enumerated for the finite-difference sweep, each a name
/// plus mutable access resolved per visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockId {
    WGate,
    DenseExpert(usize, usize), // (expert, 0=gate/1=up/2=down)
    SdCommon(usize),           // 0=gate/1=up/2=down
    SdUnique(usize, usize),    // (role, expert)
    Shared(usize),
}

fn block_name(id: BlockId) -> String {
    let role = |r: usize| ["gate_proj", "up_proj", "down_proj"][r];
    match id {
        BlockId::WGate => "w_gate".into(),
        BlockId::DenseExpert(e, r) => format!("expert{e}.{}", role(r)),
        BlockId::SdCommon(r) => format!("common.{}", role(r)),
        BlockId::SdUnique(r, e) => format!("unique{e}.{}", role(r)),
        BlockId::Shared(r) => format!("shared.{}", role(r)),
    }
}

fn block_mut<'p>(params: &'p mut MoeLayerParams, id: BlockId) -> &'p mut Matrix {
    match (id, &mut params.bank) {
        (BlockId::WGate, _) => &mut params.w_gate,
        (BlockId::DenseExpert(e, r), ExpertBank::Dense(experts)) => {
            let ex = &mut experts[e];
            match r {
                0 => &mut ex.gate_proj,
                1 => &mut ex.up_proj,
                _ => &mut ex.down_proj,
            }
        }
        (BlockId::SdCommon(r), ExpertBank::Decoupled { gate, up, down }) => match r {
            0 => gate.common_mut(),
            1 => up.common_mut(),
            _ => down.common_mut(),
        },
        (BlockId::SdUnique(r, e), ExpertBank::Decoupled { gate, up, down }) => {
            let dl = match r {
                0 => gate,
                1 => up,
                _ => down,
            };
            dl.unique_mut(e).expect("enumerated index in range")
        }
        (BlockId::Shared(r), _) => {
            let ex = params.shared.as_mut().expect("enumerated only when present");
            match r {
                0 => &mut ex.gate_proj,
                1 => &mut ex.up_proj,
                _ => &mut ex.down_proj,
            }
        }
        _ => unreachable!("block id matches bank layout"),
    }
}

/// Analytic gradient for every block, from one backward pass on the total
/// loss. For the sd variant, common blocks receive the sum of proxy
/// gradients over all experts and each unique receives its own proxy
/// gradient reassembled from the split parts (so the split path is what is
/// being verified).
fn analytic_block_grads(
    params: &MoeLayerParams,
    x: &Matrix,
    targets: &Matrix,
    act: Act,
) -> Result<Vec<(BlockId, Matrix)>, MoeError> {
    let (y, cache) = layer_forward_with_act(params, x, act)?;
    let dy = y.minus(targets)?.scaled(1.0 / x.rows as f64);
    let (grads, _) = layer_backward(params, &cache, &dy)?;
    let mut w_gate_grad = grads.w_gate;
    if params.config.aux_coef != 0.0 {
        let aux = aux_gate_gradient(&cache.routing, x)?;
        w_gate_grad.add_scaled(&aux, params.config.aux_coef)?;
    }

    let mut out = vec![(BlockId::WGate, w_gate_grad)];
    match &params.bank {
        ExpertBank::Dense(_) => {
            for (e, g) in grads.experts.iter().enumerate() {
                out.push((BlockId::DenseExpert(e, 0), g.gate_proj.clone()));
                out.push((BlockId::DenseExpert(e, 1), g.up_proj.clone()));
                out.push((BlockId::DenseExpert(e, 2), g.down_proj.clone()));
            }
        }
        ExpertBank::Decoupled { gate, up, down } => {
            for (r, dl) in [gate, up, down].into_iter().enumerate() {
                let mut common_sum = Matrix::zeros(dl.rows(), dl.cols());
                for (e, g) in grads.experts.iter().enumerate() {
                    let proxy_grad = match r {
                        0 => &g.gate_proj,
                        1 => &g.up_proj,
                        _ => &g.down_proj,
                    };
                    common_sum.add_scaled(proxy_grad, 1.0)?;
                    let (g_c, g_u) = dl.split_gradient(proxy_grad)?;
                    let recombined = g_c.plus(&g_u)?;
                    out.push((BlockId::SdUnique(r, e), recombined));
                }
                out.push((BlockId::SdCommon(r), common_sum));
            }
        }
    }
    if let Some(g) = grads.shared {
        out.push((BlockId::Shared(0), g.gate_proj));
        out.push((BlockId::Shared(1), g.up_proj));
        out.push((BlockId::Shared(2), g.down_proj));
    }
    Ok(out)
}

fn total_loss(
    params: &MoeLayerParams,
    x: &Matrix,
    targets: &Matrix,
    act: Act,
) -> Result<f64, MoeError> {
    let (y, cache) = layer_forward_with_act(params, x, act)?;
    let diff = y.minus(targets)?;
    let task = 0.5 * diff.frobenius_norm_sq() / x.rows as f64;
    let aux = if params.config.aux_coef != 0.0 {
        params.config.aux_coef * load_balance_loss(&cache.routing)
    } else {
        0.0
    };
    Ok(task + aux)
}

/// Exhaustive sweeps stay below this entry count; larger layers check a
/// seeded random subset instead.
const GRADCHECK_EXHAUSTIVE_LIMIT: usize = 4096;
const GRADCHECK_SUBSET: usize = 512;

pub(crate) fn grad_check_with_act(
    params: &mut MoeLayerParams,
    n_tokens: usize,
    h: f64,
    seed: u64,
    act: Act,
) -> Result<GradCheckReport, MoeError> {
    params.config.validate()?;
    if n_tokens == 0 {
        return Err(MoeError::EmptyBatch);
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(MoeError::BadConfig {
            detail: format!("step size {h} must be positive"),
        });
    }
    let d = params.config.d_model;
    let x = gaussian(n_tokens, d, &mut rng_for(seed, 11), 1.0);
    let targets = gaussian(n_tokens, d, &mut rng_for(seed, 12), 1.0);

    let analytic = analytic_block_grads(params, &x, &targets, act)?;
    let global_max = analytic
        .iter()
        .map(|(_, g)| g.max_abs())
        .fold(0.0f64, f64::max);
    // Floor keeps finite-difference truncation noise (~h²) from dominating
    // the ratio on near-zero entries; discrepancies above tol·floor still
    // register, and that is orders of magnitude above the noise.
    let floor = 1e-3 * global_max.max(1.0);

    let entries_total: usize = analytic.iter().map(|(_, g)| g.data.len()).sum();
    let exhaustive = entries_total <= GRADCHECK_EXHAUSTIVE_LIMIT;
    let mut picks: Vec<(usize, usize)> = Vec::new(); // (block slot, entry)
    if exhaustive {
        for (slot, (_, g)) in analytic.iter().enumerate() {
            for i in 0..g.data.len() {
                picks.push((slot, i));
            }
        }
    } else {
        let mut rng = rng_for(seed, 13);
        let mut cum: Vec<usize> = Vec::with_capacity(analytic.len());
        let mut acc = 0;
        for (_, g) in &analytic {
            acc += g.data.len();
            cum.push(acc);
        }
        use rand::Rng;
        let mut seen = std::collections::HashSet::new();
        while picks.len() < GRADCHECK_SUBSET.min(entries_total) {
            let flat = rng.random_range(0..entries_total);
            if !seen.insert(flat) {
                continue;
            }
            let slot = cum.partition_point(|&c| c <= flat);
            let base = if slot == 0 { 0 } else { cum[slot - 1] };
            picks.push((slot, flat - base));
        }
        picks.sort_unstable();
    }

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    for (slot, i) in picks {
        let (id, ref agrad) = analytic[slot];
        let a = agrad.data[i];
        let original = {
            let m = block_mut(params, id);
            let orig = m.data[i];
            m.data[i] = orig + h;
            orig
        };
        let plus = total_loss(params, &x, &targets, act)?;
        block_mut(params, id).data[i] = original - h;
        let minus = total_loss(params, &x, &targets, act)?;
        block_mut(params, id).data[i] = original;
        let fd = (plus - minus) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            let (r, c) = (i / agrad.cols, i % agrad.cols);
            worst = format!("{}[{r},{c}]", block_name(id));
        }
    }

    Ok(GradCheckReport {
        variant: params.config.variant.to_string(),
        max_rel_error: max_rel,
        worst_parameter: worst,
        entries_checked: if exhaustive {
            entries_total
        } else {
            GRADCHECK_SUBSET.min(entries_total)
        },
        entries_total,
        step_size: h,
    })
}

/// Verify the analytic backward pass against central finite differences of
/// the total loss on a seeded batch. Checks every parameter entry when the
/// layer is small enough, otherwise a seeded 512-entry subset.
pub fn grad_check(
    params: &mut MoeLayerParams,
    n_tokens: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, MoeError> {
    grad_check_with_act(params, n_tokens, h, seed, Act::Silu)
}
