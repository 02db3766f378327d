//! Binary model checkpoints.
//!
//! Layout: 4-byte magic `SDMK`; format version (unsigned 32-bit
//! little-endian); header byte length (unsigned 64-bit little-endian); the
//! header itself (UTF-8 JSON: layer configuration, decoupled-state counters,
//! and the ordered tensor directory); then every tensor's entries as
//! little-endian 64-bit floats, row-major, concatenated in directory order.
//!
//! The directory order is canonical — derived from the configuration, never
//! from the file — so a loader knows exactly what to expect and a saved file
//! has one valid byte representation per parameter state. Floats survive the
//! JSON header verbatim (serde_json prints round-trip-exact decimals), and
//! the payload is raw bits, so save → load → save reproduces identical
//! bytes.

use crate::decoupled::{DecoupledError, DecoupledLinear};
use crate::linalg::{LinalgError, Matrix};
use crate::moe::{ExpertBank, MoeConfig, MoeError, MoeLayerParams, SwigluExpert, Variant};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDMK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic bytes {found:?} instead of {CHECKPOINT_MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint format version {found}, this build reads {CHECKPOINT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint: needed {needed} bytes, found {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("header is not valid JSON: {0}")]
    HeaderJson(#[from] serde_json::Error),
    #[error("header does not describe a loadable model: {detail}")]
    HeaderMismatch { detail: String },
    #[error("tensor {name}: shape [{}, {}] in header, [{}, {}] expected", got[0], got[1], expected[0], expected[1])]
    TensorShape {
        name: String,
        expected: [usize; 2],
        got: [usize; 2],
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Decoupled(#[from] DecoupledError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigRecord {
    d_model: usize,
    d_ff: usize,
    n_experts: usize,
    top_n: usize,
    variant: String,
    k: usize,
    aux_coef: f64,
    include_shared_expert: bool,
}

/// Refresh counters of the three decoupled weights, in gate/up/down order.
#[derive(Debug, Serialize, Deserialize)]
struct SdStateRecord {
    refresh_interval: [usize; 3],
    steps_since_refresh: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ConfigRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    sd_state: Option<SdStateRecord>,
    tensors: Vec<TensorRecord>,
}

/// The canonical tensor sequence for a parameter state: name, role, data.
fn tensor_plan(params: &MoeLayerParams) -> Result<Vec<(String, &'static str, Matrix)>, CheckpointError> {
    let mut plan = Vec::new();
    plan.push(("w_gate".to_string(), "router", params.w_gate.clone()));
    match &params.bank {
        ExpertBank::Dense(experts) => {
            for (e, ex) in experts.iter().enumerate() {
                plan.push((format!("expert{e}.gate_proj"), "dense", ex.gate_proj.clone()));
                plan.push((format!("expert{e}.up_proj"), "dense", ex.up_proj.clone()));
                plan.push((format!("expert{e}.down_proj"), "dense", ex.down_proj.clone()));
            }
        }
        ExpertBank::Decoupled { gate, up, down } => {
            for (tag, dl) in [("gate", gate), ("up", up), ("down", down)] {
                plan.push((format!("sd.{tag}.common"), "common", dl.common().clone()));
                plan.push((format!("sd.{tag}.basis_u"), "basis", dl.basis_u().matrix().clone()));
                plan.push((format!("sd.{tag}.basis_v"), "basis", dl.basis_v().matrix().clone()));
                let sigma = Matrix::new(1, dl.k(), dl.sigma_k().to_vec())?;
                plan.push((format!("sd.{tag}.sigma"), "spectrum", sigma));
                for e in 0..dl.n_experts() {
                    plan.push((format!("sd.{tag}.unique{e}"), "unique", dl.unique(e)?.clone()));
                }
            }
        }
    }
    if let Some(s) = &params.shared {
        plan.push(("shared.gate_proj".to_string(), "shared", s.gate_proj.clone()));
        plan.push(("shared.up_proj".to_string(), "shared", s.up_proj.clone()));
        plan.push(("shared.down_proj".to_string(), "shared", s.down_proj.clone()));
    }
    Ok(plan)
}

pub fn save_checkpoint(params: &MoeLayerParams, path: &Path) -> Result<(), CheckpointError> {
    params.config.validate()?;
    let plan = tensor_plan(params)?;
    let sd_state = match &params.bank {
        ExpertBank::Dense(_) => None,
        ExpertBank::Decoupled { gate, up, down } => Some(SdStateRecord {
            refresh_interval: [
                gate.refresh_interval(),
                up.refresh_interval(),
                down.refresh_interval(),
            ],
            steps_since_refresh: [
                gate.steps_since_refresh(),
                up.steps_since_refresh(),
                down.steps_since_refresh(),
            ],
        }),
    };
    let header = Header {
        config: ConfigRecord {
            d_model: params.config.d_model,
            d_ff: params.config.d_ff,
            n_experts: params.config.n_experts,
            top_n: params.config.top_n,
            variant: params.config.variant.to_string(),
            k: params.config.k,
            aux_coef: params.config.aux_coef,
            include_shared_expert: params.config.include_shared_expert,
        },
        sd_state,
        tensors: plan
            .iter()
            .map(|(name, role, m)| TensorRecord {
                name: name.clone(),
                shape: [m.rows, m.cols],
                role: (*role).to_string(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let payload_len: usize = plan.iter().map(|(_, _, m)| m.data.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload_len);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, m) in &plan {
        for &v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = at.checked_add(n).ok_or(CheckpointError::Truncated {
        needed: u64::MAX,
        available: bytes.len() as u64,
    })?;
    if end > bytes.len() {
        return Err(CheckpointError::Truncated {
            needed: end as u64,
            available: bytes.len() as u64,
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn load_checkpoint(path: &Path) -> Result<MoeLayerParams, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut at = 0usize;

    let magic = take(&bytes, &mut at, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let header_len =
        u64::from_le_bytes(take(&bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let header_bytes = take(&bytes, &mut at, header_len)?;
    let header: Header = serde_json::from_slice(header_bytes)?;

    let config = MoeConfig {
        d_model: header.config.d_model,
        d_ff: header.config.d_ff,
        n_experts: header.config.n_experts,
        top_n: header.config.top_n,
        variant: Variant::from_str(&header.config.variant).map_err(|_| {
            CheckpointError::HeaderMismatch {
                detail: format!("unknown variant {:?}", header.config.variant),
            }
        })?,
        k: header.config.k,
        aux_coef: header.config.aux_coef,
        include_shared_expert: header.config.include_shared_expert,
    };
    config.validate()?;

    // The directory must match the canonical plan for this configuration.
    let expected = expected_records(&config);
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::HeaderMismatch {
            detail: format!(
                "{} tensors in header, {} expected for this configuration",
                header.tensors.len(),
                expected.len()
            ),
        });
    }
    for (rec, (name, role, shape)) in header.tensors.iter().zip(&expected) {
        if &rec.name != name || rec.role != *role {
            return Err(CheckpointError::HeaderMismatch {
                detail: format!(
                    "tensor {:?} (role {:?}) where {name:?} (role {role:?}) belongs",
                    rec.name, rec.role
                ),
            });
        }
        if rec.shape != *shape {
            return Err(CheckpointError::TensorShape {
                name: name.clone(),
                expected: *shape,
                got: rec.shape,
            });
        }
    }

    let payload_len: usize = expected
        .iter()
        .map(|(_, _, shape)| shape[0] * shape[1] * 8)
        .sum();
    let available = bytes.len() - at;
    if available < payload_len {
        return Err(CheckpointError::Truncated {
            needed: (at + payload_len) as u64,
            available: bytes.len() as u64,
        });
    }
    if available > payload_len {
        return Err(CheckpointError::HeaderMismatch {
            detail: format!(
                "{} payload bytes after the directory accounts for {payload_len}",
                available
            ),
        });
    }

    let mut tensors = Vec::with_capacity(expected.len());
    for (_, _, shape) in &expected {
        let n = shape[0] * shape[1];
        let raw = take(&bytes, &mut at, n * 8)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        tensors.push(Matrix::new(shape[0], shape[1], data)?);
    }
    assemble(config, header.sd_state, tensors)
}

/// Canonical (name, role, shape) sequence implied by a configuration.
fn expected_records(config: &MoeConfig) -> Vec<(String, &'static str, [usize; 2])> {
    let (d, f, e, k) = (config.d_model, config.d_ff, config.n_experts, config.k);
    let mut out = Vec::new();
    out.push(("w_gate".to_string(), "router", [e, d]));
    match config.variant {
        Variant::Baseline => {
            for i in 0..e {
                out.push((format!("expert{i}.gate_proj"), "dense", [f, d]));
                out.push((format!("expert{i}.up_proj"), "dense", [f, d]));
                out.push((format!("expert{i}.down_proj"), "dense", [d, f]));
            }
        }
        Variant::Sd => {
            for (tag, rows, cols) in [("gate", f, d), ("up", f, d), ("down", d, f)] {
                out.push((format!("sd.{tag}.common"), "common", [rows, cols]));
                out.push((format!("sd.{tag}.basis_u"), "basis", [rows, k]));
                out.push((format!("sd.{tag}.basis_v"), "basis", [cols, k]));
                out.push((format!("sd.{tag}.sigma"), "spectrum", [1, k]));
                for i in 0..e {
                    out.push((format!("sd.{tag}.unique{i}"), "unique", [rows, cols]));
                }
            }
        }
    }
    if config.include_shared_expert {
        out.push(("shared.gate_proj".to_string(), "shared", [f, d]));
        out.push(("shared.up_proj".to_string(), "shared", [f, d]));
        out.push(("shared.down_proj".to_string(), "shared", [d, f]));
    }
    out
}

fn assemble(
    config: MoeConfig,
    sd_state: Option<SdStateRecord>,
    tensors: Vec<Matrix>,
) -> Result<MoeLayerParams, CheckpointError> {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("directory length was validated");
    let w_gate = next();
    let bank = match config.variant {
        Variant::Baseline => {
            let mut experts = Vec::with_capacity(config.n_experts);
            for _ in 0..config.n_experts {
                experts.push(SwigluExpert {
                    gate_proj: next(),
                    up_proj: next(),
                    down_proj: next(),
                });
            }
            ExpertBank::Dense(experts)
        }
        Variant::Sd => {
            let state = sd_state.ok_or_else(|| CheckpointError::HeaderMismatch {
                detail: "decoupled checkpoint without refresh-state record".into(),
            })?;
            let mut dls = Vec::with_capacity(3);
            for role in 0..3 {
                let common = next();
                let basis_u = next();
                let basis_v = next();
                let sigma = next().data;
                let uniques: Vec<Matrix> = (0..config.n_experts).map(|_| next()).collect();
                dls.push(DecoupledLinear::from_parts(
                    common,
                    basis_u,
                    basis_v,
                    sigma,
                    uniques,
                    state.refresh_interval[role],
                    state.steps_since_refresh[role],
                )?);
            }
            let mut dls = dls.into_iter();
            ExpertBank::Decoupled {
                gate: dls.next().expect("three roles"),
                up: dls.next().expect("three roles"),
                down: dls.next().expect("three roles"),
            }
        }
    };
    let shared = if config.include_shared_expert {
        Some(SwigluExpert {
            gate_proj: next(),
            up_proj: next(),
            down_proj: next(),
        })
    } else {
        None
    };
    Ok(MoeLayerParams {
        config,
        w_gate,
        bank,
        shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::init_layer;

    fn params_eq(a: &MoeLayerParams, b: &MoeLayerParams) -> bool {
        a.fingerprint() == b.fingerprint() && a.config == b.config
    }

    fn roundtrip(params: &MoeLayerParams) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdmk");
        save_checkpoint(params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(params_eq(params, &loaded), "round-trip changed the model");
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.sdmk");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn roundtrip_all_layouts() {
        let mut cfg = MoeConfig::toy();
        cfg.variant = Variant::Baseline;
        roundtrip(&init_layer(&cfg, 16, 3).unwrap());

        cfg.variant = Variant::Sd;
        roundtrip(&init_layer(&cfg, 16, 4).unwrap());

        cfg.variant = Variant::Baseline;
        cfg.n_experts = 2;
        cfg.top_n = 1;
        cfg.include_shared_expert = true;
        roundtrip(&init_layer(&cfg, 16, 5).unwrap());

        let mut wide = MoeConfig::toy();
        wide.variant = Variant::Sd;
        wide.n_experts = 6;
        wide.k = 7;
        roundtrip(&init_layer(&wide, 9, 6).unwrap());
    }

    #[test]
    fn sd_counters_survive_the_roundtrip() {
        let mut cfg = MoeConfig::toy();
        cfg.variant = Variant::Sd;
        let mut params = init_layer(&cfg, 5, 7).unwrap();
        if let ExpertBank::Decoupled { gate, .. } = &mut params.bank {
            let zero = Matrix::zeros(gate.rows(), gate.cols());
            let states = &mut crate::decoupled::DecoupledStates::new(cfg.n_experts);
            gate.accumulate_updates(
                &[(0, zero)],
                states,
                crate::optim::OptimizerKind::Sgd,
                0.0,
            )
            .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counters.sdmk");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        match (&params.bank, &loaded.bank) {
            (
                ExpertBank::Decoupled { gate: a, .. },
                ExpertBank::Decoupled { gate: b, .. },
            ) => {
                assert_eq!(a.steps_since_refresh(), 1);
                assert_eq!(b.steps_since_refresh(), 1);
                assert_eq!(a.refresh_interval(), b.refresh_interval());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut cfg = MoeConfig::toy();
        cfg.variant = Variant::Sd;
        let params = init_layer(&cfg, 16, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sdmk");
        save_checkpoint(&params, &path).unwrap();
        let good = fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));

        // Unsupported version.
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion { found: 99 })
        ));

        // Truncated payload.
        let bad = good[..good.len() - 8].to_vec();
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));

        // Trailing garbage.
        let mut bad = good.clone();
        bad.extend_from_slice(&[0u8; 8]);
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::HeaderMismatch { .. })
        ));

        // Header shape lies about a tensor.
        let text = String::from_utf8_lossy(&good).into_owned();
        assert!(text.contains("\"shape\":[4,32]"), "gate shape in header");
        let swapped = text.replacen("\"shape\":[4,32]", "\"shape\":[5,32]", 1);
        // Rebuild with the corrected header length.
        let old_len =
            u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
        let body = &swapped.as_bytes()[16..16 + old_len];
        let mut bad = Vec::new();
        bad.extend_from_slice(&good[..8]);
        bad.extend_from_slice(&(body.len() as u64).to_le_bytes());
        bad.extend_from_slice(body);
        bad.extend_from_slice(&good[16 + old_len..]);
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::TensorShape { .. })
        ));

        // Header that is not JSON at all.
        let mut bad = good.clone();
        bad[16] = b'!';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::HeaderJson(_))
        ));
    }

    #[test]
    fn short_files_report_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.sdmk");
        fs::write(&path, b"SD").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
        fs::write(&path, b"SDMK").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
