//! `CSCK` checkpoint files.
//!
//! ```text
//! "CSCK" | version u32 | d u32 | r u32 | tau f64 | flags u32
//! | W (d·d f64) | b (d f64) | M (r·d·d f64) | m0 (r·d f64) | JSON metadata to EOF
//! ```
//!
//! Flag bits: 0 mapper bias present, 1 column-major reshape (unsupported,
//! always written as 0), 2 context-insensitive model, 3..=4 context input
//! (0 normalized, 1 raw, 2 transformed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContextInput, ModelKind, ModelOptions, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 4;

const FLAG_MAPPER_BIAS: u32 = 1 << 0;
const FLAG_COLUMN_MAJOR: u32 = 1 << 1;
const FLAG_CONTEXT_INSENSITIVE: u32 = 1 << 2;
const CONTEXT_INPUT_SHIFT: u32 = 3;
const CONTEXT_INPUT_MASK: u32 = 0b11 << CONTEXT_INPUT_SHIFT;
const KNOWN_FLAGS: u32 =
    FLAG_MAPPER_BIAS | FLAG_COLUMN_MAJOR | FLAG_CONTEXT_INSENSITIVE | CONTEXT_INPUT_MASK;

/// Training provenance stored after the parameter block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub data_hash: Option<String>,
}

fn flags_for(params: &ModelParams) -> u32 {
    let mut flags = 0;
    if params.options.mapper_bias {
        flags |= FLAG_MAPPER_BIAS;
    }
    if params.kind == ModelKind::ContextInsensitive {
        flags |= FLAG_CONTEXT_INSENSITIVE;
    }
    let input = match params.options.context_input {
        ContextInput::Normalized => 0,
        ContextInput::Raw => 1,
        ContextInput::Transformed => 2,
    };
    flags | (input << CONTEXT_INPUT_SHIFT)
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    params.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.n_params() + 256);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(params.rank as u32).to_le_bytes());
    buf.extend_from_slice(&params.tau.to_le_bytes());
    buf.extend_from_slice(&flags_for(params).to_le_bytes());
    for block in [&params.w, &params.b, &params.m, &params.m0] {
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    serde_json::to_writer(&mut buf, meta).expect("metadata serializes");
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption("checkpoint shorter than its header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, expected CSCK".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = word(8) as usize;
    let rank = word(12) as usize;
    let tau = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let flags = word(24);
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    if flags & FLAG_COLUMN_MAJOR != 0 {
        return Err(Error::Format("column-major mapper reshape is not supported".into()));
    }
    let context_input = match (flags & CONTEXT_INPUT_MASK) >> CONTEXT_INPUT_SHIFT {
        0 => ContextInput::Normalized,
        1 => ContextInput::Raw,
        2 => ContextInput::Transformed,
        other => return Err(Error::Format(format!("unknown context input mode {other}"))),
    };
    let kind = if flags & FLAG_CONTEXT_INSENSITIVE != 0 {
        ModelKind::ContextInsensitive
    } else {
        ModelKind::ContextSensitive
    };
    let sizes = [dim * dim, dim, rank * dim * dim, rank * dim];
    let n_floats: usize = sizes.iter().sum();
    let body_end = HEADER_LEN + 8 * n_floats;
    if bytes.len() < body_end {
        return Err(Error::Corruption(format!(
            "checkpoint declares {n_floats} parameters but has {} bytes",
            bytes.len()
        )));
    }
    let mut floats = bytes[HEADER_LEN..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f64>>();
    let params = ModelParams {
        dim,
        rank,
        tau,
        w: take(sizes[0]),
        b: take(sizes[1]),
        m: take(sizes[2]),
        m0: take(sizes[3]),
        kind,
        options: ModelOptions {
            context_input,
            mapper_bias: flags & FLAG_MAPPER_BIAS != 0,
        },
    };
    params.validate()?;
    let trailer = &bytes[body_end..];
    let meta = if trailer.is_empty() {
        CheckpointMeta::default()
    } else {
        serde_json::from_slice(trailer)
            .map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?
    };
    Ok((params, meta))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params_with, ModelParams};

    #[test]
    fn roundtrip_preserves_params_and_meta() {
        let mut p = init_params_with(5, 2, 7.5, 3, 0.1, ModelOptions::default()).unwrap();
        p.b[1] = -0.25;
        let meta = CheckpointMeta {
            seed: Some(3),
            lambda1: Some(1e-4),
            lambda2: Some(1e-5),
            epochs: Some(50),
            data_hash: Some("abc".into()),
            ..Default::default()
        };
        let (q, m) = decode_checkpoint(&encode_checkpoint(&p, &meta).unwrap()).unwrap();
        assert_eq!(q, p);
        assert_eq!(m, meta);

        let ci = ModelParams::context_insensitive(4, 1.0).unwrap();
        let (q, _) = decode_checkpoint(&encode_checkpoint(&ci, &meta).unwrap()).unwrap();
        assert_eq!(q, ci);

        let mut raw = p.clone();
        raw.options = ModelOptions {
            context_input: ContextInput::Transformed,
            mapper_bias: false,
        };
        raw.m0.iter_mut().for_each(|v| *v = 0.0);
        let (q, _) = decode_checkpoint(&encode_checkpoint(&raw, &meta).unwrap()).unwrap();
        assert_eq!(q, raw);
    }

    #[test]
    fn header_fields_are_where_documented() {
        let p = init_params_with(3, 1, 5.0, 0, 0.0, ModelOptions::default()).unwrap();
        let bytes = encode_checkpoint(&p, &CheckpointMeta::default()).unwrap();
        assert_eq!(&bytes[..4], b"CSCK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 5.0);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), FLAG_MAPPER_BIAS);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = init_params_with(3, 1, 1.0, 0, 0.1, ModelOptions::default()).unwrap();
        let good = encode_checkpoint(&p, &CheckpointMeta::default()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[24] |= FLAG_COLUMN_MAJOR as u8;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_checkpoint(&good[..HEADER_LEN + 10]),
            Err(Error::Corruption(_))
        ));
    }
}
