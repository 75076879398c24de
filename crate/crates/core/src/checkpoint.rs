//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes   "MQACKPT\0"
//! version        u32       1
//! variant        u8        0 complete, 1 avg-question, 2 same-lstms, 3 notws, 4 blind
//! state_source   u8        0 hidden, 1 cell
//! n              u64       vocabulary size
//! d_embed        u64
//! d_hidden       u64
//! d_fuse         u64
//! d_img          u64
//! seed           u64
//! init_scale     f64
//! tensor_count   u64
//! tensors        f64 LE, concatenated in `Params::tensors()` order
//! ```
//!
//! Shapes are implied by the header. Loading and re-saving reproduces the
//! input byte for byte.

use std::fs;
use std::path::Path;

use crate::data::ByteReader;
use crate::error::{MqaError, Result};
use crate::model::{MqaConfig, MqaModel, Variant};
use crate::nn::{Params, StateSource};

pub const MAGIC: &[u8; 8] = b"MQACKPT\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &MqaModel) -> Vec<u8> {
    let c = &model.config;
    let tensors = model.params.tensors();
    let n_scalars: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(80 + 8 * n_scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(c.variant.tag());
    out.push(match c.state_source {
        StateSource::Hidden => 0,
        StateSource::Cell => 1,
    });
    for d in [c.n, c.d_embed, c.d_hidden, c.d_fuse, c.d_img] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&c.init_scale.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        for x in t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<MqaModel> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(MqaError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MqaError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let tag = r.u8()?;
    let variant = Variant::from_tag(tag)
        .ok_or_else(|| MqaError::Checkpoint(format!("unknown variant tag {tag}")))?;
    let state_source = match r.u8()? {
        0 => StateSource::Hidden,
        1 => StateSource::Cell,
        other => {
            return Err(MqaError::Checkpoint(format!(
                "unknown state source {other}"
            )))
        }
    };
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = usize::try_from(r.u64()?)
            .map_err(|_| MqaError::Checkpoint("dimension overflow".into()))?;
    }
    let [n, d_embed, d_hidden, d_fuse, d_img] = dims;
    let config = MqaConfig {
        n,
        d_embed,
        d_hidden,
        d_fuse,
        d_img,
        variant,
        state_source,
        seed: r.u64()?,
        init_scale: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| MqaError::Checkpoint(e.to_string()))?;
    let expected_scalars = parameter_count_for(&config)?;
    let payload = bytes.len().saturating_sub(r.pos + 8);
    if payload != expected_scalars * 8 {
        return Err(MqaError::Checkpoint(format!(
            "payload of {payload} bytes does not match {expected_scalars} parameters"
        )));
    }
    let mut params = Params::zeros(&config);
    let count = r.u64()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(MqaError::Checkpoint(format!(
            "expected {} tensors, header says {count}",
            tensors.len()
        )));
    }
    for t in tensors.iter_mut() {
        for x in t.data.iter_mut() {
            *x = r.f64()?;
        }
    }
    Ok(MqaModel { config, params })
}

fn parameter_count_for(config: &MqaConfig) -> Result<usize> {
    let (n, de, dh, df, di) = (
        config.n,
        config.d_embed,
        config.d_hidden,
        config.d_fuse,
        config.d_img,
    );
    let cell = 4 * (dh * de + dh * dh + dh);
    let d_rq = if config.variant == Variant::AvgQuestion {
        de
    } else {
        dh
    };
    let mut total = n * de + cell + df * (d_rq + dh + de + 1) + de * df + de + n;
    if matches!(
        config.variant,
        Variant::Complete | Variant::NoTws | Variant::Blind
    ) {
        total += cell;
    }
    if config.variant != Variant::Blind {
        total += df * di;
    }
    if config.variant == Variant::NoTws {
        total += n * de;
    }
    // refuse absurd headers before allocating
    if total > (1usize << 34) {
        return Err(MqaError::Checkpoint(format!(
            "implausible parameter count {total}"
        )));
    }
    Ok(total)
}

pub fn save(model: &MqaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| MqaError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<MqaModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MqaError::io(path, e))?;
    from_bytes(&bytes)
}
