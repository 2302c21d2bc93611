//! GSCM checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GSCM" | version u16 | tag_len u32 | tag bytes (UTF-8) | k u32 |
//! count u64 | count x f32 | JSON metadata (to end of file)
//! ```
//!
//! The float block holds the trainable parameters in layer construction
//! order (for each layer: weights row-major `[out, in, kh, kw]`, then bias;
//! batch norm contributes gamma then beta), followed by the batch norm
//! running means and variances in the same layer order. `count` covers both.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stamps::write_atomic;

use super::network::{Architecture, Network};
use super::{ClassifierModel, TrainingMetadata};

pub const GSCM_MAGIC: [u8; 4] = *b"GSCM";
pub const GSCM_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    input_shape: [usize; 3],
    width: usize,
    trainable_count: usize,
    seed: u64,
    epochs_run: usize,
    returned_epoch: usize,
    validation_loss: f64,
    validation_history: Vec<f64>,
}

/// Width the compact network was built with, recovered from its first
/// layer's bias length.
fn compact_width<T: Scalar>(net: &Network<T>) -> usize {
    match net.arch {
        Architecture::CompactCnn => match &net.ops[0] {
            super::network::Op::Conv(c) => c.out_channels(),
            _ => 0,
        },
        _ => 0,
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(m: &ClassifierModel<T>, mut w: W) -> Result<()> {
    let net = &m.network;
    let tag = net.arch.tag().as_bytes();
    let mut buf = Vec::with_capacity(32 + 4 * (net.params.len() + net.buffers.len()));
    buf.extend_from_slice(&GSCM_MAGIC);
    buf.extend_from_slice(&GSCM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&(net.n_classes as u32).to_le_bytes());
    buf.extend_from_slice(&((net.params.len() + net.buffers.len()) as u64).to_le_bytes());
    for v in net.params.iter().chain(&net.buffers) {
        buf.extend_from_slice(&v.to_f32_storage().to_le_bytes());
    }
    let (c, h, wd) = net.input;
    let md = &m.metadata;
    let trailer = Trailer {
        input_shape: [c, h, wd],
        width: compact_width(net),
        trainable_count: net.params.len(),
        seed: md.seed,
        epochs_run: md.epochs_run,
        returned_epoch: md.returned_epoch,
        validation_loss: md.validation_loss,
        validation_history: md.validation_history.clone(),
    };
    serde_json::to_writer(&mut buf, &trailer).map_err(|e| Error::Malformed(e.to_string()))?;
    buf.push(b'\n');
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ClassifierModel<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != GSCM_MAGIC {
        return Err(Error::BadMagic {
            expected: GSCM_MAGIC,
            found: magic,
        });
    }
    let version = cur.u16()?;
    if version != GSCM_VERSION {
        return Err(Error::VersionMismatch {
            expected: GSCM_VERSION,
            found: version,
        });
    }
    let tag_len = cur.u32()? as usize;
    let tag = std::str::from_utf8(cur.take(tag_len)?)
        .map_err(|_| Error::Malformed("architecture tag is not UTF-8".into()))?;
    let arch =
        Architecture::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown architecture tag {tag:?}")))?;
    let k = cur.u32()? as usize;
    let count = cur.u64()?;
    let float_bytes = count
        .checked_mul(4)
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| Error::DimensionOverflow(format!("{count} parameters")))?;
    let floats = cur.take(float_bytes)?;
    let trailer: Trailer =
        serde_json::from_slice(&bytes[cur.pos..]).map_err(|e| Error::Malformed(format!("checkpoint metadata: {e}")))?;
    let [c, h, w] = trailer.input_shape;
    if k < 2 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Malformed(format!(
            "invalid model dimensions k={k}, input {c}x{h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::<T>::new(arch, (c, h, w), k, trailer.width, &mut rng);
    if net.params.len() != trailer.trainable_count || net.params.len() + net.buffers.len() != count as usize {
        return Err(Error::Malformed(format!(
            "{arch} with k={k} has {} parameters and {} buffers, checkpoint holds {count} values ({} trainable)",
            net.params.len(),
            net.buffers.len(),
            trailer.trainable_count
        )));
    }
    let mut values = floats
        .chunks_exact(4)
        .map(|b| T::from_f32_storage(f32::from_le_bytes(b.try_into().unwrap())));
    for p in net.params.iter_mut().chain(net.buffers.iter_mut()) {
        *p = values.next().expect("length checked");
    }
    Ok(ClassifierModel {
        network: net,
        metadata: TrainingMetadata {
            seed: trailer.seed,
            epochs_run: trailer.epochs_run,
            returned_epoch: trailer.returned_epoch,
            validation_loss: trailer.validation_loss,
            validation_history: trailer.validation_history,
        },
    })
}

pub fn write_checkpoint_file<T: Scalar>(m: &ClassifierModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(m, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

pub fn read_checkpoint_file<T: Scalar>(path: impl AsRef<Path>) -> Result<ClassifierModel<T>> {
    read_checkpoint(std::fs::File::open(path)?)
}
