//! Bit-exact training-state checkpoints.
//!
//! The layout is a little-endian binary image of everything a resumed run
//! needs: completed-epoch counter, the item store, and every client's layers
//! and optimizer moments. Floats are stored as raw IEEE-754 bits, so a
//! save/load cycle is exact and a resumed run continues byte-identically to
//! an uninterrupted one. A trailing SHA-256 digest catches corruption.
//!
//! Interaction data is not stored; the caller reattaches the graph on load
//! and its shape is cross-checked against the header.

use crate::client::{AdamState, UserState};
use crate::dataset::InteractionGraph;
use crate::embedding::LayeredEmbedding;
use crate::error::{Error, Result};
use crate::server::ItemStore;
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

const MAGIC: [u8; 4] = *b"FRCK";
const VERSION: u32 = 1;

/// Serializes the full training state after `epoch` completed epochs.
pub fn to_bytes(epoch: usize, store: &ItemStore, users: &[UserState]) -> Vec<u8> {
    let n = store.num_items();
    let dim = store.dim();
    let depth = store.depth();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [epoch as u64, users.len() as u64, n as u64, dim as u64, depth as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &d in &store.item_degree {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    push_floats(&mut out, store.layer0.iter());
    for latent in &store.latents {
        push_floats(&mut out, latent.iter());
    }
    for user in users {
        for layer in &user.embedding.layers {
            push_floats(&mut out, layer.iter());
        }
        push_floats(&mut out, user.moments.m.iter());
        push_floats(&mut out, user.moments.v.iter());
        out.extend_from_slice(&user.moments.step.to_le_bytes());
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

/// Parses [`to_bytes`] output, reattaching `graph` to the client states.
pub fn from_bytes(
    bytes: &[u8],
    graph: &Arc<InteractionGraph>,
) -> Result<(usize, ItemStore, Vec<UserState>)> {
    if bytes.len() < 32 {
        return Err(corrupt("shorter than its digest"));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    let expect: [u8; 32] = Sha256::digest(payload).into();
    if digest != expect {
        return Err(corrupt("digest mismatch"));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let epoch = r.u64()? as usize;
    let m = r.u64()? as usize;
    let n = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let depth = r.u64()? as usize;
    if m != graph.num_users || n != graph.num_items {
        return Err(corrupt(&format!(
            "shape {m}x{n} does not match the dataset's {}x{}",
            graph.num_users, graph.num_items
        )));
    }

    let mut item_degree = Vec::with_capacity(n);
    for _ in 0..n {
        item_degree.push(r.u64()? as usize);
    }
    let layer0 = Array2::from_shape_vec((n, dim), r.floats(n * dim)?)
        .expect("length matches shape");
    let mut latents = Vec::with_capacity(depth);
    for _ in 0..depth {
        latents.push(
            Array2::from_shape_vec((n, dim), r.floats(n * dim)?).expect("length matches shape"),
        );
    }
    let store = ItemStore { layer0, latents, item_degree };

    let mut users = Vec::with_capacity(m);
    for user_id in 0..m {
        let mut layers = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            layers.push(r.floats(dim)?);
        }
        let moments = AdamState {
            m: r.floats(dim)?,
            v: r.floats(dim)?,
            step: r.u64()?,
        };
        users.push(UserState {
            user_id,
            embedding: LayeredEmbedding { layers },
            moments,
            graph: graph.clone(),
        });
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((epoch, store, users))
}

/// Writes a checkpoint file.
pub fn save(
    path: &Path,
    epoch: usize,
    store: &ItemStore,
    users: &[UserState],
) -> Result<()> {
    std::fs::write(path, to_bytes(epoch, store, users))?;
    Ok(())
}

/// Reads a checkpoint file written by [`save`].
pub fn load(
    path: &Path,
    graph: &Arc<InteractionGraph>,
) -> Result<(usize, ItemStore, Vec<UserState>)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, graph)
}

fn corrupt(msg: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {msg}"))
}

fn push_floats<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(corrupt("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}
