//! Secure aggregation: pairwise pseudo-random masks over fixed-point words.
//!
//! Real-valued masks cannot cancel bit-exactly in floating point, so vectors
//! are encoded into two's-complement fixed point (mod 2^64 per word) before
//! masking. Every unordered participant pair (u, v) shares a seed derived by
//! a simulated trusted dealer as SHA-256(round key, u, v); the pair's PRG
//! stream is added by the larger id and subtracted by the smaller, so all
//! masks cancel exactly in the sum and the aggregator learns nothing but the
//! total. The PRG is ChaCha8 keyed by the 256-bit pair seed, expanded to
//! little-endian 64-bit words. Participant dropout is out of scope: every
//! masked vector that enters a round is present in the sum.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default fixed-point precision: values up to 2^39 in magnitude survive
/// encoding, each entry rounds with error at most 2^-25, and sums over a few
/// hundred participants stay far from the wrap boundary.
pub const DEFAULT_FRAC_BITS: u32 = 24;

/// A real vector encoded as two's-complement words scaled by 2^frac_bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointVector {
    pub words: Vec<u64>,
    pub frac_bits: u32,
}

/// Dealer-issued seed for one unordered participant pair (u < v).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSeed {
    pub u: usize,
    pub v: usize,
    pub seed: [u8; 32],
}

/// Encodes reals into fixed point. Requires |x| < 2^(63 - frac_bits).
pub fn encode(x: &[f64], frac_bits: u32) -> Result<FixedPointVector> {
    if frac_bits == 0 || frac_bits > 62 {
        return Err(Error::Range(format!("frac_bits {frac_bits} outside 1..=62")));
    }
    let scale = (1u64 << frac_bits) as f64;
    let limit = 2f64.powi(63);
    let mut words = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Range(format!("non-finite value at entry {i}")));
        }
        let scaled = (v * scale).round();
        if !(-limit..limit).contains(&scaled) {
            return Err(Error::Range(format!(
                "value {v} at entry {i} exceeds fixed-point range for frac_bits {frac_bits}"
            )));
        }
        words.push((scaled as i64) as u64);
    }
    Ok(FixedPointVector { words, frac_bits })
}

/// Decodes a (sum of) fixed-point vector(s) back to reals.
///
/// `participants` states how many encoded vectors were summed into `fx`;
/// the result then differs from the true real sum by at most
/// `participants * 2^-(frac_bits + 1)` per entry, provided the true sum
/// stayed within the representable range (no mod-2^64 wrap).
pub fn decode(fx: &FixedPointVector, participants: usize) -> Result<Vec<f64>> {
    if participants == 0 {
        return Err(Error::Protocol("decode of a sum over zero participants".into()));
    }
    let inv_scale = 2f64.powi(-(fx.frac_bits as i32));
    Ok(fx.words.iter().map(|&w| (w as i64) as f64 * inv_scale).collect())
}

/// Derives the seed for one unordered pair from the round key.
pub fn pair_seed(round_key: &[u8; 32], a: usize, b: usize) -> [u8; 32] {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut hasher = Sha256::new();
    hasher.update(round_key);
    hasher.update([0x02]);
    hasher.update((lo as u64).to_le_bytes());
    hasher.update((hi as u64).to_le_bytes());
    hasher.finalize().into()
}

/// Dealer view: seeds for every unordered pair of `participants`.
///
/// Participant ids must be strictly ascending.
pub fn derive_pair_seeds(round_key: &[u8; 32], participants: &[usize]) -> Result<Vec<PairSeed>> {
    check_ascending(participants)?;
    let mut seeds = Vec::with_capacity(participants.len() * (participants.len().saturating_sub(1)) / 2);
    for (i, &u) in participants.iter().enumerate() {
        for &v in &participants[i + 1..] {
            seeds.push(PairSeed {
                u,
                v,
                seed: pair_seed(round_key, u, v),
            });
        }
    }
    Ok(seeds)
}

pub(crate) fn check_ascending(participants: &[usize]) -> Result<()> {
    if participants.is_empty() {
        return Err(Error::Protocol("empty participant set".into()));
    }
    if participants.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Protocol("participant ids must be strictly ascending".into()));
    }
    Ok(())
}

/// Expands a pair seed to `out.len()` words.
fn prg_words(seed: &[u8; 32], out: &mut [u64]) {
    let mut rng = ChaCha8Rng::from_seed(*seed);
    let mut buf = vec![0u8; out.len() * 8];
    rng.fill_bytes(&mut buf);
    for (w, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *w = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
}

/// One participant's masking step:
/// `x + sum_{v < self} PRG(r_{self,v}) - sum_{v > self} PRG(r_{self,v})`,
/// word arithmetic mod 2^64.
pub fn mask(
    x: &FixedPointVector,
    self_id: usize,
    participants: &[usize],
    seeds: &[PairSeed],
) -> Result<FixedPointVector> {
    check_ascending(participants)?;
    if !participants.contains(&self_id) {
        return Err(Error::Protocol(format!(
            "participant {self_id} not in the round's participant set"
        )));
    }
    let mut words = x.words.clone();
    let mut stream = vec![0u64; words.len()];
    for &v in participants {
        if v == self_id {
            continue;
        }
        let (lo, hi) = if v < self_id { (v, self_id) } else { (self_id, v) };
        let seed = seeds
            .iter()
            .find(|s| s.u == lo && s.v == hi)
            .ok_or_else(|| Error::Protocol(format!("missing pair seed for ({lo}, {hi})")))?;
        prg_words(&seed.seed, &mut stream);
        if v < self_id {
            for (w, &s) in words.iter_mut().zip(&stream) {
                *w = w.wrapping_add(s);
            }
        } else {
            for (w, &s) in words.iter_mut().zip(&stream) {
                *w = w.wrapping_sub(s);
            }
        }
    }
    Ok(FixedPointVector {
        words,
        frac_bits: x.frac_bits,
    })
}

/// Aggregator step: word-wise sum mod 2^64.
pub fn sum_masked<'a, I>(inputs: I) -> Result<FixedPointVector>
where
    I: IntoIterator<Item = &'a FixedPointVector>,
{
    let mut iter = inputs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Protocol("empty masked sum".into()))?;
    let mut acc = first.clone();
    for fx in iter {
        if fx.words.len() != acc.words.len() {
            return Err(Error::Dimension(format!(
                "masked vectors of lengths {} and {}",
                acc.words.len(),
                fx.words.len()
            )));
        }
        if fx.frac_bits != acc.frac_bits {
            return Err(Error::Protocol("mixed frac_bits in one aggregation".into()));
        }
        for (a, &w) in acc.words.iter_mut().zip(&fx.words) {
            *a = a.wrapping_add(w);
        }
    }
    Ok(acc)
}

/// Full round: encode every participant's vector, mask, sum, decode.
///
/// Inputs are (participant id, vector) with strictly ascending ids. Each
/// pair's PRG stream is expanded once and applied with opposite signs to the
/// two masked vectors it covers, which is word-for-word identical to each
/// participant running [`mask`] on its own. Only the masked vectors and
/// their total exist on the aggregator side of the boundary.
pub fn secure_sum(
    inputs: &[(usize, Vec<f64>)],
    round_key: &[u8; 32],
    frac_bits: u32,
) -> Result<Vec<f64>> {
    let ids: Vec<usize> = inputs.iter().map(|(id, _)| *id).collect();
    check_ascending(&ids)?;
    let dim = inputs[0].1.len();
    let mut masked: Vec<Vec<u64>> = Vec::with_capacity(inputs.len());
    for (id, x) in inputs {
        if x.len() != dim {
            return Err(Error::Dimension(format!(
                "participant {id} uploads length {}, round uses {dim}",
                x.len()
            )));
        }
        masked.push(encode(x, frac_bits)?.words);
    }

    let mut buf = vec![0u8; dim * 8];
    for i in 0..inputs.len() {
        for j in (i + 1)..inputs.len() {
            let seed = pair_seed(round_key, ids[i], ids[j]);
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.fill_bytes(&mut buf);
            // Larger id adds the stream, smaller id subtracts it.
            let (head, tail) = masked.split_at_mut(j);
            let lo = &mut head[i];
            let hi = &mut tail[0];
            for ((chunk, l), h) in buf.chunks_exact(8).zip(lo.iter_mut()).zip(hi.iter_mut()) {
                let s = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                *h = h.wrapping_add(s);
                *l = l.wrapping_sub(s);
            }
        }
    }

    let mut total = masked.pop().expect("nonempty participant set");
    for row in &masked {
        for (a, &w) in total.iter_mut().zip(row) {
            *a = a.wrapping_add(w);
        }
    }
    decode(
        &FixedPointVector {
            words: total,
            frac_bits,
        },
        inputs.len(),
    )
}
