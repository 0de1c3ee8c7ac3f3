//! Key vocabulary, sequence encoding, and mask selection.
//!
//! Token ids 0..=3 are reserved; template keys map to ids 4.. in order of
//! first appearance in the training corpus. Encoded chunks are fixed-width:
//! the aggregate token, then mapped keys, then padding, with a boolean mask
//! separating real tokens from padding.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
/// Aggregate token prepended to every chunk; its contextual embedding
/// stands for the whole sequence.
pub const DIST: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Template keys in first-appearance order; key `keys[i]` has id `i + 4`.
    keys: Vec<u32>,
    #[serde(skip)]
    index: std::collections::HashMap<u32, usize>,
}

impl Vocab {
    /// Build from training key sequences, first appearance first.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [u32]>) -> Result<Self> {
        let mut vocab = Vocab {
            keys: Vec::new(),
            index: std::collections::HashMap::new(),
        };
        for seq in sequences {
            for &key in seq {
                vocab.index.entry(key).or_insert_with(|| {
                    vocab.keys.push(key);
                    vocab.keys.len() - 1 + RESERVED
                });
            }
        }
        if vocab.keys.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from zero keys".into()));
        }
        Ok(vocab)
    }

    pub fn from_keys(keys: Vec<u32>) -> Self {
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i + RESERVED))
            .collect();
        Vocab { keys, index }
    }

    pub fn keys(&self) -> &[u32] {
        &self.keys
    }

    /// Reserved tokens plus one id per key.
    pub fn size(&self) -> usize {
        self.keys.len() + RESERVED
    }

    pub fn id_for_key(&self, key: u32) -> usize {
        self.index.get(&key).copied().unwrap_or(UNK)
    }

    pub fn key_for_id(&self, id: usize) -> Option<u32> {
        id.checked_sub(RESERVED).and_then(|i| self.keys.get(i)).copied()
    }

    pub fn token_name(&self, id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            DIST => "<dist>".into(),
            MASK => "<mask>".into(),
            UNK => "<unk>".into(),
            _ => match self.key_for_id(id) {
                Some(k) => k.to_string(),
                None => format!("<bad:{id}>"),
            },
        }
    }
}

/// One fixed-width encoded chunk. `ids[0]` is the aggregate token, real
/// tokens form a prefix under `attn_mask`, and padding fills the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    /// True at real-token positions. Always a prefix.
    pub attn_mask: Vec<bool>,
    /// Positions currently replaced by the mask token, ascending.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`, same order.
    pub mask_labels: Vec<usize>,
}

impl EncodedSequence {
    /// Number of real tokens, the aggregate token included.
    pub fn real_len(&self) -> usize {
        self.attn_mask.iter().filter(|&&b| b).count()
    }

    /// Real key tokens, excluding the aggregate token.
    pub fn real_key_count(&self) -> usize {
        self.real_len() - 1
    }

    /// The real-token prefix, masking applied.
    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.real_len()]
    }

    /// (position, original id) pairs for the masked slots.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.mask_positions
            .iter()
            .copied()
            .zip(self.mask_labels.iter().copied())
            .collect()
    }
}

/// Encode a key sequence into fixed-width chunks of `max_len` tokens, each
/// led by the aggregate token, so a chunk holds up to `max_len - 1` keys.
/// Unknown keys encode to the unknown id. An empty key list encodes to no
/// chunks; the caller decides whether that is an error.
pub fn encode(keys: &[u32], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedSequence>> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    Ok(keys
        .chunks(max_len - 1)
        .map(|chunk| {
            let mut ids = Vec::with_capacity(max_len);
            ids.push(DIST);
            ids.extend(chunk.iter().map(|&k| vocab.id_for_key(k)));
            let real = ids.len();
            ids.resize(max_len, PAD);
            let mut attn_mask = vec![true; real];
            attn_mask.resize(max_len, false);
            EncodedSequence {
                ids,
                attn_mask,
                mask_positions: Vec::new(),
                mask_labels: Vec::new(),
            }
        })
        .collect())
}

/// Recover the original keys of one chunk. Fails on an unknown-key id,
/// which cannot be restored, and on masked positions unless their labels
/// carry the original.
pub fn decode(enc: &EncodedSequence, vocab: &Vocab) -> Result<Vec<u32>> {
    let targets = enc.targets();
    enc.tokens()
        .iter()
        .enumerate()
        .skip(1)
        .map(|(pos, &id)| {
            let id = targets
                .iter()
                .find(|&&(p, _)| p == pos)
                .map(|&(_, orig)| orig)
                .unwrap_or(id);
            vocab
                .key_for_id(id)
                .ok_or_else(|| Error::Data(format!("token id {id} does not map back to a key")))
        })
        .collect()
}

/// Number of positions to mask among `real` key tokens: the ratio rounded
/// to nearest, never less than one.
pub fn mask_count(real: usize, ratio: f64) -> usize {
    ((real as f64 * ratio).round() as usize).clamp(1, real)
}

/// Mask a uniformly random subset of the key positions. The aggregate
/// token and padding are never masked, and the attention mask is untouched.
pub fn apply_masking<R: Rng>(
    enc: &EncodedSequence,
    ratio: f64,
    rng: &mut R,
) -> Result<EncodedSequence> {
    let real = enc.real_key_count();
    if real == 0 {
        return Err(Error::Data("no maskable position in chunk".into()));
    }
    let n = mask_count(real, ratio);
    let mut picks: Vec<usize> = sample(rng, real, n).into_iter().map(|i| i + 1).collect();
    picks.sort_unstable();
    Ok(mask_at(enc, &picks))
}

/// How many strata cover every position once at the given ratio.
pub fn stratum_count(ratio: f64) -> usize {
    (1.0 / ratio).ceil() as usize
}

/// Deterministic masking for exhaustive scoring: with k strata, stratum s
/// masks the key positions whose zero-based index is congruent to s mod k.
/// Strata at or beyond the key count come back with no masks; callers skip
/// them.
pub fn apply_stratum_masking(
    enc: &EncodedSequence,
    ratio: f64,
    stratum: usize,
) -> Result<EncodedSequence> {
    let real = enc.real_key_count();
    if real == 0 {
        return Err(Error::Data("no maskable position in chunk".into()));
    }
    let k = stratum_count(ratio);
    let picks: Vec<usize> = (0..real)
        .filter(|i| i % k == stratum % k)
        .map(|i| i + 1)
        .collect();
    Ok(mask_at(enc, &picks))
}

fn mask_at(enc: &EncodedSequence, positions: &[usize]) -> EncodedSequence {
    let mut out = EncodedSequence {
        ids: enc.ids.clone(),
        attn_mask: enc.attn_mask.clone(),
        mask_positions: Vec::with_capacity(positions.len()),
        mask_labels: Vec::with_capacity(positions.len()),
    };
    for &p in positions {
        out.mask_positions.push(p);
        out.mask_labels.push(enc.ids[p]);
        out.ids[p] = MASK;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn vocab_over(keys: &[u32]) -> Vocab {
        Vocab::build(vec![keys]).unwrap()
    }

    #[test]
    fn ids_follow_first_appearance() {
        let seqs: Vec<&[u32]> = vec![&[7, 3, 7, 9], &[3, 11]];
        let v = Vocab::build(seqs).unwrap();
        assert_eq!(v.keys(), &[7, 3, 9, 11]);
        assert_eq!(v.size(), 8);
        assert_eq!(v.id_for_key(7), 4);
        assert_eq!(v.id_for_key(11), 7);
        assert_eq!(v.id_for_key(999), UNK);
        assert_eq!(v.key_for_id(5), Some(3));
        assert_eq!(v.key_for_id(UNK), None);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(Vocab::build(Vec::<&[u32]>::new()).is_err());
    }

    #[test]
    fn from_keys_round_trips() {
        let v = vocab_over(&[5, 6, 7]);
        let w = Vocab::from_keys(v.keys().to_vec());
        assert_eq!(v.id_for_key(6), w.id_for_key(6));
        assert_eq!(v.size(), w.size());
    }

    #[test]
    fn encode_pads_to_width() {
        let v = vocab_over(&[10, 20]);
        let chunks = encode(&[10, 20], &v, 5).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].ids, vec![DIST, 4, 5, PAD, PAD]);
        assert_eq!(chunks[0].attn_mask, vec![true, true, true, false, false]);
        assert_eq!(chunks[0].real_len(), 3);
        assert_eq!(chunks[0].real_key_count(), 2);
        assert_eq!(chunks[0].tokens(), &[DIST, 4, 5]);
    }

    #[test]
    fn long_sequences_split_into_chunks() {
        let keys: Vec<u32> = (0..1000).map(|i| i % 30).collect();
        let v = vocab_over(&keys);
        let chunks = encode(&keys, &v, 512).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].real_key_count(), 511);
        assert_eq!(chunks[1].real_key_count(), 489);
        for c in &chunks {
            assert_eq!(c.ids.len(), 512);
            assert_eq!(c.ids[0], DIST);
        }
    }

    #[test]
    fn unknown_keys_encode_to_unk() {
        let v = vocab_over(&[1]);
        let chunks = encode(&[1, 42], &v, 8).unwrap();
        assert_eq!(chunks[0].tokens(), &[DIST, 4, UNK]);
    }

    #[test]
    fn empty_keys_encode_to_no_chunks() {
        let v = vocab_over(&[1]);
        assert!(encode(&[], &v, 8).unwrap().is_empty());
    }

    #[test]
    fn decode_restores_known_keys() {
        let keys = [9u32, 7, 9, 3];
        let v = vocab_over(&keys);
        let chunks = encode(&keys, &v, 16).unwrap();
        assert_eq!(decode(&chunks[0], &v).unwrap(), keys);
    }

    #[test]
    fn decode_reads_originals_through_masks() {
        let keys = [9u32, 7, 3];
        let v = vocab_over(&keys);
        let enc = &encode(&keys, &v, 16).unwrap()[0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let masked = apply_masking(enc, 0.5, &mut rng).unwrap();
        assert_eq!(decode(&masked, &v).unwrap(), keys);
    }

    #[test]
    fn decode_rejects_unknown() {
        let v = vocab_over(&[1]);
        let chunks = encode(&[1, 42], &v, 8).unwrap();
        assert!(decode(&chunks[0], &v).is_err());
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(4, 0.5), 2);
        assert_eq!(mask_count(10, 0.5), 5);
        assert_eq!(mask_count(1, 0.5), 1);
        assert_eq!(mask_count(1, 0.1), 1);
        assert_eq!(mask_count(19, 0.5), 10);
        assert_eq!(mask_count(3, 0.3), 1);
        assert_eq!(mask_count(6, 1.0), 6);
    }

    #[test]
    fn random_masking_hits_expected_count() {
        let keys: Vec<u32> = (0..10).collect();
        let v = vocab_over(&keys);
        let enc = &encode(&keys, &v, 16).unwrap()[0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = apply_masking(enc, 0.5, &mut rng).unwrap();
        assert_eq!(m.mask_positions.len(), 5);
        assert_eq!(m.ids[0], DIST);
        assert_eq!(m.attn_mask, enc.attn_mask);
        for (&p, &orig) in m.mask_positions.iter().zip(m.mask_labels.iter()) {
            assert_eq!(m.ids[p], MASK);
            assert_eq!(enc.ids[p], orig);
            assert!(p >= 1 && p <= enc.real_key_count());
        }
        // untouched positions keep their token
        for i in 0..m.ids.len() {
            if !m.mask_positions.contains(&i) {
                assert_eq!(m.ids[i], enc.ids[i]);
            }
        }
    }

    #[test]
    fn full_ratio_masks_every_key() {
        let keys = [5u32, 6, 7, 8];
        let v = vocab_over(&keys);
        let enc = &encode(&keys, &v, 8).unwrap()[0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = apply_masking(enc, 1.0, &mut rng).unwrap();
        assert_eq!(m.mask_positions, vec![1, 2, 3, 4]);
        assert!(m.tokens()[1..].iter().all(|&t| t == MASK));
    }

    #[test]
    fn same_seed_same_masks() {
        let keys: Vec<u32> = (0..12).collect();
        let v = vocab_over(&keys);
        let enc = &encode(&keys, &v, 16).unwrap()[0];
        let mask = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            apply_masking(enc, 0.4, &mut rng).unwrap()
        };
        assert_eq!(mask(9), mask(9));
        assert_ne!(mask(9).mask_positions, mask(10).mask_positions);
    }

    #[test]
    fn strata_partition_all_positions() {
        let keys: Vec<u32> = (0..13).collect();
        let v = vocab_over(&keys);
        let enc = &encode(&keys, &v, 20).unwrap()[0];
        let ratio = 0.3;
        let k = stratum_count(ratio);
        assert_eq!(k, 4);
        let mut seen = vec![0usize; enc.real_len()];
        for s in 0..k {
            let m = apply_stratum_masking(enc, ratio, s).unwrap();
            for (&p, &orig) in m.mask_positions.iter().zip(m.mask_labels.iter()) {
                assert_eq!(enc.ids[p], orig);
                seen[p] += 1;
            }
        }
        assert_eq!(seen[0], 0);
        assert!(seen[1..].iter().all(|&c| c == 1));
    }

    #[test]
    fn short_chunk_leaves_late_strata_empty() {
        let v = vocab_over(&[5]);
        let enc = &encode(&[5], &v, 4).unwrap()[0];
        let m0 = apply_stratum_masking(enc, 0.5, 0).unwrap();
        let m1 = apply_stratum_masking(enc, 0.5, 1).unwrap();
        assert_eq!(m0.targets(), vec![(1, 4)]);
        assert!(m1.targets().is_empty());
    }

    proptest! {
        #[test]
        fn chunking_preserves_keys(keys in proptest::collection::vec(0u32..50, 1..200),
                                   max_len in 2usize..40) {
            let v = Vocab::build(vec![keys.as_slice()]).unwrap();
            let chunks = encode(&keys, &v, max_len).unwrap();
            let mut flat = Vec::new();
            for c in &chunks {
                prop_assert_eq!(c.ids.len(), max_len);
                prop_assert_eq!(c.ids[0], DIST);
                prop_assert!(c.real_key_count() >= 1);
                // attention mask is a prefix
                let real = c.real_len();
                prop_assert!(c.attn_mask[..real].iter().all(|&b| b));
                prop_assert!(c.attn_mask[real..].iter().all(|&b| !b));
                prop_assert!(c.ids[real..].iter().all(|&t| t == PAD));
                flat.extend(decode(c, &v).unwrap());
            }
            prop_assert_eq!(flat, keys);
        }

        #[test]
        fn mask_count_in_bounds(real in 1usize..300, ratio in 0.01f64..=1.0) {
            let n = mask_count(real, ratio);
            prop_assert!(n >= 1);
            prop_assert!(n <= real);
        }

        #[test]
        fn random_mask_targets_consistent(len in 1usize..60, ratio in 0.05f64..0.95, seed in 0u64..1000) {
            let keys: Vec<u32> = (0..len as u32).collect();
            let v = Vocab::build(vec![keys.as_slice()]).unwrap();
            let enc = &encode(&keys, &v, len + 1).unwrap()[0];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = apply_masking(enc, ratio, &mut rng).unwrap();
            prop_assert_eq!(m.mask_positions.len(), mask_count(len, ratio));
            prop_assert_eq!(&m.attn_mask, &enc.attn_mask);
            let mut last = 0usize;
            for (&p, &orig) in m.mask_positions.iter().zip(m.mask_labels.iter()) {
                prop_assert!(p > last || last == 0);
                prop_assert!(p >= 1 && p < m.real_len());
                prop_assert_eq!(orig, enc.ids[p]);
                prop_assert_eq!(m.ids[p], MASK);
                last = p;
            }
        }

        #[test]
        fn strata_cover_exactly_once(len in 1usize..80, ratio in 0.05f64..0.95) {
            let keys: Vec<u32> = (0..len as u32).collect();
            let v = Vocab::build(vec![keys.as_slice()]).unwrap();
            let enc = &encode(&keys, &v, len + 1).unwrap()[0];
            let k = stratum_count(ratio);
            let mut seen = vec![0usize; enc.real_len()];
            for s in 0..k {
                for &p in &apply_stratum_masking(enc, ratio, s).unwrap().mask_positions {
                    seen[p] += 1;
                }
            }
            prop_assert_eq!(seen[0], 0);
            prop_assert!(seen[1..].iter().all(|&c| c == 1));
        }
    }
}
