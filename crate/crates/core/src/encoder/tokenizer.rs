//! Byte-level vocabulary and pair-input construction.
//!
//! Ids 0..=3 are specials, ids 4..=259 are the raw byte values 0..=255.
//! Every byte string tokenizes and detokenizes exactly.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const BYTE_OFFSET: u32 = 4;
pub const VOCAB_SIZE: usize = 260;

/// Smallest `max_len` that fits `[CLS] x [SEP] y [SEP]` with one token per
/// segment.
pub const MIN_INPUT_LEN: usize = 5;

pub fn byte_to_id(b: u8) -> u32 {
    b as u32 + BYTE_OFFSET
}

/// The byte an id stands for, or `None` for specials and out-of-range ids.
pub fn id_to_byte(id: u32) -> Option<u8> {
    if (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id) {
        Some((id - BYTE_OFFSET) as u8)
    } else {
        None
    }
}

pub fn is_special(id: u32) -> bool {
    id < BYTE_OFFSET
}

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().copied().map(byte_to_id).collect()
}

/// Bytes of every non-special id, in order.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter_map(|&id| id_to_byte(id)).collect()
}

/// Lossy for id sequences that do not decode to UTF-8; exact for anything
/// produced by [`tokenize`].
pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

/// Model input: token ids plus a `{0,1}` attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Appends `[PAD]` up to `len`. Does nothing if already that long.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.attention_mask.push(0);
        }
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Contract("token sequence is empty".into()));
        }
        if self.ids.len() > max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_len {max_len}",
                self.ids.len()
            )));
        }
        if self.attention_mask.len() != self.ids.len() {
            return Err(Error::Contract(format!(
                "mask has {} entries for {} ids",
                self.attention_mask.len(),
                self.ids.len()
            )));
        }
        if let Some(bad) = self.ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        let real = self.real_len();
        let contiguous = self.attention_mask[..real].iter().all(|&m| m == 1)
            && self.attention_mask[real..].iter().all(|&m| m == 0);
        if !contiguous {
            return Err(Error::Contract(
                "attention mask must be ones followed by a zero padding suffix".into(),
            ));
        }
        Ok(())
    }
}

/// `[CLS] source [SEP] target [SEP]`, truncated longest-segment-first.
///
/// While the sequence is too long, one token is dropped from the end of
/// whichever segment is currently longer; on a tie the target loses one.
pub fn build_input(source: &str, target: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < MIN_INPUT_LEN {
        return Err(Error::Config(format!(
            "max_len must be at least {MIN_INPUT_LEN}, got {max_len}"
        )));
    }
    let mut src = tokenize(source);
    let mut tgt = tokenize(target);
    let budget = max_len - 3;
    if src.len() + tgt.len() > budget {
        let (mut s, mut t) = (src.len(), tgt.len());
        // Equivalent to removing one token at a time from the longer side.
        while s + t > budget {
            if s > t {
                s -= 1;
            } else {
                t -= 1;
            }
        }
        src.truncate(s);
        tgt.truncate(t);
    }
    let mut ids = Vec::with_capacity(src.len() + tgt.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(&src);
    ids.push(SEP);
    ids.extend_from_slice(&tgt);
    ids.push(SEP);
    let attention_mask = vec![1; ids.len()];
    Ok(TokenSequence { ids, attention_mask })
}

/// Pads every sequence to the longest one in the batch.
pub fn pad_batch(seqs: &mut [TokenSequence]) {
    let longest = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    for s in seqs {
        s.pad_to(longest);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_fixtures() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A"), vec![69]);
        assert_eq!(detokenize(&tokenize("नमस्ते world")), "नमस्ते world");
    }

    #[test]
    fn specials_do_not_collide_with_bytes() {
        for b in 0..=255u8 {
            let id = byte_to_id(b);
            assert!(!is_special(id));
            assert_eq!(id_to_byte(id), Some(b));
        }
        for id in [PAD, CLS, SEP, UNK] {
            assert_eq!(id_to_byte(id), None);
        }
        assert_eq!(id_to_byte(VOCAB_SIZE as u32), None);
    }

    #[test]
    fn build_input_layout() {
        let seq = build_input("A", "B", 512).unwrap();
        assert_eq!(seq.ids, vec![1, 69, 2, 70, 2]);
        assert_eq!(seq.attention_mask, vec![1; 5]);
        assert_eq!(build_input("", "", 512).unwrap().ids, vec![1, 2, 2]);
    }

    #[test]
    fn build_input_truncates_longer_segment() {
        let source = "s".repeat(600);
        let target = "t".repeat(10);
        let seq = build_input(&source, &target, 512).unwrap();
        assert_eq!(seq.len(), 512);
        let sep = seq.ids.iter().position(|&i| i == SEP).unwrap();
        assert_eq!(sep, 1 + 499);
        assert_eq!(&seq.ids[sep + 1..511], tokenize(&target).as_slice());
    }

    #[test]
    fn build_input_rejects_tiny_max_len() {
        assert!(matches!(build_input("a", "b", 4), Err(Error::Config(_))));
        assert!(build_input("abc", "def", 5).is_ok());
    }

    #[test]
    fn padding_is_a_contiguous_suffix() {
        let mut batch = vec![
            build_input("abc", "d", 64).unwrap(),
            build_input("a", "b", 64).unwrap(),
        ];
        pad_batch(&mut batch);
        assert_eq!(batch[1].len(), batch[0].len());
        assert_eq!(batch[1].attention_mask, vec![1, 1, 1, 1, 1, 0, 0]);
        batch[1].validate(64).unwrap();
        let bad = TokenSequence {
            ids: vec![1, 0, 2],
            attention_mask: vec![1, 0, 1],
        };
        assert!(bad.validate(64).is_err());
    }

    /// Reference truncation: literally drop one token at a time.
    fn truncate_one_at_a_time(mut s: usize, mut t: usize, max_len: usize) -> (usize, usize) {
        while s + t + 3 > max_len {
            if s > t {
                s -= 1;
            } else {
                t -= 1;
            }
        }
        (s, t)
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            prop_assert_eq!(detokenize_bytes(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn string_round_trip(s in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }

        #[test]
        fn build_input_shape(
            s in proptest::collection::vec(b'a'..=b'z', 0..200),
            t in proptest::collection::vec(b'a'..=b'z', 0..200),
            max_len in 5usize..128,
        ) {
            let src = String::from_utf8(s).unwrap();
            let tgt = String::from_utf8(t).unwrap();
            let seq = build_input(&src, &tgt, max_len).unwrap();
            prop_assert!(seq.len() <= max_len);
            prop_assert_eq!(seq.ids[0], CLS);
            prop_assert_eq!(seq.ids.iter().filter(|&&i| i == CLS).count(), 1);
            prop_assert_eq!(seq.ids.iter().filter(|&&i| i == SEP).count(), 2);
            let sep = seq.ids.iter().position(|&i| i == SEP).unwrap();
            let (es, et) = truncate_one_at_a_time(src.len(), tgt.len(), max_len);
            prop_assert_eq!(sep - 1, es);
            prop_assert_eq!(seq.len() - sep - 2, et);
            // Truncation keeps prefixes.
            prop_assert_eq!(&seq.ids[1..sep], &tokenize(&src)[..es]);
        }
    }
}
