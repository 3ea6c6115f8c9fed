//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four
//! special tokens.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const MASK: usize = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Drops special tokens; ids above the vocabulary are an error.
pub fn decode(ids: &[usize]) -> Result<Vec<u8>, usize> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            PAD | BOS | EOS | MASK => {}
            bad => return Err(bad),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "héllo\n\0\u{ff}".as_bytes();
        let ids = encode(text);
        assert!(ids.iter().all(|&i| i < 256));
        assert_eq!(decode(&ids).unwrap(), text);
    }

    #[test]
    fn specials_are_dropped() {
        assert_eq!(decode(&[BOS, 104, 105, EOS, PAD]).unwrap(), b"hi");
        assert_eq!(decode(&[VOCAB_SIZE]), Err(VOCAB_SIZE));
    }
}
