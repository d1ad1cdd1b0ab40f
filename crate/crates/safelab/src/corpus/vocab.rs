//! Byte-level vocabulary with reserved special tokens.
//!
//! Ids 0–255 are the raw byte values; ids 256–261 are special tokens that can
//! only be injected programmatically, never produced by encoding text. No
//! learned merges: encoding is byte identity, so the vocabulary has no
//! training step and no external artifacts.

/// Token id type used throughout the crate.
pub type TokenId = u32;

/// Number of base byte tokens.
pub const N_BYTE_TOKENS: usize = 256;

/// Byte-level vocabulary: 256 byte tokens plus six reserved specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    /// Marker token associated with potentially unsafe content.
    pub const UNSAFE_TAG: TokenId = 256;
    /// Start of a user turn in chat-formatted sequences.
    pub const USER: TokenId = 257;
    /// Start of an assistant turn in chat-formatted sequences.
    pub const ASSISTANT: TokenId = 258;
    /// End of turn.
    pub const EOT: TokenId = 259;
    /// Padding; always excluded from the loss.
    pub const PAD: TokenId = 260;
    /// Separator between packed documents.
    pub const DOC_SEP: TokenId = 261;

    pub const SIZE: usize = 262;

    pub fn new() -> Self {
        Vocab
    }

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (N_BYTE_TOKENS as TokenId..Self::SIZE as TokenId).contains(&id)
    }

    pub fn is_valid(&self, id: TokenId) -> bool {
        (id as usize) < Self::SIZE
    }

    /// Encode text as its UTF-8 bytes. Raw text can never produce a special id.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Decode byte tokens back to text; special tokens are skipped.
    ///
    /// Invalid UTF-8 (possible when decoding model samples) is replaced with
    /// U+FFFD rather than erroring.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| (id as usize) < N_BYTE_TOKENS)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Debug rendering that shows special tokens as named markers.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut run: Vec<u8> = Vec::new();
        for &id in ids {
            if (id as usize) < N_BYTE_TOKENS {
                run.push(id as u8);
            } else {
                if !run.is_empty() {
                    out.push_str(&String::from_utf8_lossy(&run));
                    run.clear();
                }
                out.push_str(self.special_name(id));
            }
        }
        if !run.is_empty() {
            out.push_str(&String::from_utf8_lossy(&run));
        }
        out
    }

    pub fn special_name(&self, id: TokenId) -> &'static str {
        match id {
            Self::UNSAFE_TAG => "<|unsafe|>",
            Self::USER => "<|user|>",
            Self::ASSISTANT => "<|assistant|>",
            Self::EOT => "<|eot|>",
            Self::PAD => "<|pad|>",
            Self::DOC_SEP => "<|doc|>",
            _ => "<|invalid|>",
        }
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_size_is_262() {
        assert_eq!(Vocab::new().size(), 262);
    }

    #[test]
    fn encode_is_byte_values() {
        assert_eq!(Vocab::new().encode("ab"), vec![97, 98]);
    }

    #[test]
    fn decode_encode_roundtrip_utf8() {
        let v = Vocab::new();
        for s in ["hello", "héllo wörld", "数学", "", "a\nb\tc"] {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn encode_decode_identity_on_byte_ids() {
        // encode(decode(ids)) == ids for byte-only id sequences; specials are
        // injected programmatically and stripped by decode.
        let v = Vocab::new();
        let ids: Vec<TokenId> = "packing & repacking".bytes().map(TokenId::from).collect();
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn no_text_encodes_to_special() {
        let v = Vocab::new();
        let all: String = (0u8..=255).map(|b| b as char).collect();
        assert!(v.encode(&all).iter().all(|&id| !v.is_special(id)));
    }

    #[test]
    fn special_ids_are_stable() {
        assert_eq!(Vocab::UNSAFE_TAG, 256);
        assert_eq!(Vocab::USER, 257);
        assert_eq!(Vocab::ASSISTANT, 258);
        assert_eq!(Vocab::EOT, 259);
        assert_eq!(Vocab::PAD, 260);
        assert_eq!(Vocab::DOC_SEP, 261);
    }

    #[test]
    fn render_names_specials() {
        let v = Vocab::new();
        let mut ids = v.encode("hi");
        ids.push(Vocab::EOT);
        assert_eq!(v.render(&ids), "hi<|eot|>");
    }
}
