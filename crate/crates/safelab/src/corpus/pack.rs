//! Causal-LM sequence packing.

use super::{TokenId, TokenSeq, Vocab};

/// One fixed-length training block with its loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBlock {
    pub ids: Vec<TokenId>,
    /// 1 for real tokens, 0 for PAD. The trainer additionally shifts this for
    /// next-token targets.
    pub mask: Vec<u8>,
}

impl PackedBlock {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Concatenate documents with a DOC_SEP between consecutive documents and chunk
/// into blocks of exactly `context_len`. A final partial block is padded with
/// PAD, masked out of the loss. An empty stream yields no blocks.
pub fn pack_sequences<'a, I>(docs: I, context_len: usize) -> Vec<PackedBlock>
where
    I: IntoIterator<Item = &'a TokenSeq>,
{
    assert!(context_len >= 2, "context_len must be >= 2");
    let mut ids: Vec<TokenId> = Vec::new();
    let mut first = true;
    for doc in docs {
        if !first {
            ids.push(Vocab::DOC_SEP);
        }
        ids.extend_from_slice(&doc.ids);
        first = false;
    }
    let mut blocks = Vec::with_capacity(ids.len().div_ceil(context_len));
    for chunk in ids.chunks(context_len) {
        let mut block_ids = chunk.to_vec();
        let mut mask = vec![1u8; chunk.len()];
        while block_ids.len() < context_len {
            block_ids.push(Vocab::PAD);
            mask.push(0);
        }
        blocks.push(PackedBlock { ids: block_ids, mask });
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, start: TokenId) -> TokenSeq {
        TokenSeq::new((start..start + n as TokenId).collect(), "t")
    }

    #[test]
    fn two_docs_pack_to_three_full_blocks() {
        let (a, b) = (seq(5, 0), seq(6, 100));
        let blocks = pack_sequences([&a, &b], 4);
        assert_eq!(blocks.len(), 3);
        assert!(blocks.iter().all(|b| b.ids.len() == 4 && b.real_len() == 4));
        let flat: Vec<TokenId> = blocks.iter().flat_map(|b| b.ids.clone()).collect();
        let seps = flat.iter().filter(|&&id| id == Vocab::DOC_SEP).count();
        assert_eq!(seps, 1);
        assert_eq!(flat.len(), 12);
    }

    #[test]
    fn empty_stream_empty_output() {
        let blocks = pack_sequences([], 8);
        assert!(blocks.is_empty());
    }

    #[test]
    fn partial_final_block_is_padded_and_masked() {
        let a = seq(5, 0);
        let blocks = pack_sequences([&a], 4);
        assert_eq!(blocks.len(), 2);
        let last = &blocks[1];
        assert_eq!(last.ids, vec![4, Vocab::PAD, Vocab::PAD, Vocab::PAD]);
        assert_eq!(last.mask, vec![1, 0, 0, 0]);
    }

    #[test]
    fn packing_preserves_token_order() {
        let docs = [seq(7, 10), seq(3, 50), seq(9, 200)];
        let blocks = pack_sequences(docs.iter(), 5);
        let flat: Vec<TokenId> = blocks
            .iter()
            .flat_map(|b| b.ids.iter().copied())
            .filter(|&id| id != Vocab::PAD && id != Vocab::DOC_SEP)
            .collect();
        let expect: Vec<TokenId> = docs.iter().flat_map(|d| d.ids.iter().copied()).collect();
        assert_eq!(flat, expect);
    }
}
