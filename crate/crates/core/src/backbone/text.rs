//! Tokenized prompt with its frozen token embeddings.

use crate::tensor::Tensor;

use super::tokenizer::ClassTag;

/// A tokenized prompt template ready for ID substitution.
#[derive(Clone, Debug)]
pub struct TextPromptEmbedding {
    pub token_ids: Vec<u32>,
    /// Frozen embeddings, one row per token: [|T|, d_tk].
    pub token_embeddings: Tensor,
    /// Index tau of the placeholder token.
    pub id_position: usize,
    pub class_tag: ClassTag,
}

impl TextPromptEmbedding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}
