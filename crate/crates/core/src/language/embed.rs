use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Expression;
use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const UNK: &str = "<unk>";

/// Word → embedding row. Row 0 is the unknown-word row; words are lowercased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordVocabulary {
    rows: IndexMap<String, usize>,
}

impl WordVocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<String> = words.into_iter().map(str::to_lowercase).collect();
        let mut rows = IndexMap::new();
        rows.insert(UNK.to_string(), 0);
        for w in sorted {
            let next = rows.len();
            rows.entry(w).or_insert(next);
        }
        WordVocabulary { rows }
    }

    pub fn row(&self, word: &str) -> usize {
        self.rows.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Trainable token embeddings plus the ROOT and CLS vectors.
#[derive(Debug, Clone)]
pub struct TokenEmbeddingTable {
    pub vocabulary: WordVocabulary,
    pub embedding: ParamId,
    pub root: ParamId,
    pub cls: ParamId,
}

impl TokenEmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        vocabulary: WordVocabulary,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let v = vocabulary.len();
        TokenEmbeddingTable {
            embedding: store.insert("text.embedding", Tensor::uniform(&[v, dim], 1.0, rng)),
            root: store.insert("text.root", Tensor::uniform(&[1, dim], 1.0, rng)),
            cls: store.insert("text.cls", Tensor::uniform(&[1, dim], 1.0, rng)),
            vocabulary,
        }
    }

    pub fn lookup(store: &ParamStore, vocabulary: WordVocabulary) -> Self {
        TokenEmbeddingTable {
            vocabulary,
            embedding: store.expect_id("text.embedding"),
            root: store.expect_id("text.root"),
            cls: store.expect_id("text.cls"),
        }
    }

    pub fn rows(&self, expr: &Expression) -> Vec<usize> {
        expr.tokens.iter().map(|t| self.vocabulary.row(t)).collect()
    }
}

/// Word matrix `N_w x C_t` and the `1 x C_t` CLS vector.
pub fn embed_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    table: &TokenEmbeddingTable,
    expr: &Expression,
) -> Result<(Var, Var)> {
    let e = tape.param(store, table.embedding);
    let words = tape.gather_rows(e, &table.rows(expr))?;
    let cls = tape.param(store, table.cls);
    Ok((words, cls))
}
