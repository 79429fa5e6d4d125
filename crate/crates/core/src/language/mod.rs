//! Referring expressions: CoNLL-U ingestion, merged dependency graphs,
//! positional encodings and token embeddings.

mod conllu;
mod embed;
mod generate;
mod graph;

pub use conllu::{parse_conllu, write_conllu, ConlluDocument, ConlluSentence, ConlluToken, DependencyTree};
pub use embed::{embed_tokens, TokenEmbeddingTable, WordVocabulary, UNK};
pub use generate::{generate_expression, GeneratedExpression, Template};
pub use graph::{
    laplacian, laplacian_pe, merge_trees, orient_edges, DependencyGraph, DirectionMode, Edge,
    LaplacianPe, RelationVocabulary,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest accepted expression, in tokens.
pub const MAX_TOKENS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub tokens: Vec<String>,
    /// Half-open token ranges, one per sentence, in order.
    pub sentence_spans: Vec<(usize, usize)>,
    pub raw_text: String,
}

impl Expression {
    pub fn from_trees(trees: &[DependencyTree], raw_text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut sentence_spans = Vec::with_capacity(trees.len());
        for t in trees {
            let start = tokens.len();
            tokens.extend(t.forms.iter().cloned());
            sentence_spans.push((start, tokens.len()));
        }
        let e = Expression { tokens, sentence_spans, raw_text: raw_text.to_string() };
        e.validate()?;
        Ok(e)
    }

    /// One whitespace-tokenized sentence (no parse attached).
    pub fn single(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let e = Expression {
            sentence_spans: vec![(0, tokens.len())],
            tokens,
            raw_text: text.to_string(),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Invalid("expression has no tokens".into()));
        }
        if n > MAX_TOKENS {
            return Err(Error::Invalid(format!("expression has {n} tokens, limit is {MAX_TOKENS}")));
        }
        let mut at = 0;
        for &(s, e) in &self.sentence_spans {
            if s != at || e <= s {
                return Err(Error::Invalid("sentence spans do not partition the tokens".into()));
            }
            at = e;
        }
        if at != n {
            return Err(Error::Invalid("sentence spans do not partition the tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Unique,
    Multiple,
}

/// One line of an expression dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub scene_id: String,
    pub expr_id: String,
    pub text: String,
    pub conllu: String,
    pub target_instance: usize,
    pub tag: Tag,
    /// Object categories named in the text; drives the relevance labels.
    #[serde(default)]
    pub mentioned_categories: Vec<String>,
}

impl ExpressionRecord {
    pub fn parse(&self) -> Result<(Expression, Vec<DependencyTree>)> {
        let trees = parse_conllu(&self.conllu)?;
        let expr = Expression::from_trees(&trees, &self.text)?;
        Ok((expr, trees))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expression_bounds() {
        assert!(Expression::single("").is_err());
        let long = vec!["w"; MAX_TOKENS + 1].join(" ");
        assert!(Expression::single(&long).is_err());
        assert_eq!(Expression::single(&long[2..]).unwrap().len(), MAX_TOKENS);
    }

    #[test]
    fn spans_follow_sentences() {
        let t = |n: usize| DependencyTree {
            forms: vec!["x".into(); n],
            heads: (0..n).collect(),
            deprels: vec!["dep".into(); n],
        };
        let e = Expression::from_trees(&[t(3), t(4)], "").unwrap();
        assert_eq!(e.sentence_spans, vec![(0, 3), (3, 7)]);
    }
}
