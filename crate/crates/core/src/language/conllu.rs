//! CoNLL-U reading and writing.
//!
//! Only ID, FORM, HEAD and DEPREL are interpreted. Every other column, all
//! comments, multiword ranges and empty nodes are kept verbatim so a
//! document written by [`ConlluDocument::to_conllu`] matches its input.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const COLUMNS: usize = 10;

/// One token with its interpreted fields and the raw columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConlluToken {
    pub id: usize,
    pub form: String,
    /// 0 for the sentence root.
    pub head: usize,
    pub deprel: String,
    columns: Vec<String>,
}

impl ConlluToken {
    /// Builds a token whose uninterpreted columns are `_`.
    pub fn new(id: usize, form: &str, head: usize, deprel: &str) -> Self {
        let mut columns = vec!["_".to_string(); COLUMNS];
        columns[0] = id.to_string();
        columns[1] = form.to_string();
        columns[6] = head.to_string();
        columns[7] = deprel.to_string();
        ConlluToken {
            id,
            form: form.into(),
            head,
            deprel: deprel.into(),
            columns,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Line {
    /// Comments, multiword ranges and empty nodes.
    Verbatim(String),
    Token(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConlluSentence {
    pub tokens: Vec<ConlluToken>,
    lines: Vec<Line>,
}

/// A per-sentence dependency tree: token `i` has id `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyTree {
    pub forms: Vec<String>,
    pub heads: Vec<usize>,
    pub deprels: Vec<String>,
}

impl DependencyTree {
    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    /// Index (0-based) of the token attached to the sentence root.
    pub fn root(&self) -> usize {
        self.heads.iter().position(|&h| h == 0).expect("validated tree has a root")
    }
}

impl ConlluSentence {
    /// Sentence from tokens with an optional `# text = ...` comment.
    pub fn new(tokens: Vec<ConlluToken>, text: Option<&str>) -> Self {
        let mut lines: Vec<Line> = text
            .map(|t| Line::Verbatim(format!("# text = {t}")))
            .into_iter()
            .collect();
        lines.extend((0..tokens.len()).map(Line::Token));
        ConlluSentence { tokens, lines }
    }

    pub fn tree(&self) -> DependencyTree {
        DependencyTree {
            forms: self.tokens.iter().map(|t| t.form.clone()).collect(),
            heads: self.tokens.iter().map(|t| t.head).collect(),
            deprels: self.tokens.iter().map(|t| t.deprel.clone()).collect(),
        }
    }

    fn write(&self, out: &mut String) {
        for line in &self.lines {
            match line {
                Line::Verbatim(s) => out.push_str(s),
                Line::Token(i) => out.push_str(&self.tokens[*i].columns.join("\t")),
            }
            out.push('\n');
        }
        out.push('\n');
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConlluDocument {
    pub sentences: Vec<ConlluSentence>,
}

impl ConlluDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut current: Option<(usize, ConlluSentence, Vec<usize>)> = None;
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            if raw.trim().is_empty() {
                if let Some((start, s, token_lines)) = current.take() {
                    validate(&s, start, &token_lines)?;
                    sentences.push(s);
                }
                continue;
            }
            let (_, sentence, token_lines) = current.get_or_insert_with(|| {
                (line_no, ConlluSentence { tokens: Vec::new(), lines: Vec::new() }, Vec::new())
            });
            if raw.starts_with('#') {
                sentence.lines.push(Line::Verbatim(raw.to_string()));
                continue;
            }
            let columns: Vec<String> = raw.split('\t').map(str::to_string).collect();
            if columns.len() != COLUMNS {
                return Err(Error::Conllu {
                    line: line_no,
                    msg: format!("expected {COLUMNS} tab-separated columns, found {}", columns.len()),
                });
            }
            if columns[0].contains('-') || columns[0].contains('.') {
                sentence.lines.push(Line::Verbatim(raw.to_string()));
                continue;
            }
            let number = |col: usize, what: &str| -> Result<usize> {
                columns[col].parse().map_err(|_| Error::Conllu {
                    line: line_no,
                    msg: format!("{what} `{}` is not a non-negative integer", columns[col]),
                })
            };
            let id = number(0, "ID")?;
            let head = number(6, "HEAD")?;
            if id != sentence.tokens.len() + 1 {
                return Err(Error::Conllu {
                    line: line_no,
                    msg: format!("expected token ID {}, found {id}", sentence.tokens.len() + 1),
                });
            }
            sentence.lines.push(Line::Token(sentence.tokens.len()));
            sentence.tokens.push(ConlluToken {
                id,
                form: columns[1].clone(),
                head,
                deprel: columns[7].clone(),
                columns,
            });
            token_lines.push(line_no);
        }
        if let Some((start, s, token_lines)) = current.take() {
            validate(&s, start, &token_lines)?;
            sentences.push(s);
        }
        Ok(ConlluDocument { sentences })
    }

    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            s.write(&mut out);
        }
        out
    }

    pub fn trees(&self) -> Vec<DependencyTree> {
        self.sentences.iter().map(ConlluSentence::tree).collect()
    }
}

/// Parses a CoNLL-U document into one tree per sentence.
pub fn parse_conllu(text: &str) -> Result<Vec<DependencyTree>> {
    Ok(ConlluDocument::parse(text)?.trees())
}

fn validate(s: &ConlluSentence, start: usize, token_lines: &[usize]) -> Result<()> {
    let n = s.tokens.len();
    if n == 0 {
        return Err(Error::Conllu { line: start, msg: "sentence has no tokens".into() });
    }
    let mut root = None;
    for (i, t) in s.tokens.iter().enumerate() {
        if t.head > n {
            return Err(Error::Conllu {
                line: token_lines[i],
                msg: format!("HEAD {} points past the last token {n}", t.head),
            });
        }
        if t.head == t.id {
            return Err(Error::Conllu { line: token_lines[i], msg: "token is its own head".into() });
        }
        if t.head == 0 {
            if root.is_some() {
                return Err(Error::Conllu { line: token_lines[i], msg: "second token with HEAD 0".into() });
            }
            root = Some(i);
        }
    }
    if root.is_none() {
        return Err(Error::Conllu { line: start, msg: "no token has HEAD 0".into() });
    }
    // With a single root and in-range heads, a token fails to reach the root
    // only through a cycle.
    for i in 0..n {
        let mut at = i + 1;
        let mut steps = 0;
        while at != 0 {
            at = s.tokens[at - 1].head;
            steps += 1;
            if steps > n {
                return Err(Error::Conllu { line: token_lines[i], msg: "HEAD cycle".into() });
            }
        }
    }
    Ok(())
}

/// Writes one sentence per tree with `_` in the uninterpreted columns.
pub fn write_conllu(trees: &[DependencyTree]) -> String {
    let mut out = String::new();
    for tree in trees {
        let text = tree.forms.join(" ");
        let _ = writeln!(out, "# text = {text}");
        for i in 0..tree.len() {
            let t = ConlluToken::new(i + 1, &tree.forms[i], tree.heads[i], &tree.deprels[i]);
            out.push_str(&t.columns.join("\t"));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
