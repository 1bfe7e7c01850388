//! Vocabularies and document encoding.
//!
//! Text is split on whitespace and a trailing `?` becomes its own token, so
//! `"xyz 2 31?"` encodes as `xyz`, `2`, `31`, `?`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::forge::{DatasetBundle, DocKind, Document, Source, Split, Stage, SubsetId};

pub const PAD: u32 = 0;
pub const EOD: u32 = 1;
pub const UNK: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<eod>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            v.push(s);
        }
        for w in words {
            v.push(w);
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len() as u32);
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 of the token list.
    pub fn hash(&self) -> String {
        crate::hash::canonical_hash(&self.tokens)
    }

    /// Ids of `text`; unknown words map to [`UNK`].
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Like [`Vocab::encode_text`] but fails on unknown words.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text)
            .map(|w| self.id(w).ok_or_else(|| CoreError::Tokenizer(format!("`{w}` not in vocabulary (text: {text:?})"))))
            .collect()
    }

    /// Inverse of encoding: specials other than UNK are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == EOD {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIALS[UNK as usize]);
            if !(out.is_empty() || tok == "?") {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            id: usize,
            token: &'a str,
        }
        let mut out = String::new();
        for (id, token) in self.tokens.iter().enumerate() {
            out.push_str(&serde_json::to_string(&Row { id, token }).expect("vocab row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: usize,
            token: String,
        }
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let row: Row = serde_json::from_str(line).map_err(|e| CoreError::ParseAt {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if row.id != i {
                return Err(CoreError::ParseAt {
                    path: origin.to_string(),
                    line: i + 1,
                    message: format!("expected id {i}, found {}", row.id),
                });
            }
            tokens.push(row.token);
        }
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(CoreError::Parse(format!("{origin}: vocabulary must start with {SPECIALS:?}")));
        }
        let v = Vocab::from_words(tokens[3..].iter().map(String::as_str));
        if v.len() != tokens.len() {
            return Err(CoreError::Parse(format!("{origin}: duplicate tokens")));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_jsonl(&text, &path.display().to_string())
    }
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|w| match w.strip_suffix('?') {
        Some(stem) if !stem.is_empty() => [Some(stem), Some("?")],
        _ => [Some(w), None],
    }).flatten()
}

/// One token per tag, per variable, per integer in the value range, plus
/// `Yes`, `No` and `?`.
pub fn build_set_inclusion_vocab(bundle: &DatasetBundle, value_range: u32) -> Vocab {
    let numbers: Vec<String> = (0..value_range).map(|v| v.to_string()).collect();
    let words = bundle
        .tags
        .iter()
        .map(|t| t.surface.as_str())
        .chain(bundle.aliases.iter().map(|a| a.surface.as_str()))
        .chain(numbers.iter().map(String::as_str))
        .chain(["Yes", "No", "?"]);
    Vocab::from_words(words)
}

/// Word-level vocabulary in order of first occurrence.
pub fn build_word_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
    let texts: Vec<&str> = corpus.into_iter().collect();
    Vocab::from_words(texts.iter().flat_map(|t| split_words(t)))
}

/// Vocabulary appropriate for a bundle's source.
pub fn build_vocab(bundle: &DatasetBundle, value_range: u32) -> Vocab {
    match bundle.header.source {
        Source::SetInclusion => build_set_inclusion_vocab(bundle, value_range),
        Source::Cvdb | Source::Trex => {
            build_word_vocab(bundle.documents.iter().filter(|d| d.kind.is_train()).map(|d| d.text.as_str()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDoc {
    /// Token ids padded with [`PAD`] to the maximum length.
    pub ids: Vec<u32>,
    /// True on every non-PAD position.
    pub loss_mask: Vec<bool>,
    /// `[start, end)` token range of the answer (or final definition field).
    pub answer_span: (usize, usize),
    pub subset: SubsetId,
    pub split: Split,
    pub stage: Stage,
    pub entity_id: u32,
    pub kind: DocKind,
}

impl TokenizedDoc {
    /// Number of non-PAD tokens (including EOD).
    pub fn len(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encode a training document: ids, then EOD, then PAD up to `max_len`.
pub fn encode_doc(vocab: &Vocab, doc: &Document, max_len: usize) -> Result<TokenizedDoc> {
    let (prompt, answer) = doc.prompt_and_answer();
    let mut ids = vocab.encode_strict(prompt)?;
    let start = ids.len();
    if let Some(a) = answer {
        ids.extend(vocab.encode_strict(a)?);
    }
    let end = ids.len();
    if ids.len() + 1 > max_len {
        return Err(CoreError::Tokenizer(format!(
            "document of {} tokens (+EOD) exceeds max length {max_len}: {:?}",
            ids.len(),
            doc.text
        )));
    }
    ids.push(EOD);
    let n = ids.len();
    ids.resize(max_len, PAD);
    let loss_mask = (0..max_len).map(|i| i < n).collect();
    Ok(TokenizedDoc {
        ids,
        loss_mask,
        answer_span: if answer.is_some() { (start, end) } else { (end, end) },
        subset: doc.subset,
        split: doc.split,
        stage: doc.stage,
        entity_id: doc.entity_id,
        kind: doc.kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{gen_set_inclusion, ForgeConfig, SetInclusionSpec};

    #[test]
    fn splits_question_marks() {
        let w: Vec<&str> = split_words("xyz 2 31? Yes").collect();
        assert_eq!(w, ["xyz", "2", "31", "?", "Yes"]);
        let w: Vec<&str> = split_words("Q: Who is abc? A:").collect();
        assert_eq!(w, ["Q:", "Who", "is", "abc", "?", "A:"]);
    }

    #[test]
    fn word_vocab_order_and_unk() {
        let v = build_word_vocab(["a b", "b c"]);
        assert_eq!(v.len(), 3 + 3);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("c"), Some(5));
        assert_eq!(v.encode_text("a zz"), vec![3, UNK]);
        assert!(v.encode_strict("zz").is_err());
    }

    #[test]
    fn set_inclusion_vocab_and_encoding() {
        let spec = SetInclusionSpec { variables: 100, ..Default::default() };
        let b = gen_set_inclusion(&ForgeConfig::set_inclusion(spec), 1).unwrap();
        let v = build_set_inclusion_vocab(&b, 100);
        assert_eq!(v.len(), 100 + 100 + 2 + 2 + 1 + 3);
        assert_eq!(v.encode_text("42").len(), 1);
        let qa = b.documents.iter().find(|d| d.kind == DocKind::Qa).unwrap();
        let t = encode_doc(&v, qa, 16).unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(t.ids[11], EOD);
        assert!(t.ids[12..].iter().all(|&i| i == PAD));
        assert_eq!(t.answer_span, (10, 11));
        assert_eq!(v.token(t.ids[10]), qa.gold_answers.as_ref().unwrap().first().map(String::as_str));
        assert_eq!(v.decode(&t.ids), qa.text);
        assert!(encode_doc(&v, qa, 11).is_err());
        let def = b.documents.iter().find(|d| d.kind == DocKind::Definition).unwrap();
        let t = encode_doc(&v, def, 16).unwrap();
        assert_eq!(t.answer_span, (2, 3));
    }

    #[test]
    fn jsonl_round_trip() {
        let v = build_word_vocab(["Q: What is x? A: y"]);
        let back = Vocab::from_jsonl(&v.to_jsonl(), "mem").unwrap();
        assert_eq!(back, v);
        assert!(v.to_jsonl().starts_with("{\"id\":0,\"token\":\"<pad>\"}\n"));
    }
}
