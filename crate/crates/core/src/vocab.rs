//! Common-token correspondence between two tokenizers.
//!
//! Tokens are compared by the raw bytes they stand for, after undoing the
//! printable remapping used by byte-level BPE vocabularies or the `▁` space
//! marker and `<0xNN>` byte tokens used by SentencePiece vocabularies.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::Matrix;

/// Surface-form convention of a vocabulary file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEncoding {
    /// Tokens are literal UTF-8 text.
    Plain,
    /// GPT-2 style byte-to-printable-character table.
    ByteLevel,
    /// `▁` marks a space and `<0xNN>` denotes a raw byte.
    SentencePiece,
}

/// GPT-2 printable-character table: byte -> char.
fn byte_to_char() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u8 {
            let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
            table[b as usize] = if printable {
                char::from(b)
            } else {
                extra += 1;
                char::from_u32(255 + extra).unwrap()
            };
        }
        table
    })
}

fn char_to_byte() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_to_char()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

fn decode_byte_level(token: &str) -> Option<Vec<u8>> {
    let table = char_to_byte();
    token.chars().map(|c| table.get(&c).copied()).collect()
}

fn decode_sentencepiece(token: &str) -> Vec<u8> {
    let bytes = token.as_bytes();
    if bytes.len() == 6 && token.starts_with("<0x") && token.ends_with('>') {
        if let Ok(b) = u8::from_str_radix(&token[3..5], 16) {
            return vec![b];
        }
    }
    token.replace('\u{2581}', " ").into_bytes()
}

/// Guesses the encoding from the token strings.
pub fn detect_encoding<'a>(tokens: impl IntoIterator<Item = &'a str>) -> TokenEncoding {
    let (mut total, mut byte_decodable, mut byte_markers, mut sp_markers) = (0usize, 0usize, 0usize, 0usize);
    for t in tokens {
        total += 1;
        if decode_byte_level(t).is_some() {
            byte_decodable += 1;
        }
        if t.contains('\u{0120}') || t.contains('\u{010A}') {
            byte_markers += 1;
        }
        if t.contains('\u{2581}') {
            sp_markers += 1;
        }
    }
    if total == 0 {
        return TokenEncoding::Plain;
    }
    if byte_markers > 0 && byte_decodable * 100 >= total * 95 {
        TokenEncoding::ByteLevel
    } else if sp_markers > 0 && sp_markers * 100 >= total {
        TokenEncoding::SentencePiece
    } else {
        TokenEncoding::Plain
    }
}

/// Maps a token string to the bytes it represents under `encoding`.
pub fn normalize_token(token: &str, encoding: TokenEncoding) -> Vec<u8> {
    match encoding {
        TokenEncoding::Plain => token.as_bytes().to_vec(),
        TokenEncoding::ByteLevel => {
            decode_byte_level(token).unwrap_or_else(|| token.as_bytes().to_vec())
        }
        TokenEncoding::SentencePiece => decode_sentencepiece(token),
    }
}

#[derive(Clone, Debug)]
pub struct VocabMap {
    token_to_id: HashMap<String, usize>,
    by_bytes: HashMap<Vec<u8>, usize>,
    size: usize,
    encoding: TokenEncoding,
}

impl VocabMap {
    /// Builds a map with automatic encoding detection.
    pub fn new(entries: impl IntoIterator<Item = (String, usize)>) -> Result<Self> {
        let entries: Vec<(String, usize)> = entries.into_iter().collect();
        let encoding = detect_encoding(entries.iter().map(|(t, _)| t.as_str()));
        Self::with_encoding(entries, encoding)
    }

    pub fn with_encoding(
        entries: impl IntoIterator<Item = (String, usize)>,
        encoding: TokenEncoding,
    ) -> Result<Self> {
        let mut token_to_id = HashMap::new();
        let mut seen_ids = HashMap::new();
        for (token, id) in entries {
            if let Some(prev) = seen_ids.insert(id, token.clone()) {
                if prev != token {
                    return Err(Error::InvalidVocab(format!(
                        "id {id} assigned to both {prev:?} and {token:?}"
                    )));
                }
            }
            if let Some(old) = token_to_id.insert(token.clone(), id) {
                if old != id {
                    return Err(Error::InvalidVocab(format!(
                        "token {token:?} has ids {old} and {id}"
                    )));
                }
            }
        }
        let size = seen_ids.keys().max().map_or(0, |m| m + 1);

        // Two surface forms may denote the same bytes; the smaller id wins.
        let mut by_bytes: HashMap<Vec<u8>, usize> = HashMap::new();
        for (token, &id) in &token_to_id {
            by_bytes
                .entry(normalize_token(token, encoding))
                .and_modify(|cur| *cur = (*cur).min(id))
                .or_insert(id);
        }
        Ok(VocabMap { token_to_id, by_bytes, size, encoding })
    }

    /// Reads either a plain `{token: id}` object or a combined tokenizer
    /// document whose `model.vocab` is an object or an array, together with
    /// its `added_tokens`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let entries = match &root {
            Value::Object(obj) if obj.contains_key("model") => {
                let mut entries = vocab_entries(&obj["model"]["vocab"])?;
                if let Some(Value::Array(added)) = obj.get("added_tokens") {
                    for t in added {
                        let content = t["content"].as_str();
                        let id = t["id"].as_u64();
                        match (content, id) {
                            (Some(c), Some(id)) => entries.push((c.to_string(), id as usize)),
                            _ => return Err(Error::InvalidVocab("malformed added_tokens entry".into())),
                        }
                    }
                }
                entries
            }
            other => vocab_entries(other)?,
        };
        Self::new(entries)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Vocabulary of `n` synthetic tokens `"tok{i}"`, used when both models
    /// share one tokenizer.
    pub fn identity(n: usize) -> Self {
        Self::with_encoding((0..n).map(|i| (format!("tok{i}"), i)), TokenEncoding::Plain)
            .expect("synthetic vocabulary is injective")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn encoding(&self) -> TokenEncoding {
        self.encoding
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_for_bytes(&self, bytes: &[u8]) -> Option<usize> {
        self.by_bytes.get(bytes).copied()
    }
}

fn vocab_entries(v: &Value) -> Result<Vec<(String, usize)>> {
    match v {
        Value::Object(map) => map
            .iter()
            .map(|(k, id)| {
                id.as_u64()
                    .map(|id| (k.clone(), id as usize))
                    .ok_or_else(|| Error::InvalidVocab(format!("id of {k:?} is not an integer")))
            })
            .collect(),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let token = match item {
                    Value::String(s) => Some(s.clone()),
                    Value::Array(pair) => pair.first().and_then(Value::as_str).map(str::to_string),
                    _ => None,
                };
                token
                    .map(|t| (t, i))
                    .ok_or_else(|| Error::InvalidVocab(format!("vocab entry {i} has no token string")))
            })
            .collect(),
        _ => Err(Error::InvalidVocab("vocabulary must be an object or an array".into())),
    }
}

/// Index pairs of tokens present in both vocabularies, ordered by the id in A.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIntersection {
    pub pairs: Vec<(usize, usize)>,
    pub count: usize,
}

impl TokenIntersection {
    pub fn identity(n: usize) -> Self {
        TokenIntersection { pairs: (0..n).map(|i| (i, i)).collect(), count: n }
    }

    pub fn ids_a(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn ids_b(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn swapped(&self) -> Self {
        let mut pairs: Vec<_> = self.pairs.iter().map(|&(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        TokenIntersection { pairs, count: self.count }
    }
}

pub fn intersect_vocabs(a: &VocabMap, b: &VocabMap) -> TokenIntersection {
    let mut pairs: Vec<(usize, usize)> = a
        .by_bytes
        .iter()
        .filter_map(|(bytes, &ia)| b.by_bytes.get(bytes).map(|&ib| (ia, ib)))
        .collect();
    pairs.sort_unstable();
    let count = pairs.len();
    TokenIntersection { pairs, count }
}

pub fn select_rows(e: &Matrix, ids: &[usize]) -> Result<Matrix> {
    e.select_rows(ids)
}

/// Outcome of the overlap-size check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapQuality {
    Adequate,
    /// At least `emb_dim` but fewer than four times that many pairs.
    Marginal,
}

pub const OVERLAP_SAFETY_FACTOR: usize = 4;

pub fn check_overlap(count: usize, emb_dim: usize) -> Result<OverlapQuality> {
    if count < emb_dim {
        return Err(Error::InsufficientOverlap { found: count, required: emb_dim });
    }
    if count < OVERLAP_SAFETY_FACTOR * emb_dim {
        log::warn!(
            "only {count} common tokens for embedding width {emb_dim}; alignment may be poorly conditioned"
        );
        return Ok(OverlapQuality::Marginal);
    }
    Ok(OverlapQuality::Adequate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(tokens: &[&str]) -> VocabMap {
        VocabMap::with_encoding(
            tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i)),
            TokenEncoding::Plain,
        )
        .unwrap()
    }

    #[test]
    fn self_intersection_is_identity() {
        let v = VocabMap::identity(32);
        let x = intersect_vocabs(&v, &v);
        assert_eq!(x.count, 32);
        assert_eq!(x, TokenIntersection::identity(32));
    }

    #[test]
    fn disjoint() {
        let x = intersect_vocabs(&plain(&["a", "b"]), &plain(&["c", "d"]));
        assert_eq!(x.count, 0);
        assert!(x.pairs.is_empty());
    }

    #[test]
    fn pairs_sorted_by_a() {
        let a = plain(&["x", "y", "z"]);
        let b = plain(&["z", "q", "x"]);
        let x = intersect_vocabs(&a, &b);
        assert_eq!(x.pairs, vec![(0, 2), (2, 0)]);
        assert_eq!(intersect_vocabs(&b, &a), x.swapped());
    }

    #[test]
    fn byte_level_space_matches_sentencepiece_space() {
        let bl = VocabMap::with_encoding(
            [("\u{0120}the".to_string(), 0), ("a".to_string(), 1)],
            TokenEncoding::ByteLevel,
        )
        .unwrap();
        let sp = VocabMap::with_encoding(
            [("\u{2581}the".to_string(), 7), ("<0x61>".to_string(), 3)],
            TokenEncoding::SentencePiece,
        )
        .unwrap();
        assert_eq!(intersect_vocabs(&bl, &sp).pairs, vec![(0, 7), (1, 3)]);
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = byte_to_char();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], '\u{0120}');
        assert_eq!(t[b'\n' as usize], '\u{010A}');
        assert_eq!(t[b'A' as usize], 'A');
    }

    #[test]
    fn detects_encodings() {
        assert_eq!(detect_encoding(["\u{0120}hello", "world"]), TokenEncoding::ByteLevel);
        assert_eq!(detect_encoding(["\u{2581}hello", "world"]), TokenEncoding::SentencePiece);
        assert_eq!(detect_encoding(["hello", "world"]), TokenEncoding::Plain);
    }

    #[test]
    fn tokenizer_json_forms() {
        let obj = r#"{"model":{"vocab":{"a":0,"b":1}},"added_tokens":[{"id":2,"content":"<s>"}]}"#;
        let v = VocabMap::from_json_str(obj).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.id("<s>"), Some(2));
        let arr = r#"{"model":{"vocab":[["a",0.0],["b",-1.5]]}}"#;
        let v = VocabMap::from_json_str(arr).unwrap();
        assert_eq!(v.id("b"), Some(1));
        let flat = r#"{"a":0,"b":1}"#;
        assert_eq!(VocabMap::from_json_str(flat).unwrap().len(), 2);
    }

    #[test]
    fn duplicate_id_is_invalid() {
        let r = VocabMap::with_encoding(
            [("a".to_string(), 0), ("b".to_string(), 0)],
            TokenEncoding::Plain,
        );
        assert!(matches!(r, Err(Error::InvalidVocab(_))));
    }

    #[test]
    fn row_selection() {
        let e = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(select_rows(&e, &[0, 1, 2]).unwrap(), e);
        let s = select_rows(&e, &[2, 0]).unwrap();
        assert_eq!(s.row(0), e.row(2));
        assert_eq!(s.row(1), e.row(0));
        let e4 = Matrix::zeros(4, 2);
        assert!(matches!(
            select_rows(&e4, &[5]),
            Err(Error::IndexOutOfRange { index: 5, bound: 4 })
        ));
    }

    #[test]
    fn overlap_thresholds() {
        assert!(matches!(check_overlap(7, 8), Err(Error::InsufficientOverlap { .. })));
        assert_eq!(check_overlap(8, 8).unwrap(), OverlapQuality::Marginal);
        assert_eq!(check_overlap(32, 8).unwrap(), OverlapQuality::Adequate);
    }
}
