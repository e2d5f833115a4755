//! Byte-level BPE compatible with GPT-2 `vocab.json` / `merges.txt` files.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::textgen::PatternCorpus;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("malformed vocabulary{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    MalformedVocab { line: Option<usize>, message: String },
    #[error("merge on line {line} produces '{token}' which is not in the vocabulary")]
    MergeNotInVocab { line: usize, token: String },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("io error: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, TokenizerError>;

fn malformed(line: Option<usize>, message: impl Into<String>) -> TokenizerError {
    TokenizerError::MalformedVocab {
        line,
        message: message.into(),
    }
}

/// The reversible byte to printable-char table used by GPT-2.
pub fn byte_encoder() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            b as char
        } else {
            let c = char::from_u32(256 + extra).expect("valid code point");
            extra += 1;
            c
        };
    }
    table
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> rank
    merge_ids: HashMap<(u32, u32), u32>,
    /// (left id, right id, merged id) by rank
    merge_table: Vec<(u32, u32, u32)>,
    byte_ids: [u32; 256],
    byte_decoder: HashMap<char, u8>,
}

const TINY_VOCAB: &str = include_str!("../data/tiny_vocab.json");
const TINY_MERGES: &str = include_str!("../data/tiny_merges.txt");

impl BpeVocab {
    /// Builds a vocabulary from the text of a `vocab.json` and a `merges.txt`.
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let raw: HashMap<String, i64> =
            serde_json::from_str(vocab_json).map_err(|e| malformed(Some(e.line()), e.to_string()))?;
        let mut id_to_token = vec![None; raw.len()];
        for (tok, &id) in &raw {
            if id < 0 || id as usize >= raw.len() {
                return Err(malformed(None, format!("id {id} of '{tok}' outside 0..{}", raw.len())));
            }
            if let Some(prev) = id_to_token[id as usize].replace(tok.clone()) {
                return Err(malformed(
                    None,
                    format!("id {id} assigned to both '{prev}' and '{tok}'"),
                ));
            }
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.expect("dense ids")).collect();
        let token_to_id: HashMap<String, u32> = raw.into_iter().map(|(k, v)| (k, v as u32)).collect();

        let encoder = byte_encoder();
        let mut byte_ids = [0u32; 256];
        for (b, c) in encoder.iter().enumerate() {
            byte_ids[b] = *token_to_id
                .get(&c.to_string())
                .ok_or_else(|| malformed(None, format!("missing byte token '{c}' for byte {b}")))?;
        }
        let byte_decoder = encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();

        let mut merges = Vec::new();
        let mut merge_ids = HashMap::new();
        let mut merge_table = Vec::new();
        for (i, line) in merges_txt.lines().enumerate() {
            let lineno = i + 1;
            if (i == 0 && line.starts_with("#version")) || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(malformed(Some(lineno), format!("expected two symbols, got '{line}'")));
            };
            let lookup = |s: &str| {
                token_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| TokenizerError::MergeNotInVocab {
                        line: lineno,
                        token: s.to_string(),
                    })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            let joined = format!("{a}{b}");
            let merged = lookup(&joined)?;
            let rank = merges.len() as u32;
            merge_ids.entry((ia, ib)).or_insert(rank);
            merge_table.push((ia, ib, merged));
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            merge_ids,
            merge_table,
            byte_ids,
            byte_decoder,
        })
    }

    pub fn load(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let read =
            |p: &Path| std::fs::read_to_string(p).map_err(|e| TokenizerError::Io(format!("{}: {e}", p.display())));
        Self::from_strs(&read(vocab_path.as_ref())?, &read(merges_path.as_ref())?)
    }

    /// The first 300 GPT-2 merges over the 256 byte tokens. Ids agree with
    /// the full GPT-2 vocabulary for every token it contains.
    pub fn tiny() -> Self {
        Self::from_strs(TINY_VOCAB, TINY_MERGES).expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Rank of the merge producing `left + right`, if any.
    pub fn merge_rank(&self, left: u32, right: u32) -> Option<u32> {
        self.merge_ids.get(&(left, right)).copied()
    }

    /// BPE on a single pre-tokenized word.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols: Vec<u32> = word.bytes().map(|b| self.byte_ids[b as usize]).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ids.get(&(w[0], w[1])))
                .min();
            let Some(&rank) = best else { break };
            let (left, right, merged) = self.merge_table[rank as usize];
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .into_iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::UnknownId(id))?;
            for c in tok.chars() {
                // special tokens such as <|endoftext|> are spelled in plain ASCII
                match self.byte_decoder.get(&c) {
                    Some(&b) => out.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Decodes ids to text, replacing invalid UTF-8 sequences.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn cached_encoder(&self) -> CachedEncoder<'_> {
        CachedEncoder {
            vocab: self,
            cache: HashMap::new(),
        }
    }
}

/// Memoizes word-level BPE. Rendered corpora reuse a small set of words.
pub struct CachedEncoder<'a> {
    vocab: &'a BpeVocab,
    cache: HashMap<String, Vec<u32>>,
}

impl CachedEncoder<'_> {
    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in pretokenize(text) {
            if let Some(ids) = self.cache.get(w) {
                out.extend_from_slice(ids);
            } else {
                let ids = self.vocab.encode_word(w);
                out.extend_from_slice(&ids);
                self.cache.insert(w.to_string(), ids);
            }
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Space,
    Other,
}

fn classify(c: char) -> Class {
    use GeneralCategory::*;
    if c.is_whitespace() {
        return Class::Space;
    }
    match get_general_category(c) {
        UppercaseLetter | LowercaseLetter | TitlecaseLetter | ModifierLetter | OtherLetter => Class::Letter,
        DecimalNumber | LetterNumber | OtherNumber => Class::Number,
        _ => Class::Other,
    }
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Splits text the way the GPT-2 pattern
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
/// does.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let run = |mut i: usize, class: Class| {
        while i < chars.len() && classify(chars[i].1) == class {
            i += 1;
        }
        i
    };
    let mut words = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let rest = &text[start..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(*c)) {
            let n = c.chars().count();
            words.push(&text[start..end_of(i + n)]);
            i += n;
            continue;
        }
        let c = chars[i].1;
        let (lead, class) = if c == ' ' && i + 1 < chars.len() {
            (1, classify(chars[i + 1].1))
        } else {
            (0, classify(c))
        };
        let j = if class != Class::Space {
            run(i + lead, class)
        } else {
            let j = run(i, Class::Space);
            if j == chars.len() || j - i == 1 {
                j
            } else {
                // leave the last space to prefix the next word
                j - 1
            }
        };
        words.push(&text[start..end_of(j)]);
        i = j;
    }
    words
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMetrics {
    /// Text sizes in characters.
    pub total_text_size: usize,
    pub train_text_size: usize,
    pub test_text_size: usize,
    pub total_text_bytes: usize,
    pub train_text_bytes: usize,
    pub test_text_bytes: usize,
    pub total_tokens: usize,
    pub train_tokens: usize,
    pub test_tokens: usize,
}

pub fn count_metrics(train: &PatternCorpus, test: &PatternCorpus, vocab: &BpeVocab) -> TokenMetrics {
    let mut encoder = vocab.cached_encoder();
    let mut split = |c: &PatternCorpus| {
        c.records.iter().fold((0, 0, 0), |(chars, bytes, tokens), r| {
            (
                chars + r.text.chars().count(),
                bytes + r.text.len(),
                tokens + encoder.encode(&r.text).len(),
            )
        })
    };
    let (train_chars, train_bytes, train_tokens) = split(train);
    let (test_chars, test_bytes, test_tokens) = split(test);
    TokenMetrics {
        total_text_size: train_chars + test_chars,
        train_text_size: train_chars,
        test_text_size: test_chars,
        total_text_bytes: train_bytes + test_bytes,
        train_text_bytes: train_bytes,
        test_text_bytes: test_bytes,
        total_tokens: train_tokens + test_tokens,
        train_tokens,
        test_tokens,
    }
}
