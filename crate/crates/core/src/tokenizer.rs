//! Byte-level BPE: training, encode/decode and the text vocab file.
//!
//! Ids 0–3 are PAD, BOS, EOS, MASK; ids 4–259 are the 256 bytes; learned
//! merges follow in training order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
const N_SPECIAL: u32 = 4;
pub const BASE_VOCAB: usize = 260;
pub const DEFAULT_VOCAB: usize = 2_000;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary {0} is below the byte-level minimum of 260")]
    TargetTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trained merge table.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
}

/// Splits text into pre-tokens; a new piece starts at whitespace that
/// follows non-whitespace, so `"a cat"` becomes `["a", " cat"]`. Merges
/// never cross pieces.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if ws && !prev_ws && i > start {
            pieces.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

fn byte_id(b: u8) -> u32 {
    N_SPECIAL + b as u32
}

fn merge_pair(symbols: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl BpeVocab {
    /// Byte-level vocabulary with no merges.
    pub fn bytes_only() -> Self {
        let mut token_bytes = vec![Vec::new(); N_SPECIAL as usize];
        token_bytes.extend((0..=255u8).map(|b| vec![b]));
        Self {
            merges: Vec::new(),
            ranks: HashMap::new(),
            token_bytes,
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.token_bytes.len() as u32;
        let mut bytes = self.token_bytes[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.token_bytes[pair.1 as usize]);
        self.token_bytes.push(bytes);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        id
    }

    /// Learns merges until the vocabulary holds `target_vocab` entries or no
    /// adjacent pair remains. Each round merges the most frequent pair; ties
    /// go to the lexicographically smallest `(left bytes, right bytes)`.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, target_vocab: usize) -> Result<Self, TokenizerError> {
        if target_vocab < BASE_VOCAB {
            return Err(TokenizerError::TargetTooSmall(target_vocab));
        }
        let mut piece_counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for text in corpus {
            any = true;
            for piece in pretokenize(text) {
                *piece_counts.entry(piece).or_default() += 1;
            }
        }
        if !any || piece_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut words: Vec<(Vec<u32>, u64)> = piece_counts
            .into_iter()
            .map(|(p, c)| (p.bytes().map(byte_id).collect(), c))
            .collect();
        words.sort();

        let mut vocab = Self::bytes_only();
        while vocab.token_bytes.len() < target_vocab {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab.token_bytes[pa.0 as usize], &vocab.token_bytes[pa.1 as usize]);
                    let kb = (&vocab.token_bytes[pb.0 as usize], &vocab.token_bytes[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some((pair, _)) = best else { break };
            let id = vocab.push_merge(pair);
            for (syms, _) in &mut words {
                merge_pair(syms, pair, id);
            }
        }
        Ok(vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = piece.bytes().map(byte_id).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(&mut syms, pair, BASE_VOCAB as u32 + rank);
        }
        out.extend(syms);
    }

    /// Token ids without sentinels.
    pub fn encode_plain(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    /// `[BOS] + tokens + [EOS]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        for piece in pretokenize(text) {
            self.encode_piece(piece, &mut out);
        }
        out.push(EOS);
        out
    }

    /// Concatenates the bytes of non-special tokens. Invalid UTF-8 (only
    /// possible for hand-built id sequences) is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tb = self.token_bytes(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.vocab_size(),
            })?;
            bytes.extend_from_slice(tb);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// `BPE v1 <vocab_size>` followed by one `left right` merge per line,
    /// tokens spelled with the printable byte alphabet.
    pub fn to_text(&self) -> String {
        let table = byte_alphabet();
        let spell = |id: u32| -> String { self.token_bytes[id as usize].iter().map(|&b| table[b as usize]).collect() };
        let mut s = format!("BPE v1 {}\n", self.vocab_size());
        for &(l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", spell(l), spell(r));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(TokenizerError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let size: usize = header
            .strip_prefix("BPE v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| TokenizerError::Parse {
                line: 1,
                msg: format!("expected `BPE v1 <vocab_size>`, got `{header}`"),
            })?;
        let table = byte_alphabet();
        let reverse: HashMap<char, u8> = table.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut vocab = Self::bytes_only();
        let mut by_bytes: HashMap<Vec<u8>, u32> = (0..=255u8).map(|b| (vec![b], byte_id(b))).collect();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TokenizerError::Parse { line: lineno, msg };
            let (l, r) = line.split_once(' ').ok_or_else(|| err("expected `left right`".into()))?;
            let unspell = |s: &str| -> Result<u32, TokenizerError> {
                let bytes = s
                    .chars()
                    .map(|c| reverse.get(&c).copied())
                    .collect::<Option<Vec<u8>>>()
                    .ok_or_else(|| err(format!("token `{s}` has characters outside the byte alphabet")))?;
                by_bytes
                    .get(&bytes)
                    .copied()
                    .ok_or_else(|| err(format!("token `{s}` is not defined by earlier merges")))
            };
            let pair = (unspell(l)?, unspell(r)?);
            let id = vocab.push_merge(pair);
            by_bytes.entry(vocab.token_bytes[id as usize].clone()).or_insert(id);
        }
        if vocab.vocab_size() != size {
            return Err(TokenizerError::Parse {
                line: 1,
                msg: format!("header declares {size} tokens but merges define {}", vocab.vocab_size()),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Printable stand-in character for every byte value (the GPT-2 mapping):
/// visible Latin-1 characters map to themselves, the rest to U+0100 onward.
fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    for b in 0..=255u32 {
        let visible = (0x21..=0x7E).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if visible {
            char::from_u32(b).expect("latin-1")
        } else {
            let c = char::from_u32(next).expect("valid code point");
            next += 1;
            c
        };
    }
    table
}
