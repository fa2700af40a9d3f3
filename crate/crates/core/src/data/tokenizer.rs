use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTE_VOCAB_SIZE: usize = 259;
pub const BYTE_PAD_ID: u32 = 256;
pub const BYTE_END_ID: u32 = 257;
pub const BYTE_UNK_ID: u32 = 258;

/// First line of a vocabulary file that selects the byte-level tokenizer.
pub const BYTE_FALLBACK_MARKER: &str = "byte-fallback";

const WORD_BOUNDARY: char = '\u{2581}';

/// Where the vocabulary comes from and how text is segmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Unigram vocabulary (`piece<TAB>score` per line); `None` selects bytes.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "yes")]
    pub split_digits: bool,
    #[serde(default = "yes")]
    pub byte_fallback: bool,
}

fn yes() -> bool {
    true
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab: None, split_digits: true, byte_fallback: true }
    }
}

#[derive(Debug, Clone)]
struct Unigram {
    pieces: Vec<String>,
    scores: Vec<f64>,
    lookup: HashMap<String, u32>,
    byte_ids: Option<[u32; 256]>,
    unk_id: u32,
    max_chars: usize,
    min_score: f64,
}

#[derive(Debug, Clone)]
enum Kind {
    Bytes,
    Unigram(Box<Unigram>),
}

/// Text ↔ id conversion. Every encoded sample ends with one `end_id`.
#[derive(Debug, Clone)]
pub struct TokenizerHandle {
    kind: Kind,
    pad_id: u32,
    end_id: u32,
    split_digits: bool,
    byte_fallback: bool,
}

impl TokenizerHandle {
    /// 256 byte ids followed by pad, end and unknown.
    pub fn byte_level() -> Self {
        Self { kind: Kind::Bytes, pad_id: BYTE_PAD_ID, end_id: BYTE_END_ID, split_digits: true, byte_fallback: true }
    }

    pub fn from_config(cfg: &TokenizerConfig) -> Result<Self> {
        match &cfg.vocab {
            None => Ok(Self::byte_level()),
            Some(p) => Self::load(p, cfg.split_digits, cfg.byte_fallback),
        }
    }

    pub fn load(path: &Path, split_digits: bool, byte_fallback: bool) -> Result<Self> {
        let raw =
            fs::read_to_string(path).map_err(|e| Error::Tokenizer(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_vocab(&raw, split_digits, byte_fallback)
    }

    /// Parses `piece<TAB>score` lines; ids follow line order.
    pub fn parse_vocab(raw: &str, split_digits: bool, byte_fallback: bool) -> Result<Self> {
        if raw.lines().next().map(str::trim) == Some(BYTE_FALLBACK_MARKER) {
            return Ok(Self::byte_level());
        }
        let mut pieces = Vec::new();
        let mut scores = Vec::new();
        for (n, line) in raw.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (piece, score) = match line.split_once('\t') {
                Some((p, s)) => (
                    p,
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Tokenizer(format!("line {}: bad score `{s}`", n + 1)))?,
                ),
                None => return Err(Error::Tokenizer(format!("line {}: expected piece<TAB>score", n + 1))),
            };
            pieces.push(piece.to_string());
            scores.push(score);
        }
        if pieces.len() > u32::MAX as usize {
            return Err(Error::Tokenizer("vocabulary exceeds the 32-bit id range".into()));
        }
        let mut lookup = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            if lookup.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate piece `{p}`")));
            }
        }
        let find = |names: &[&str]| names.iter().find_map(|n| lookup.get(*n).copied());
        let pad_id = find(&["[PAD]", "<pad>"]).ok_or_else(|| Error::Tokenizer("no [PAD] piece".into()))?;
        let end_id = find(&["[END]", "</s>"]).ok_or_else(|| Error::Tokenizer("no [END] piece".into()))?;
        let unk_id = find(&["<unk>", "[UNK]"]).ok_or_else(|| Error::Tokenizer("no <unk> piece".into()))?;
        let mut byte_ids = [0u32; 256];
        let mut have_bytes = true;
        for (b, slot) in byte_ids.iter_mut().enumerate() {
            match lookup.get(&format!("<0x{b:02X}>")) {
                Some(&id) => *slot = id,
                None => have_bytes = false,
            }
        }
        let specials = [pad_id, end_id, unk_id];
        let normal =
            |i: usize| !specials.contains(&(i as u32)) && !(pieces[i].starts_with("<0x") && pieces[i].len() == 6);
        let max_chars = (0..pieces.len()).filter(|&i| normal(i)).map(|i| pieces[i].chars().count()).max().unwrap_or(1);
        let min_score = (0..pieces.len()).filter(|&i| normal(i)).map(|i| scores[i]).fold(0.0, f64::min);
        Ok(Self {
            kind: Kind::Unigram(Box::new(Unigram {
                pieces,
                scores,
                lookup,
                byte_ids: have_bytes.then_some(byte_ids),
                unk_id,
                max_chars,
                min_score,
            })),
            pad_id,
            end_id,
            split_digits,
            byte_fallback,
        })
    }

    pub fn vocab_size(&self) -> usize {
        match &self.kind {
            Kind::Bytes => BYTE_VOCAB_SIZE,
            Kind::Unigram(u) => u.pieces.len(),
        }
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn end_id(&self) -> u32 {
        self.end_id
    }

    pub fn is_byte_level(&self) -> bool {
        matches!(self.kind, Kind::Bytes)
    }

    /// Ids of `text` followed by one end token.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode_plain(text)?;
        ids.push(self.end_id);
        Ok(ids)
    }

    /// Ids of `text` without the end token (prompts).
    pub fn encode_plain(&self, text: &str) -> Result<Vec<u32>> {
        let ids = match &self.kind {
            Kind::Bytes => text.bytes().map(u32::from).collect(),
            Kind::Unigram(u) => self.viterbi(u, text),
        };
        let n = self.vocab_size();
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= n) {
            return Err(Error::Tokenizer(format!("id {bad} outside vocabulary of {n}")));
        }
        Ok(ids)
    }

    fn viterbi(&self, u: &Unigram, text: &str) -> Vec<u32> {
        if text.is_empty() {
            return Vec::new();
        }
        let normalized: String = std::iter::once(WORD_BOUNDARY)
            .chain(text.chars().map(|c| if c == ' ' { WORD_BOUNDARY } else { c }))
            .collect();
        let bounds: Vec<usize> = normalized.char_indices().map(|(i, _)| i).chain([normalized.len()]).collect();
        let n = bounds.len() - 1;
        let fallback_score = u.min_score - 10.0;
        // best[i]: (score, start char, piece id or None for a fallback char)
        let mut best: Vec<(f64, usize, Option<u32>)> = vec![(f64::NEG_INFINITY, 0, None); n + 1];
        best[0].0 = 0.0;
        for start in 0..n {
            let base = best[start].0;
            if base == f64::NEG_INFINITY {
                continue;
            }
            for len in 1..=u.max_chars.min(n - start) {
                let end = start + len;
                let s = &normalized[bounds[start]..bounds[end]];
                if self.split_digits && len > 1 && s.chars().any(|c| c.is_ascii_digit()) {
                    continue;
                }
                if let Some(&id) = u.lookup.get(s) {
                    let cand = base + u.scores[id as usize];
                    if cand > best[end].0 {
                        best[end] = (cand, start, Some(id));
                    }
                }
            }
            let cand = base + fallback_score;
            if cand > best[start + 1].0 {
                best[start + 1] = (cand, start, None);
            }
        }
        let mut segments = Vec::new();
        let mut end = n;
        while end > 0 {
            let (_, start, id) = best[end];
            segments.push((start, end, id));
            end = start;
        }
        segments.reverse();
        let mut ids = Vec::new();
        for (start, end, id) in segments {
            match id {
                Some(id) => ids.push(id),
                None => {
                    let s = &normalized[bounds[start]..bounds[end]];
                    match (&u.byte_ids, self.byte_fallback) {
                        (Some(bytes), true) => ids.extend(s.bytes().map(|b| bytes[b as usize])),
                        _ => ids.push(u.unk_id),
                    }
                }
            }
        }
        ids
    }

    /// Text of `ids`; pad and end tokens are dropped, invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let n = self.vocab_size();
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= n) {
            return Err(Error::Tokenizer(format!("id {bad} outside vocabulary of {n}")));
        }
        let kept = ids.iter().copied().filter(|&i| i != self.pad_id && i != self.end_id);
        match &self.kind {
            Kind::Bytes => {
                let bytes: Vec<u8> = kept.filter(|&i| i < 256).map(|i| i as u8).collect();
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Kind::Unigram(u) => {
                let mut bytes = Vec::new();
                for id in kept {
                    let p = &u.pieces[id as usize];
                    match p.strip_prefix("<0x").and_then(|h| h.strip_suffix('>')) {
                        Some(hex) if hex.len() == 2 => {
                            bytes.push(u8::from_str_radix(hex, 16).unwrap_or(b'?'));
                        }
                        _ if id == u.unk_id => bytes.extend_from_slice(" \u{2047} ".as_bytes()),
                        _ => bytes.extend_from_slice(p.as_bytes()),
                    }
                }
                let s = String::from_utf8_lossy(&bytes).replace(WORD_BOUNDARY, " ");
                Ok(s.strip_prefix(' ').unwrap_or(&s).to_string())
            }
        }
    }
}
