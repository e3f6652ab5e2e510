//! Word-level vocabulary and entity-marker encoding.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::corpus::RelationExample;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BLANK: u32 = 2;
pub const SU: u32 = 3;
pub const SU_END: u32 = 4;
pub const OB: u32 = 5;
pub const OB_END: u32 = 6;

/// Reserved tokens in id order.
pub const RESERVED: [&str; 7] = ["[PAD]", "[UNK]", "[BLANK]", "[SU]", "[/SU]", "[OB]", "[/OB]"];

/// Markers plus the surrounding context never shrink below this many tokens.
pub const MARKER_COUNT: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("markers and mentions need {needed} tokens but max_len is {max_len}")]
    MarkersDoNotFit { needed: usize, max_len: usize },
    #[error("span {0:?} is outside the context or overlaps the other mention")]
    InvalidSpan((usize, usize)),
    #[error("vocabulary file is malformed: {0}")]
    Malformed(String),
}

/// Lowercases and splits on whitespace; every other non-alphanumeric character
/// becomes its own token.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TokenizerError::Malformed("reserved tokens must come first".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::Malformed("duplicate token".into()));
        }
        Ok(vocab)
    }
}

/// Reserved tokens followed by the `max_size` most frequent context tokens
/// (frequency descending, then lexicographic).
pub fn build_vocab(corpus: &[RelationExample], max_size: usize) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in corpus {
        for tok in pre_tokenize(&ex.context) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size).map(|(t, _)| t))
        .collect();
    Ok(Vocab::from_tokens(tokens))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    /// Token ids padded with [`PAD`] to `max_len`.
    pub ids: Vec<u32>,
    /// Number of tokens before padding.
    pub len: usize,
    pub su_pos: usize,
    pub ob_pos: usize,
    pub subject_masked: bool,
    pub object_masked: bool,
    pub truncated: bool,
}

impl TokenizedExample {
    pub fn unpadded(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

/// Pieces of the context around the two mentions, in document order.
struct Segments<'a> {
    pre: &'a str,
    first: &'a str,
    mid: &'a str,
    second: &'a str,
    post: &'a str,
    subject_first: bool,
}

fn byte_offset(text: &str, char_pos: usize) -> Option<usize> {
    if char_pos == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(char_pos).map(|(b, _)| b)
}

fn segments(ex: &RelationExample) -> Result<Segments<'_>, TokenizerError> {
    let ctx = ex.context.as_str();
    let bytes = |span: (usize, usize)| -> Result<(usize, usize), TokenizerError> {
        match (byte_offset(ctx, span.0), byte_offset(ctx, span.1)) {
            (Some(s), Some(e)) if s < e => Ok((s, e)),
            _ => Err(TokenizerError::InvalidSpan(span)),
        }
    };
    let s = bytes(ex.subject_span)?;
    let o = bytes(ex.object_span)?;
    let subject_first = s.0 < o.0;
    let (a, b) = if subject_first { (s, o) } else { (o, s) };
    if a.1 > b.0 {
        return Err(TokenizerError::InvalidSpan(ex.object_span));
    }
    Ok(Segments {
        pre: &ctx[..a.0],
        first: &ctx[a.0..a.1],
        mid: &ctx[a.1..b.0],
        second: &ctx[b.0..b.1],
        post: &ctx[b.1..],
        subject_first,
    })
}

/// Token count of the unmasked, untruncated encoding, markers included.
pub fn encoded_length(ex: &RelationExample) -> usize {
    match segments(ex) {
        Ok(seg) => {
            [seg.pre, seg.first, seg.mid, seg.second, seg.post]
                .iter()
                .map(|s| pre_tokenize(s).len())
                .sum::<usize>()
                + MARKER_COUNT
        }
        Err(_) => pre_tokenize(&ex.context).len() + MARKER_COUNT,
    }
}

/// Wraps the mentions in marker tokens, blanks each mention with probability
/// `mask_prob`, truncates context (tail, then head, then the gap between the
/// mentions) to fit `max_len`, and pads.
pub fn encode<R: Rng + ?Sized>(
    ex: &RelationExample,
    vocab: &Vocab,
    mask_prob: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<TokenizedExample, TokenizerError> {
    let seg = segments(ex)?;
    let ids = |s: &str| -> Vec<u32> { pre_tokenize(s).iter().map(|t| vocab.id(t)).collect() };

    let subject_masked = rng.gen::<f64>() < mask_prob;
    let object_masked = rng.gen::<f64>() < mask_prob;
    let (first_masked, second_masked) = if seg.subject_first {
        (subject_masked, object_masked)
    } else {
        (object_masked, subject_masked)
    };
    let mention = |s: &str, masked: bool| if masked { vec![BLANK] } else { ids(s) };
    let first = mention(seg.first, first_masked);
    let second = mention(seg.second, second_masked);

    let needed = MARKER_COUNT + first.len() + second.len();
    if needed > max_len {
        return Err(TokenizerError::MarkersDoNotFit { needed, max_len });
    }

    let mut pre = ids(seg.pre);
    let mut mid = ids(seg.mid);
    let mut post = ids(seg.post);
    let mut excess = (needed + pre.len() + mid.len() + post.len()).saturating_sub(max_len);
    let truncated = excess > 0;
    let cut = post.len().min(excess);
    post.truncate(post.len() - cut);
    excess -= cut;
    let cut = pre.len().min(excess);
    pre.drain(..cut);
    excess -= cut;
    let cut = mid.len().min(excess);
    mid.truncate(mid.len() - cut);

    let (open_a, close_a, open_b, close_b) = if seg.subject_first {
        (SU, SU_END, OB, OB_END)
    } else {
        (OB, OB_END, SU, SU_END)
    };
    let mut out = Vec::with_capacity(max_len);
    out.extend(pre);
    let first_pos = out.len();
    out.push(open_a);
    out.extend(first);
    out.push(close_a);
    out.extend(mid);
    let second_pos = out.len();
    out.push(open_b);
    out.extend(second);
    out.push(close_b);
    out.extend(post);
    let len = out.len();
    out.resize(max_len, PAD);

    let (su_pos, ob_pos) = if seg.subject_first {
        (first_pos, second_pos)
    } else {
        (second_pos, first_pos)
    };
    Ok(TokenizedExample {
        ids: out,
        len,
        su_pos,
        ob_pos,
        subject_masked,
        object_masked,
        truncated,
    })
}
