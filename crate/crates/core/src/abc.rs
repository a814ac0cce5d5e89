// SPDX-License-Identifier: MIT OR Apache-2.0

//! ABC notation tokenizer, token classes and structural validation.
//!
//! The tokenizer splits a score into single musical symbols: one note letter
//! (with its octave marks), one duration run, one barline glyph, and so on.
//! Every byte of the input lands in exactly one token, so
//! `detokenize(tokenize(s)) == s` for every accepted input.
//!
//! Lines of the form `<letter>:<value>` are header fields and `%` starts a
//! comment that runs to the end of the line. Everything else is tune body and
//! must be made of recognised glyphs; anything else is rejected with the byte
//! offset where scanning stopped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbcError {
    #[error("unrecognized input {snippet:?} at byte offset {offset}")]
    RejectedInput { offset: usize, snippet: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    HeaderField,
    Barline,
    Note,
    Rest,
    Duration,
    Accidental,
    Chord,
    Decoration,
    Whitespace,
    Other,
}

/// Whether the steering gate may touch a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Format,
    Content,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Self {
        Token {
            text: text.into(),
            kind,
        }
    }

    pub fn class(&self) -> TokenClass {
        classify_token(self)
    }
}

/// Tokenized score together with the text it was produced from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub source_text: String,
}

impl TokenSequence {
    /// Builds a sequence from tokens, recomputing `source_text`.
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        let source_text = tokens.iter().map(|t| t.text.as_str()).collect();
        TokenSequence {
            tokens,
            source_text,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.tokens.iter()
    }
}

pub fn classify_token(token: &Token) -> TokenClass {
    match token.kind {
        TokenKind::Note
        | TokenKind::Rest
        | TokenKind::Duration
        | TokenKind::Accidental
        | TokenKind::Chord
        | TokenKind::Decoration => TokenClass::Content,
        TokenKind::HeaderField | TokenKind::Barline | TokenKind::Whitespace | TokenKind::Other => {
            TokenClass::Format
        }
    }
}

/// Kind of a token text as the tokenizer would produce it, if `text` is
/// exactly one token.
pub fn kind_of(text: &str) -> Option<TokenKind> {
    match tokenize(text) {
        Ok(seq) if seq.tokens.len() == 1 => Some(seq.tokens[0].kind),
        _ => None,
    }
}

pub fn detokenize(seq: &TokenSequence) -> String {
    seq.tokens.iter().map(|t| t.text.as_str()).collect()
}

const DECORATION_CHARS: &[u8] = b"~.HLMOPSTuv";

fn is_note_letter(b: u8) -> bool {
    matches!(b, b'A'..=b'G' | b'a'..=b'g')
}

fn is_field_line(bytes: &[u8], at: usize) -> bool {
    // `C:|` is a note followed by a repeat, not a field.
    bytes.len() > at + 1
        && bytes[at].is_ascii_alphabetic()
        && bytes[at + 1] == b':'
        && !matches!(bytes.get(at + 2), Some(b'|') | Some(b':'))
}

fn line_end(bytes: &[u8], from: usize) -> usize {
    bytes[from..]
        .iter()
        .position(|&b| b == b'\n' || b == b'\r')
        .map_or(bytes.len(), |p| from + p)
}

/// Position just past the first `close` on the current line, or the line end.
fn scan_closed(bytes: &[u8], from: usize, close: u8) -> usize {
    let end = line_end(bytes, from);
    bytes[from..end]
        .iter()
        .position(|&b| b == close)
        .map_or(end, |p| from + p + 1)
}

pub fn tokenize(text: &str) -> Result<TokenSequence, AbcError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line_start = true;

    while i < bytes.len() {
        let b = bytes[i];
        let (end, kind) = if line_start && is_field_line(bytes, i) {
            (line_end(bytes, i), TokenKind::HeaderField)
        } else if b == b'%' {
            (line_end(bytes, i), TokenKind::HeaderField)
        } else if b == b'\n' {
            (i + 1, TokenKind::Whitespace)
        } else if b == b'\r' {
            let end = if bytes.get(i + 1) == Some(&b'\n') { i + 2 } else { i + 1 };
            (end, TokenKind::Whitespace)
        } else if b == b' ' || b == b'\t' {
            let mut j = i;
            while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t') {
                j += 1;
            }
            (j, TokenKind::Whitespace)
        } else if b == b'|' || (b == b':' && matches!(bytes.get(i + 1), Some(b'|') | Some(b':'))) {
            (scan_barline(bytes, i), TokenKind::Barline)
        } else if b == b'[' {
            match bytes.get(i + 1) {
                Some(b'|') => (scan_barline(bytes, i + 1), TokenKind::Barline),
                Some(d) if d.is_ascii_digit() => (i + 2, TokenKind::Barline),
                Some(&c) if c.is_ascii_alphabetic() && bytes.get(i + 2) == Some(&b':') => {
                    (scan_closed(bytes, i + 1, b']'), TokenKind::HeaderField)
                }
                _ => (scan_closed(bytes, i + 1, b']'), TokenKind::Chord),
            }
        } else if matches!(b, b'^' | b'_' | b'=') {
            let mut j = i + 1;
            if b != b'=' && bytes.get(j) == Some(&b) {
                j += 1;
            }
            (j, TokenKind::Accidental)
        } else if is_note_letter(b) {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j] == b',' || bytes[j] == b'\'') {
                j += 1;
            }
            (j, TokenKind::Note)
        } else if matches!(b, b'z' | b'Z' | b'x') {
            (i + 1, TokenKind::Rest)
        } else if b.is_ascii_digit() || b == b'/' {
            let mut j = i;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'/') {
                j += 1;
            }
            (j, TokenKind::Duration)
        } else if b == b'!' || b == b'+' {
            (scan_closed(bytes, i + 1, b), TokenKind::Decoration)
        } else if DECORATION_CHARS.contains(&b) {
            (i + 1, TokenKind::Decoration)
        } else if b == b'"' {
            (scan_closed(bytes, i + 1, b'"'), TokenKind::Other)
        } else if b == b'(' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            (j, TokenKind::Other)
        } else if matches!(b, b')' | b'-' | b'>' | b'<' | b'{' | b'}' | b'\\' | b'y' | b'`' | b']') {
            (i + 1, TokenKind::Other)
        } else {
            let snippet: String = text[i..].chars().take(8).collect();
            return Err(AbcError::RejectedInput { offset: i, snippet });
        };
        tokens.push(Token::new(&text[i..end], kind));
        line_start = matches!(bytes[end - 1], b'\n' | b'\r');
        i = end;
    }

    Ok(TokenSequence {
        tokens,
        source_text: text.to_string(),
    })
}

/// Scans a barline glyph run starting at `from` (which holds `|` or `:`).
fn scan_barline(bytes: &[u8], from: usize) -> usize {
    let mut j = from;
    while bytes.get(j) == Some(&b':') {
        j += 1;
    }
    while bytes.get(j) == Some(&b'|') {
        j += 1;
    }
    if bytes.get(j) == Some(&b']') {
        return j + 1;
    }
    while bytes.get(j) == Some(&b':') {
        j += 1;
    }
    if matches!(bytes.get(j), Some(d) if d.is_ascii_digit()) && bytes[j - 1] == b'|' {
        j += 1;
    }
    j
}

/// Structural summary of a score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub parse_valid: bool,
    pub bar_count: usize,
    pub unmatched_constructs: Vec<String>,
}

/// Checks required headers (`X:` and `K:`), a non-empty body, and balanced
/// chords, decorations, slurs and repeats. Never fails; problems are reported.
pub fn validate(seq: &TokenSequence) -> ValidationReport {
    let mut has_x = false;
    let mut has_k = false;
    let mut body_notes = 0usize;
    let mut bar_count = 0usize;
    let mut content_since_bar = false;
    let mut unmatched = Vec::new();
    let mut open_repeats: Vec<usize> = Vec::new();
    let mut open_slurs: Vec<usize> = Vec::new();
    let mut offset = 0usize;

    for tok in &seq.tokens {
        let t = tok.text.as_str();
        match tok.kind {
            TokenKind::HeaderField => {
                if t.starts_with("X:") {
                    has_x = true;
                } else if t.starts_with("K:") {
                    has_k = true;
                } else if t.starts_with('[') && !t.ends_with(']') {
                    unmatched.push(format!("unclosed inline field at offset {offset}"));
                }
            }
            TokenKind::Note | TokenKind::Rest => {
                if has_k {
                    body_notes += 1;
                }
                content_since_bar = true;
            }
            TokenKind::Chord => {
                if t.len() < 2 || !t.ends_with(']') {
                    unmatched.push(format!("unclosed chord at offset {offset}"));
                }
                if has_k {
                    body_notes += 1;
                }
                content_since_bar = true;
            }
            TokenKind::Decoration => {
                let delimited = t.starts_with('!') || t.starts_with('+');
                if delimited && (t.len() < 2 || !t.ends_with(&t[..1])) {
                    unmatched.push(format!("unclosed decoration at offset {offset}"));
                }
            }
            TokenKind::Barline => {
                if content_since_bar {
                    bar_count += 1;
                    content_since_bar = false;
                }
                // A `:|` with no open repeat closes the implicit one at the
                // top of the tune.
                if t.starts_with(':') {
                    open_repeats.pop();
                }
                if t.ends_with(':') {
                    open_repeats.push(offset);
                }
            }
            TokenKind::Other => {
                if t.starts_with('"') && (t.len() < 2 || !t.ends_with('"')) {
                    unmatched.push(format!("unclosed annotation at offset {offset}"));
                } else if t == "(" {
                    open_slurs.push(offset);
                } else if t == ")" && open_slurs.pop().is_none() {
                    unmatched.push(format!("slur end without start at offset {offset}"));
                }
            }
            TokenKind::Duration | TokenKind::Accidental | TokenKind::Whitespace => {}
        }
        offset += t.len();
    }
    for at in open_repeats {
        unmatched.push(format!("repeat start without end at offset {at}"));
    }
    for at in open_slurs {
        unmatched.push(format!("slur start without end at offset {at}"));
    }

    ValidationReport {
        parse_valid: has_x && has_k && body_notes > 0 && unmatched.is_empty(),
        bar_count,
        unmatched_constructs: unmatched,
    }
}
