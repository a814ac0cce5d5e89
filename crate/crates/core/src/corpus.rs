// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic "composer" styles and their prompt-piece corpora.
//!
//! Each style is a small stochastic grammar over ABC: a pitch set walked by a
//! categorical interval distribution (indices wrap around the set), a
//! categorical duration distribution, a meter and a bar count range. A corpus
//! pairs each generated piece with its style's prompt line, e.g.
//! `%style:Alpha`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{self, AbcError, Token, TokenKind, TokenSequence};
use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("invalid style spec {name:?}: {message}")]
    InvalidSpec { name: String, message: String },
    #[error(transparent)]
    Abc(#[from] AbcError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StyleLabel {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub label: StyleLabel,
    /// Note or rest glyphs, e.g. `"C"`, `"^F"`, `"c'"`, `"z"`.
    pub pitch_set: Vec<String>,
    /// Melodic steps in pitch-set index space.
    pub intervals: Vec<i32>,
    pub interval_weights: Vec<f64>,
    /// Duration suffixes in units of `L:1/8`; `""` is one unit.
    pub durations: Vec<String>,
    pub duration_weights: Vec<f64>,
    pub meter: String,
    pub key: String,
    pub bars_per_piece: (usize, usize),
    pub prompt_text: String,
}

fn check_weights(name: &str, what: &str, w: &[f64], len: usize) -> Result<(), CorpusError> {
    let invalid = |message: String| CorpusError::InvalidSpec {
        name: name.to_string(),
        message,
    };
    if w.len() != len || len == 0 {
        return Err(invalid(format!("{what}: {} weights for {len} outcomes", w.len())));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(format!("{what}: weights must be non-negative")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("{what}: weights sum to {sum}")));
    }
    Ok(())
}

impl StyleSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let name = &self.label.name;
        let invalid = |message: &str| CorpusError::InvalidSpec {
            name: name.clone(),
            message: message.to_string(),
        };
        if self.pitch_set.is_empty() {
            return Err(invalid("pitch_set is empty"));
        }
        for p in &self.pitch_set {
            let seq = abc::tokenize(p)?;
            let ok = seq.tokens.last().is_some_and(|t| {
                matches!(t.kind, TokenKind::Note | TokenKind::Rest)
            }) && seq
                .tokens
                .iter()
                .all(|t| matches!(t.kind, TokenKind::Note | TokenKind::Rest | TokenKind::Accidental));
            if !ok {
                return Err(invalid(&format!("{p:?} is not a note or rest")));
            }
        }
        check_weights(name, "intervals", &self.interval_weights, self.intervals.len())?;
        check_weights(name, "durations", &self.duration_weights, self.durations.len())?;
        for d in &self.durations {
            if duration_halves(d).is_none() {
                return Err(invalid(&format!("bad duration {d:?}")));
            }
        }
        if meter_halves(&self.meter).is_none() {
            return Err(invalid(&format!("bad meter {:?}", self.meter)));
        }
        let (lo, hi) = self.bars_per_piece;
        if lo == 0 || lo > hi {
            return Err(invalid("bars_per_piece must be a non-empty range of positive counts"));
        }
        if !self.prompt_text.starts_with('%') || self.prompt_text.contains('\n') {
            return Err(invalid("prompt_text must be a single % comment line"));
        }
        Ok(())
    }
}

/// Duration suffix to half-units of `L:1/8`.
fn duration_halves(d: &str) -> Option<u32> {
    if d.is_empty() {
        return Some(2);
    }
    let (num, den) = match d.split_once('/') {
        Some((n, den)) => (
            if n.is_empty() { 1 } else { n.parse().ok()? },
            if den.is_empty() { 2 } else { den.parse().ok()? },
        ),
        None => (d.parse::<u32>().ok()?, 1),
    };
    match den {
        1 => Some(num * 2),
        2 => Some(num),
        _ => None,
    }
}

fn halves_to_duration(h: u32) -> String {
    match (h % 2, h / 2) {
        (0, 1) => String::new(),
        (0, n) => n.to_string(),
        (_, 0) => "/2".to_string(),
        _ => format!("{h}/2"),
    }
}

/// Bar length in half-units of an eighth note.
fn meter_halves(meter: &str) -> Option<u32> {
    let (n, d) = meter.split_once('/')?;
    let (n, d): (u32, u32) = (n.parse().ok()?, d.parse().ok()?);
    if n == 0 || d == 0 || 16 % d != 0 {
        return None;
    }
    let halves = n * 16 / d;
    (halves > 0).then_some(halves)
}

/// Generates one piece (header plus body) from a style grammar.
pub fn generate_piece(spec: &StyleSpec, seed: u64) -> String {
    let mut rng = seed::rng(seed);
    let steps = WeightedIndex::new(&spec.interval_weights).expect("validated weights");
    let durs = WeightedIndex::new(&spec.duration_weights).expect("validated weights");
    let bar_len = meter_halves(&spec.meter).expect("validated meter");
    let n = spec.pitch_set.len() as i64;

    let (lo, hi) = spec.bars_per_piece;
    let bars = rng.gen_range(lo..=hi);
    let mut idx = rng.gen_range(0..n);
    let mut out = format!("X:1\nM:{}\nL:1/8\nK:{}\n", spec.meter, spec.key);
    for bar in 0..bars {
        let mut left = bar_len;
        while left > 0 {
            let d = duration_halves(&spec.durations[durs.sample(&mut rng)]).unwrap();
            let d = d.min(left);
            out.push_str(&spec.pitch_set[idx as usize]);
            out.push_str(&halves_to_duration(d));
            left -= d;
            let step = i64::from(spec.intervals[steps.sample(&mut rng)]);
            idx = (idx + step).rem_euclid(n);
        }
        out.push('|');
        if (bar + 1) % 4 == 0 && bar + 1 < bars {
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub prompt: TokenSequence,
    pub piece: TokenSequence,
    pub label: StyleLabel,
}

impl CorpusEntry {
    pub fn sequence(&self) -> TokenSequence {
        concat(&self.prompt, &self.piece)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleCorpus {
    pub labels: Vec<StyleLabel>,
    pub entries: Vec<CorpusEntry>,
}

impl StyleCorpus {
    /// N_c per label id.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for e in &self.entries {
            counts[e.label.id] += 1;
        }
        counts
    }

    pub fn entries_for(&self, label: usize) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.label.id == label)
    }

    pub fn label_by_name(&self, name: &str) -> Option<&StyleLabel> {
        self.labels.iter().find(|l| l.name == name)
    }
}

pub fn build_corpus(
    specs: &[StyleSpec],
    n_per_style: usize,
    seed: u64,
) -> Result<StyleCorpus, CorpusError> {
    assert!(n_per_style >= 1, "n_per_style must be at least 1");
    let mut entries = Vec::with_capacity(specs.len() * n_per_style);
    for (id, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.label.id != id {
            return Err(CorpusError::InvalidSpec {
                name: spec.label.name.clone(),
                message: format!("label id {} at registry position {id}", spec.label.id),
            });
        }
        let prompt = abc::tokenize(&spec.prompt_text)?;
        for i in 0..n_per_style {
            let text = generate_piece(spec, seed::derive_seed(seed, &[id as u64, i as u64]));
            entries.push(CorpusEntry {
                prompt: prompt.clone(),
                piece: abc::tokenize(&text)?,
                label: spec.label.clone(),
            });
        }
    }
    Ok(StyleCorpus {
        labels: specs.iter().map(|s| s.label.clone()).collect(),
        entries,
    })
}

/// `prompt ⊕ piece`: prompt tokens, one newline separator, piece tokens.
pub fn concat(prompt: &TokenSequence, piece: &TokenSequence) -> TokenSequence {
    let mut tokens = Vec::with_capacity(prompt.len() + piece.len() + 1);
    tokens.extend_from_slice(&prompt.tokens);
    tokens.push(Token::new("\n", TokenKind::Whitespace));
    tokens.extend_from_slice(&piece.tokens);
    TokenSequence::from_tokens(tokens)
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    style: String,
    prompt: String,
    piece: String,
}

pub fn save_corpus(corpus: &StyleCorpus, path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for e in &corpus.entries {
        let line = CorpusLine {
            style: e.label.name.clone(),
            prompt: e.prompt.source_text.clone(),
            piece: e.piece.source_text.clone(),
        };
        serde_json::to_writer(&mut buf, &line).expect("string fields serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Loads a JSONL corpus. Label ids follow the order in which style names
/// first appear in the file.
pub fn load_corpus(path: &Path) -> Result<StyleCorpus, CorpusError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut labels: Vec<StyleLabel> = Vec::new();
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let violation = |message: String| CorpusError::SchemaViolation {
            line: lineno,
            message,
        };
        let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| violation(e.to_string()))?;
        let label = match labels.iter().find(|l| l.name == rec.style) {
            Some(l) => l.clone(),
            None => {
                let l = StyleLabel {
                    id: labels.len(),
                    name: rec.style.clone(),
                };
                labels.push(l.clone());
                l
            }
        };
        if !rec.prompt.starts_with('%') || rec.prompt.contains('\n') {
            return Err(violation("prompt must be a single % comment line".into()));
        }
        let prompt = abc::tokenize(&rec.prompt).map_err(|e| violation(e.to_string()))?;
        let piece = abc::tokenize(&rec.piece).map_err(|e| violation(e.to_string()))?;
        entries.push(CorpusEntry {
            prompt,
            piece,
            label,
        });
    }
    if labels.is_empty() {
        return Err(CorpusError::SchemaViolation {
            line: 0,
            message: "corpus has no entries".into(),
        });
    }
    Ok(StyleCorpus { labels, entries })
}

pub fn save_registry(specs: &[StyleSpec], path: &Path) -> Result<(), CorpusError> {
    let json = serde_json::to_string_pretty(specs).expect("specs serialize");
    fs::write(path, json + "\n").map_err(io_err(path))
}

pub fn load_registry(path: &Path) -> Result<Vec<StyleSpec>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let specs: Vec<StyleSpec> =
        serde_json::from_str(&text).map_err(|e| CorpusError::SchemaViolation {
            line: e.line(),
            message: e.to_string(),
        })?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn spec(
    id: usize,
    name: &str,
    pitch_set: &[&str],
    intervals: &[(i32, f64)],
    durations: &[(&str, f64)],
    meter: &str,
    key: &str,
    bars: (usize, usize),
) -> StyleSpec {
    StyleSpec {
        label: StyleLabel {
            id,
            name: name.to_string(),
        },
        pitch_set: pitch_set.iter().map(|s| s.to_string()).collect(),
        intervals: intervals.iter().map(|p| p.0).collect(),
        interval_weights: intervals.iter().map(|p| p.1).collect(),
        durations: durations.iter().map(|p| p.0.to_string()).collect(),
        duration_weights: durations.iter().map(|p| p.1).collect(),
        meter: meter.to_string(),
        key: key.to_string(),
        bars_per_piece: bars,
        prompt_text: format!("%style:{name}"),
    }
}

/// The four desk styles. Each walks its own six-note window of one shared
/// scale, so neighbouring styles share four pitches and differ in melodic
/// motion, rhythm and meter.
pub fn default_registry() -> Vec<StyleSpec> {
    vec![
        spec(
            0,
            "Alpha",
            &["C", "D", "E", "F", "G", "A"],
            &[(-1, 0.4), (1, 0.4), (0, 0.2)],
            &[("2", 0.8), ("", 0.2)],
            "4/4",
            "C",
            (3, 8),
        ),
        spec(
            1,
            "Beta",
            &["E", "F", "G", "A", "B", "c"],
            &[(-3, 0.3), (3, 0.3), (-2, 0.2), (2, 0.2)],
            &[("/2", 0.4), ("", 0.4), ("3/2", 0.2)],
            "3/4",
            "G",
            (3, 8),
        ),
        spec(
            2,
            "Gamma",
            &["G", "A", "B", "c", "d", "e"],
            &[(1, 0.7), (2, 0.15), (-1, 0.15)],
            &[("3", 0.6), ("", 0.4)],
            "6/8",
            "Em",
            (3, 8),
        ),
        spec(
            3,
            "Delta",
            &["B", "c", "d", "e", "f", "g"],
            &[(0, 0.4), (-1, 0.4), (2, 0.2)],
            &[("4", 0.6), ("", 0.4)],
            "2/4",
            "Bb",
            (3, 8),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::{detokenize, validate};

    #[test]
    fn registry_is_valid() {
        let reg = default_registry();
        assert_eq!(reg.len(), 4);
        for (i, s) in reg.iter().enumerate() {
            s.validate().unwrap();
            assert_eq!(s.label.id, i);
        }
    }

    #[test]
    fn durations_parse() {
        assert_eq!(duration_halves(""), Some(2));
        assert_eq!(duration_halves("3"), Some(6));
        assert_eq!(duration_halves("/2"), Some(1));
        assert_eq!(duration_halves("3/2"), Some(3));
        for h in 1..12 {
            assert_eq!(duration_halves(&halves_to_duration(h)), Some(h));
        }
        assert_eq!(meter_halves("4/4"), Some(16));
        assert_eq!(meter_halves("6/8"), Some(12));
        assert_eq!(meter_halves("2/4"), Some(8));
    }

    #[test]
    fn pieces_are_valid_and_deterministic() {
        for spec in default_registry() {
            for seed in 0..20 {
                let a = generate_piece(&spec, seed);
                assert_eq!(a, generate_piece(&spec, seed));
                let report = validate(&abc::tokenize(&a).unwrap());
                assert!(report.parse_valid, "{a}");
                assert!(report.bar_count >= spec.bars_per_piece.0);
            }
        }
    }

    #[test]
    fn degenerate_distribution() {
        let s = spec(0, "Mono", &["C"], &[(0, 1.0)], &[("2", 1.0), ("4", 0.0)], "4/4", "C", (2, 2));
        let piece = generate_piece(&s, 3);
        let body = piece.split("K:C\n").nth(1).unwrap();
        assert_eq!(body, "C2C2C2C2|C2C2C2C2|");
    }

    #[test]
    fn uniform_pitch_frequencies() {
        let letters = ["C", "D", "E", "F", "G"];
        let s = spec(
            0,
            "Uniform",
            &letters,
            &[(-2, 0.2), (-1, 0.2), (0, 0.2), (1, 0.2), (2, 0.2)],
            &[("", 1.0)],
            "4/4",
            "C",
            (1250, 1250),
        );
        let seq = abc::tokenize(&generate_piece(&s, 11)).unwrap();
        let body_notes: Vec<&str> = seq
            .iter()
            .filter(|t| t.kind == TokenKind::Note)
            .map(|t| t.text.as_str())
            .collect();
        assert_eq!(body_notes.len(), 10_000);
        for l in letters {
            let f = body_notes.iter().filter(|&&n| n == l).count() as f64 / 10_000.0;
            assert!((f - 0.2).abs() < 0.02, "{l}: {f}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = default_registry().remove(0);
        s.interval_weights[0] += 0.01;
        assert!(s.validate().is_err());
        let mut s = default_registry().remove(0);
        s.pitch_set.clear();
        assert!(s.validate().is_err());
        let mut s = default_registry().remove(0);
        s.duration_weights = vec![1.5, -0.5, 0.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn corpus_counts() {
        let c = build_corpus(&default_registry(), 50, 1).unwrap();
        assert_eq!(c.entries.len(), 200);
        assert_eq!(c.counts(), vec![50; 4]);
        let c1 = build_corpus(&default_registry(), 1, 1).unwrap();
        assert_eq!(c1.counts(), vec![1; 4]);
        assert_eq!(build_corpus(&default_registry(), 50, 1).unwrap(), c);
        assert_ne!(build_corpus(&default_registry(), 50, 2).unwrap(), c);
        for e in &c.entries {
            let spec = &default_registry()[e.label.id];
            assert!(e.prompt.source_text.starts_with(&spec.prompt_text));
        }
    }

    #[test]
    fn concat_layout() {
        let prompt = abc::tokenize("%style:Alpha").unwrap();
        let piece = abc::tokenize("X:1\nK:C\nC2|").unwrap();
        let joined = concat(&prompt, &piece);
        assert_eq!(joined.len(), prompt.len() + piece.len() + 1);
        let texts: Vec<&str> = joined.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["%style:Alpha", "\n", "X:1", "\n", "K:C", "\n", "C", "2", "|"]);
        assert_eq!(detokenize(&joined), "%style:Alpha\nX:1\nK:C\nC2|");

        let empty = concat(&TokenSequence::default(), &piece);
        assert_eq!(empty.tokens[0].text, "\n");
        assert_eq!(&empty.tokens[1..], &piece.tokens[..]);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = build_corpus(&default_registry(), 50, 9).unwrap();
        save_corpus(&c, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);

        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("\"style\"", "\"stile\"", 1);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 2);
        fs::write(&path, lines.join("\n")).unwrap();
        match load_corpus(&path) {
            Err(CorpusError::SchemaViolation { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }

        fs::write(&path, "").unwrap();
        assert!(matches!(load_corpus(&path), Err(CorpusError::SchemaViolation { .. })));
        assert!(matches!(
            load_corpus(&dir.path().join("missing.jsonl")),
            Err(CorpusError::IoFailure { .. })
        ));
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("styles.json");
        save_registry(&default_registry(), &path).unwrap();
        assert_eq!(load_registry(&path).unwrap(), default_registry());
    }
}
