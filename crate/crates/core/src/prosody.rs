//! Prosody-boundary annotation parsing.
//!
//! Annotated text interleaves characters with break markers (`#1`..`#4` by
//! default). A marker closes the prosodic unit at its own
//! level and every level below it, so a `#3` is also a phrase and word
//! boundary. The result is a [`ProsodyTree`]:
//! utterance → intonation phrases → prosodic phrases → prosodic words.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Break level of a marker, ordered from weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BoundaryLevel {
    Word = 1,
    Phrase = 2,
    Intonation = 3,
    Utterance = 4,
}

/// The four marker strings recognised in annotated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerScheme {
    pub pw_marker: String,
    pub pph_marker: String,
    pub iph_marker: String,
    pub utter_marker: String,
}

impl Default for MarkerScheme {
    fn default() -> Self {
        Self { pw_marker: "#1".into(), pph_marker: "#2".into(), iph_marker: "#3".into(), utter_marker: "#4".into() }
    }
}

impl MarkerScheme {
    pub fn new(
        pw_marker: impl Into<String>,
        pph_marker: impl Into<String>,
        iph_marker: impl Into<String>,
        utter_marker: impl Into<String>,
    ) -> Result<Self, ParseError> {
        let scheme = Self {
            pw_marker: pw_marker.into(),
            pph_marker: pph_marker.into(),
            iph_marker: iph_marker.into(),
            utter_marker: utter_marker.into(),
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// Checks that markers are non-empty, distinct and prefix-free.
    pub fn validate(&self) -> Result<(), ParseError> {
        let markers = self.markers();
        for (i, (a, _)) in markers.iter().enumerate() {
            if a.is_empty() {
                return Err(ParseError::InvalidScheme("empty marker".into()));
            }
            for (b, _) in markers.iter().skip(i + 1) {
                if a == b {
                    return Err(ParseError::InvalidScheme(format!("duplicate marker {a:?}")));
                }
                if a.starts_with(b) || b.starts_with(a) {
                    return Err(ParseError::InvalidScheme(format!(
                        "marker {a:?} and {b:?} are prefixes of one another"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn markers(&self) -> [(&str, BoundaryLevel); 4] {
        [
            (self.pw_marker.as_str(), BoundaryLevel::Word),
            (self.pph_marker.as_str(), BoundaryLevel::Phrase),
            (self.iph_marker.as_str(), BoundaryLevel::Intonation),
            (self.utter_marker.as_str(), BoundaryLevel::Utterance),
        ]
    }

    pub fn marker(&self, level: BoundaryLevel) -> &str {
        match level {
            BoundaryLevel::Word => &self.pw_marker,
            BoundaryLevel::Phrase => &self.pph_marker,
            BoundaryLevel::Intonation => &self.iph_marker,
            BoundaryLevel::Utterance => &self.utter_marker,
        }
    }

    /// Returns the marker that `rest` starts with, if any.
    fn match_at<'a>(&'a self, rest: &str) -> Option<(&'a str, BoundaryLevel)> {
        self.markers().into_iter().find(|(m, _)| rest.starts_with(m))
    }

    fn starts_like_marker(&self, c: char) -> bool {
        self.markers().iter().any(|(m, _)| m.starts_with(c))
    }
}

/// What is wrong with a marker occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerFault {
    Leading,
    Adjacent,
    Unknown,
    /// The input ends in a marker weaker than the utterance marker.
    TrailingBelowUtterance,
}

impl fmt::Display for MarkerFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerFault::Leading => "marker before any text",
            MarkerFault::Adjacent => "marker directly follows another marker",
            MarkerFault::Unknown => "unknown marker token",
            MarkerFault::TrailingBelowUtterance => "final marker is not the utterance marker",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    /// `offset` counts characters (Unicode scalar values) from the start of the input.
    #[error("malformed marker at offset {offset}: {fault}")]
    MalformedMarker { offset: usize, fault: MarkerFault },
    #[error("empty segment at offset {offset}")]
    EmptySegment { offset: usize },
    #[error("invalid marker scheme: {0}")]
    InvalidScheme(String),
    #[error("phoneme count {found} does not match character count {expected}")]
    PhonemeCountMismatch { expected: usize, found: usize },
}

/// One record of an annotated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedUtterance {
    pub id: String,
    pub raw: String,
    /// One token per text character, when supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProsodicWord {
    /// 1-based position in reading order across the whole utterance.
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProsodicPhrase {
    pub words: Vec<ProsodicWord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntonationPhrase {
    pub phrases: Vec<ProsodicPhrase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProsodyTree {
    pub intonation_phrases: Vec<IntonationPhrase>,
}

/// A prosodic word with its enclosing phrase indices, all 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatWord {
    pub pw_index: usize,
    pub text: String,
    pub pph_index: usize,
    pub iph_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("flat word list is not a valid tree: {0}")]
pub struct RebuildError(String);

impl ProsodyTree {
    pub fn words(&self) -> impl Iterator<Item = &ProsodicWord> {
        self.phrases().flat_map(|p| p.words.iter())
    }

    pub fn phrases(&self) -> impl Iterator<Item = &ProsodicPhrase> {
        self.intonation_phrases.iter().flat_map(|i| i.phrases.iter())
    }

    pub fn word_count(&self) -> usize {
        self.words().count()
    }

    pub fn phrase_count(&self) -> usize {
        self.phrases().count()
    }

    /// Marker-free text of the utterance.
    pub fn text(&self) -> String {
        self.words().map(|w| w.text.as_str()).collect()
    }

    pub fn flatten(&self) -> Vec<FlatWord> {
        let mut out = Vec::with_capacity(self.word_count());
        let mut pph_index = 0;
        for (i, iph) in self.intonation_phrases.iter().enumerate() {
            for pph in &iph.phrases {
                pph_index += 1;
                for w in &pph.words {
                    out.push(FlatWord { pw_index: w.index, text: w.text.clone(), pph_index, iph_index: i + 1 });
                }
            }
        }
        out
    }

    /// Inverse of [`ProsodyTree::flatten`]. Phoneme tokens are not carried by
    /// the flat form and come back as `None`.
    pub fn from_flat(words: &[FlatWord]) -> Result<Self, RebuildError> {
        if words.is_empty() {
            return Err(RebuildError("no words".into()));
        }
        let mut tree = ProsodyTree { intonation_phrases: Vec::new() };
        let (mut last_pph, mut last_iph) = (0, 0);
        for (pos, w) in words.iter().enumerate() {
            if w.pw_index != pos + 1 {
                return Err(RebuildError(format!("pw_index {} at position {}", w.pw_index, pos + 1)));
            }
            if w.text.is_empty() {
                return Err(RebuildError(format!("word {} has empty text", w.pw_index)));
            }
            if w.iph_index == last_iph + 1 {
                if w.pph_index != last_pph + 1 {
                    return Err(RebuildError(format!("word {} opens an IPH mid-phrase", w.pw_index)));
                }
                tree.intonation_phrases.push(IntonationPhrase { phrases: Vec::new() });
                last_iph += 1;
            } else if w.iph_index != last_iph {
                return Err(RebuildError(format!("iph_index jumps at word {}", w.pw_index)));
            }
            let iph = tree.intonation_phrases.last_mut().expect("opened above");
            if w.pph_index == last_pph + 1 {
                iph.phrases.push(ProsodicPhrase { words: Vec::new() });
                last_pph += 1;
            } else if w.pph_index != last_pph {
                return Err(RebuildError(format!("pph_index jumps at word {}", w.pw_index)));
            }
            iph.phrases.last_mut().expect("opened above").words.push(ProsodicWord {
                index: w.pw_index,
                text: w.text.clone(),
                phonemes: None,
            });
        }
        Ok(tree)
    }

    /// Renders the tree back into annotated text, always ending with the
    /// utterance marker.
    pub fn to_annotation(&self, scheme: &MarkerScheme) -> String {
        let mut out = String::new();
        let n_iph = self.intonation_phrases.len();
        for (i, iph) in self.intonation_phrases.iter().enumerate() {
            let n_pph = iph.phrases.len();
            for (p, pph) in iph.phrases.iter().enumerate() {
                let n_pw = pph.words.len();
                for (w, word) in pph.words.iter().enumerate() {
                    out.push_str(&word.text);
                    let level = if w + 1 < n_pw {
                        BoundaryLevel::Word
                    } else if p + 1 < n_pph {
                        BoundaryLevel::Phrase
                    } else if i + 1 < n_iph {
                        BoundaryLevel::Intonation
                    } else {
                        BoundaryLevel::Utterance
                    };
                    out.push_str(scheme.marker(level));
                }
            }
        }
        out
    }

    /// Distributes one phoneme token per character over the words.
    pub fn attach_phonemes(&mut self, phonemes: &[String]) -> Result<(), ParseError> {
        let expected: usize = self.words().map(|w| w.text.chars().count()).sum();
        if expected != phonemes.len() {
            return Err(ParseError::PhonemeCountMismatch { expected, found: phonemes.len() });
        }
        let mut rest = phonemes;
        for iph in &mut self.intonation_phrases {
            for pph in &mut iph.phrases {
                for w in &mut pph.words {
                    let (mine, tail) = rest.split_at(w.text.chars().count());
                    w.phonemes = Some(mine.to_vec());
                    rest = tail;
                }
            }
        }
        Ok(())
    }
}

/// Removes every marker occurrence, leaving the plain text.
pub fn strip_markers(raw: &str, scheme: &MarkerScheme) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(c) = rest.chars().next() {
        if let Some((m, _)) = scheme.match_at(rest) {
            rest = &rest[m.len()..];
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

#[derive(Default)]
struct TreeBuilder {
    tree: Vec<IntonationPhrase>,
    iph: Vec<ProsodicPhrase>,
    pph: Vec<ProsodicWord>,
    word: String,
    next_index: usize,
}

impl TreeBuilder {
    fn close(&mut self, level: BoundaryLevel) {
        self.next_index += 1;
        self.pph.push(ProsodicWord { index: self.next_index, text: std::mem::take(&mut self.word), phonemes: None });
        if level >= BoundaryLevel::Phrase {
            self.iph.push(ProsodicPhrase { words: std::mem::take(&mut self.pph) });
        }
        if level >= BoundaryLevel::Intonation {
            self.tree.push(IntonationPhrase { phrases: std::mem::take(&mut self.iph) });
        }
    }
}

/// Parses annotated text in a single left-to-right scan.
///
/// A missing trailing utterance marker is implied. An utterance marker in the
/// middle of the text acts as an intonation-phrase boundary, so the result is
/// always a single utterance.
pub fn parse_annotation(raw: &str, scheme: &MarkerScheme) -> Result<ProsodyTree, ParseError> {
    scheme.validate()?;
    let mut b = TreeBuilder::default();
    let mut last_marker: Option<BoundaryLevel> = None;
    let mut last_marker_offset = 0;
    let mut offset = 0;
    let mut seen_text = false;
    let mut rest = raw;

    while let Some(c) = rest.chars().next() {
        if let Some((m, level)) = scheme.match_at(rest) {
            if !seen_text {
                return Err(ParseError::MalformedMarker { offset, fault: MarkerFault::Leading });
            }
            if last_marker.is_some() {
                return Err(ParseError::MalformedMarker { offset, fault: MarkerFault::Adjacent });
            }
            b.close(level);
            last_marker = Some(level);
            last_marker_offset = offset;
            offset += m.chars().count();
            rest = &rest[m.len()..];
        } else if scheme.starts_like_marker(c) {
            return Err(ParseError::MalformedMarker { offset, fault: MarkerFault::Unknown });
        } else {
            b.word.push(c);
            seen_text = true;
            last_marker = None;
            offset += 1;
            rest = &rest[c.len_utf8()..];
        }
    }

    if !seen_text {
        return Err(ParseError::EmptySegment { offset });
    }
    match last_marker {
        Some(BoundaryLevel::Utterance) => {}
        Some(_) => {
            return Err(ParseError::MalformedMarker {
                offset: last_marker_offset,
                fault: MarkerFault::TrailingBelowUtterance,
            });
        }
        None => b.close(BoundaryLevel::Utterance),
    }
    Ok(ProsodyTree { intonation_phrases: b.tree })
}

/// Parses an utterance and attaches its phoneme tokens, when present.
pub fn parse_utterance(utt: &AnnotatedUtterance, scheme: &MarkerScheme) -> Result<ProsodyTree, ParseError> {
    let mut tree = parse_annotation(&utt.raw, scheme)?;
    if let Some(ph) = &utt.phonemes {
        tree.attach_phonemes(ph)?;
    }
    Ok(tree)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    RecordFormat { line: usize, message: String },
    #[error("line {line}: record {id:?} has {found} phoneme tokens for {expected} characters")]
    PhonemeCountMismatch { line: usize, id: String, expected: usize, found: usize },
    #[error("line {line}: {source}")]
    Annotation { line: usize, source: ParseError },
}

/// Streams [`AnnotatedUtterance`] records from a corpus.
///
/// Each record is a line `<id>\t<annotated text>`, optionally followed by one
/// line of whitespace-separated phoneme tokens. Blank lines are skipped.
pub struct CorpusReader<R: BufRead> {
    lines: std::iter::Peekable<std::iter::Enumerate<io::Lines<R>>>,
    scheme: MarkerScheme,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, scheme: MarkerScheme) -> Self {
        Self { lines: reader.lines().enumerate().peekable(), scheme }
    }

    fn read_record(&mut self, line_no: usize, line: String) -> Result<AnnotatedUtterance, CorpusError> {
        let (id, raw) = line.split_once('\t').ok_or_else(|| CorpusError::RecordFormat {
            line: line_no,
            message: "expected `<id>\\t<annotated text>`".into(),
        })?;
        let (id, raw) = (id.trim(), raw.trim());
        if id.is_empty() {
            return Err(CorpusError::RecordFormat { line: line_no, message: "empty id".into() });
        }
        let tree =
            parse_annotation(raw, &self.scheme).map_err(|source| CorpusError::Annotation { line: line_no, source })?;

        let phonemes = match self.lines.peek() {
            Some((_, Ok(next))) if !next.contains('\t') && !next.trim().is_empty() => {
                let (ph_idx, next) = self.lines.next().expect("peeked");
                let tokens: Vec<String> = next?.split_whitespace().map(str::to_owned).collect();
                let expected: usize = tree.words().map(|w| w.text.chars().count()).sum();
                if tokens.len() != expected {
                    return Err(CorpusError::PhonemeCountMismatch {
                        line: ph_idx + 1,
                        id: id.to_owned(),
                        expected,
                        found: tokens.len(),
                    });
                }
                Some(tokens)
            }
            _ => None,
        };
        Ok(AnnotatedUtterance { id: id.to_owned(), raw: raw.to_owned(), phonemes })
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<AnnotatedUtterance, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (idx, line) = self.lines.next()?;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.read_record(idx + 1, line));
        }
    }
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    scheme: &MarkerScheme,
) -> Result<CorpusReader<BufReader<File>>, CorpusError> {
    let file = File::open(path)?;
    Ok(CorpusReader::new(BufReader::new(file), scheme.clone()))
}
