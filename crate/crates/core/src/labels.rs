//! Label alphabets, BIOES word classes and segmentations.
//!
//! Indices of segments are 1-based and inclusive, the same convention used
//! when writing segmentations by hand: `((1,3,PER),(4,4,O),(5,6,PER))`.
//! Word positions in [`WordTagSequence`] are plain vector indices (0-based);
//! violation positions reported by [`validate_bioes`] are 1-based.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Name of the outside label in text formats.
pub const OUTSIDE: &str = "O";

/// Ordered set of entity types. The outside label is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLabelSet {
    types: Vec<String>,
}

impl EntityLabelSet {
    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Result<Self> {
        let types: Vec<String> = types.into_iter().map(Into::into).collect();
        for (i, t) in types.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Usage(format!("invalid entity type name {t:?}")));
            }
            if t == OUTSIDE {
                return Err(Error::Usage("O cannot be an entity type".into()));
            }
            if types[..i].contains(t) {
                return Err(Error::Usage(format!("duplicate entity type {t}")));
            }
        }
        Ok(Self { types })
    }

    /// PER, LOC, ORG, MISC.
    pub fn conll() -> Self {
        Self::new(["PER", "LOC", "ORG", "MISC"]).expect("static label set")
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Number of BIOES word classes, `4 * types + 1`.
    pub fn num_word_classes(&self) -> usize {
        4 * self.types.len() + 1
    }

    /// Number of segment labels (entity types plus O).
    pub fn num_seg_labels(&self) -> usize {
        self.types.len() + 1
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }

    pub fn type_name(&self, t: usize) -> &str {
        &self.types[t]
    }

    pub fn word_classes(&self) -> impl Iterator<Item = WordClass> {
        (0..self.num_word_classes()).map(WordClass::from_index)
    }

    pub fn seg_labels(&self) -> impl Iterator<Item = SegLabel> {
        (0..self.num_seg_labels()).map(SegLabel::from_index)
    }

    pub fn word_class_name(&self, c: WordClass) -> String {
        match c {
            WordClass::O => OUTSIDE.to_string(),
            WordClass::B(t) => format!("B-{}", self.types[t]),
            WordClass::I(t) => format!("I-{}", self.types[t]),
            WordClass::E(t) => format!("E-{}", self.types[t]),
            WordClass::S(t) => format!("S-{}", self.types[t]),
        }
    }

    /// Parses `O` or `X-TYPE` with `X` one of B, I, E, S.
    pub fn parse_word_class(&self, tag: &str) -> Option<WordClass> {
        if tag == OUTSIDE {
            return Some(WordClass::O);
        }
        let (prefix, ty) = tag.split_once('-')?;
        let t = self.type_index(ty)?;
        match prefix {
            "B" => Some(WordClass::B(t)),
            "I" => Some(WordClass::I(t)),
            "E" => Some(WordClass::E(t)),
            "S" => Some(WordClass::S(t)),
            _ => None,
        }
    }

    pub fn seg_label_name(&self, l: SegLabel) -> &str {
        match l {
            SegLabel::Outside => OUTSIDE,
            SegLabel::Entity(t) => &self.types[t],
        }
    }
}

/// A BIOES word class. The `usize` is the entity-type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordClass {
    O,
    B(usize),
    I(usize),
    E(usize),
    S(usize),
}

impl WordClass {
    /// Dense index: O = 0, then B/I/E/S for each type in order.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            WordClass::O => 0,
            WordClass::B(t) => 1 + 4 * t,
            WordClass::I(t) => 2 + 4 * t,
            WordClass::E(t) => 3 + 4 * t,
            WordClass::S(t) => 4 + 4 * t,
        }
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            return WordClass::O;
        }
        let t = (i - 1) / 4;
        match (i - 1) % 4 {
            0 => WordClass::B(t),
            1 => WordClass::I(t),
            2 => WordClass::E(t),
            _ => WordClass::S(t),
        }
    }

    pub fn entity_type(self) -> Option<usize> {
        match self {
            WordClass::O => None,
            WordClass::B(t) | WordClass::I(t) | WordClass::E(t) | WordClass::S(t) => Some(t),
        }
    }

    /// Class of word `k` inside a segment spanning `begin..=end`.
    #[inline]
    pub fn in_segment(label: SegLabel, begin: usize, end: usize, k: usize) -> Self {
        debug_assert!(begin <= k && k <= end);
        match label {
            SegLabel::Outside => WordClass::O,
            SegLabel::Entity(t) if begin == end => WordClass::S(t),
            SegLabel::Entity(t) if k == begin => WordClass::B(t),
            SegLabel::Entity(t) if k == end => WordClass::E(t),
            SegLabel::Entity(t) => WordClass::I(t),
        }
    }
}

/// Whether `next` may follow `prev` (`None` = sentence start).
pub fn can_follow(prev: Option<WordClass>, next: WordClass) -> bool {
    use WordClass::*;
    match prev {
        None | Some(O) | Some(E(_)) | Some(S(_)) => matches!(next, O | B(_) | S(_)),
        Some(B(t)) | Some(I(t)) => matches!(next, I(u) | E(u) if u == t),
    }
}

/// Whether a sentence may end with `last`.
pub fn can_end(last: WordClass) -> bool {
    matches!(last, WordClass::O | WordClass::E(_) | WordClass::S(_))
}

/// Segment label: an entity type or O.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegLabel {
    Outside,
    Entity(usize),
}

impl SegLabel {
    /// O = 0, entity type `t` = `t + 1`.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            SegLabel::Outside => 0,
            SegLabel::Entity(t) => t + 1,
        }
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            SegLabel::Outside
        } else {
            SegLabel::Entity(i - 1)
        }
    }

    pub fn is_entity(self) -> bool {
        matches!(self, SegLabel::Entity(_))
    }
}

/// `(begin, end, label)`, 1-based inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub begin: usize,
    pub end: usize,
    pub label: SegLabel,
}

impl Segment {
    pub fn new(begin: usize, end: usize, label: SegLabel) -> Self {
        Self { begin, end, label }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label {
            SegLabel::Outside => write!(f, "({},{},O)", self.begin, self.end),
            SegLabel::Entity(t) => write!(f, "({},{},#{t})", self.begin, self.end),
        }
    }
}

/// Contiguous cover of `1..=n` by segments. O runs are always stored as
/// unit segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segmentation {
    segments: Vec<Segment>,
}

impl Segmentation {
    /// Validates that `segments` tile `1..=n` and splits O runs into unit
    /// segments.
    pub fn new(segments: Vec<Segment>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Structure("empty sentence".into()));
        }
        let mut next = 1;
        let mut out = Vec::with_capacity(segments.len());
        for s in segments {
            if s.begin != next {
                return Err(Error::Structure(format!(
                    "segment {s} starts at {}, expected {next}",
                    s.begin
                )));
            }
            if s.end < s.begin {
                return Err(Error::Structure(format!("segment {s} has end before begin")));
            }
            if s.end > n {
                return Err(Error::Structure(format!("segment {s} exceeds length {n}")));
            }
            match s.label {
                SegLabel::Outside => {
                    out.extend((s.begin..=s.end).map(|k| Segment::new(k, k, SegLabel::Outside)))
                }
                SegLabel::Entity(_) => out.push(s),
            }
            next = s.end + 1;
        }
        if next != n + 1 {
            return Err(Error::Structure(format!(
                "segments cover 1..{} but sentence has {n} words",
                next - 1
            )));
        }
        Ok(Self { segments: out })
    }

    /// Convenience constructor from `(begin, end, label)` triples.
    pub fn from_triples(triples: &[(usize, usize, SegLabel)], n: usize) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(b, e, l)| Segment::new(b, e, l))
                .collect(),
            n,
        )
    }

    /// All-outside segmentation of length `n`.
    pub fn outside(n: usize) -> Self {
        Self {
            segments: (1..=n)
                .map(|k| Segment::new(k, k, SegLabel::Outside))
                .collect(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Sentence length covered.
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = &Segment> + '_ {
        self.segments.iter().filter(|s| s.label.is_entity())
    }

    pub fn max_entity_len(&self) -> usize {
        self.entities().map(Segment::len).max().unwrap_or(0)
    }

    /// True when every entity segment has length at most `max_len`.
    pub fn fits_lattice(&self, max_len: usize) -> bool {
        self.max_entity_len() <= max_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub doc_boundary: bool,
}

impl Sentence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Structure("sentence must have at least one token".into()));
        }
        if tokens.iter().any(String::is_empty) {
            return Err(Error::Structure("empty token".into()));
        }
        Ok(Self {
            tokens,
            doc_boundary: false,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordTagSequence {
    pub labels: Vec<WordClass>,
}

impl WordTagSequence {
    pub fn new(labels: Vec<WordClass>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn names(&self, set: &EntityLabelSet) -> Vec<String> {
        self.labels.iter().map(|&c| set.word_class_name(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioesVerdict {
    Valid,
    /// 1-based position of the first offending word. An unterminated entity
    /// at the end of the sentence is reported at the last word.
    Invalid { position: usize },
}

impl BioesVerdict {
    pub fn is_valid(self) -> bool {
        self == BioesVerdict::Valid
    }
}

pub fn validate_bioes(y: &WordTagSequence) -> BioesVerdict {
    let mut prev = None;
    for (i, &c) in y.labels.iter().enumerate() {
        if !can_follow(prev, c) {
            return BioesVerdict::Invalid { position: i + 1 };
        }
        prev = Some(c);
    }
    match prev {
        Some(last) if !can_end(last) => BioesVerdict::Invalid {
            position: y.labels.len(),
        },
        _ => BioesVerdict::Valid,
    }
}

pub fn labels_from_segmentation(seg: &Segmentation, n: usize) -> Result<WordTagSequence> {
    if seg.len() != n {
        return Err(Error::Structure(format!(
            "segmentation covers {} words, expected {n}",
            seg.len()
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for s in seg.segments() {
        labels.extend((s.begin..=s.end).map(|k| WordClass::in_segment(s.label, s.begin, s.end, k)));
    }
    Ok(WordTagSequence { labels })
}

/// Strict inverse of [`labels_from_segmentation`].
pub fn segmentation_from_labels(y: &WordTagSequence) -> Result<Segmentation> {
    if let BioesVerdict::Invalid { position } = validate_bioes(y) {
        return Err(Error::IllegalTags { position });
    }
    if y.is_empty() {
        return Err(Error::Structure("empty tag sequence".into()));
    }
    let mut segments = Vec::new();
    let mut open = 0;
    for (i, &c) in y.labels.iter().enumerate() {
        let k = i + 1;
        match c {
            WordClass::O => segments.push(Segment::new(k, k, SegLabel::Outside)),
            WordClass::S(t) => segments.push(Segment::new(k, k, SegLabel::Entity(t))),
            WordClass::B(_) => open = k,
            WordClass::I(_) => {}
            WordClass::E(t) => segments.push(Segment::new(open, k, SegLabel::Entity(t))),
        }
    }
    Segmentation::new(segments, y.len())
}

/// Lenient conversion for externally produced tags: only well-formed
/// `B I* E` and `S` runs become entities, everything else is read as O.
pub fn segmentation_from_labels_repair(y: &WordTagSequence) -> Segmentation {
    let n = y.len();
    let mut segments = Vec::new();
    let mut k = 1;
    while k <= n {
        let c = y.labels[k - 1];
        let accepted = match c {
            WordClass::S(t) => Some(Segment::new(k, k, SegLabel::Entity(t))),
            WordClass::B(t) => {
                let mut j = k + 1;
                while j <= n && y.labels[j - 1] == WordClass::I(t) {
                    j += 1;
                }
                (j <= n && y.labels[j - 1] == WordClass::E(t))
                    .then(|| Segment::new(k, j, SegLabel::Entity(t)))
            }
            _ => None,
        };
        match accepted {
            Some(s) => {
                k = s.end + 1;
                segments.push(s);
            }
            None => {
                segments.push(Segment::new(k, k, SegLabel::Outside));
                k += 1;
            }
        }
    }
    Segmentation { segments }
}
