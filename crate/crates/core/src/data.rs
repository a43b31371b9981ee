//! CoNLL column files, tag-scheme normalization, pruning and entity-level
//! evaluation.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::labels::{
    segmentation_from_labels, EntityLabelSet, SegLabel, Segment, Segmentation, Sentence, WordClass, WordTagSequence,
};
use crate::{Error, Result};

pub const DOCSTART: &str = "-DOCSTART-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Which columns hold the token and the tag.
#[derive(Debug, Clone, Default)]
pub struct ColumnConfig {
    /// Defaults to the first column.
    pub token_column: usize,
    /// `None` = last column.
    pub tag_column: Option<usize>,
    /// When set, tags with other entity types are rejected. Otherwise the
    /// entity types are collected from the file and sorted by name.
    pub labels: Option<EntityLabelSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    pub gold: Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub split: Split,
    pub labels: EntityLabelSet,
    pub sentences: Vec<AnnotatedSentence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn gold(&self) -> Vec<Segmentation> {
        self.sentences.iter().map(|s| s.gold.clone()).collect()
    }

    pub fn num_entities(&self) -> usize {
        self.sentences.iter().map(|s| s.gold.entities().count()).sum()
    }

    /// Writes the corpus back out as two-column BIOES text.
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let tags = crate::labels::labels_from_segmentation(&s.gold, s.sentence.len())
                .expect("gold covers sentence");
            for (tok, tag) in s.sentence.tokens.iter().zip(tags.names(&self.labels)) {
                let _ = writeln!(out, "{tok} {tag}");
            }
            out.push('\n');
        }
        out
    }
}

/// A raw tag before scheme normalization: prefix letter and entity type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawTag {
    Outside,
    Chunk(char, String),
}

impl RawTag {
    pub fn parse(tag: &str) -> Option<Self> {
        if tag == "O" {
            return Some(RawTag::Outside);
        }
        let (prefix, ty) = tag.split_once('-')?;
        let mut chars = prefix.chars();
        let p = chars.next()?;
        if chars.next().is_some() || !"BIES".contains(p) || ty.is_empty() {
            return None;
        }
        Some(RawTag::Chunk(p, ty.to_string()))
    }

    fn ty(&self) -> Option<&str> {
        match self {
            RawTag::Outside => None,
            RawTag::Chunk(_, t) => Some(t),
        }
    }
}

impl fmt::Display for RawTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawTag::Outside => f.write_str("O"),
            RawTag::Chunk(p, t) => write!(f, "{p}-{t}"),
        }
    }
}

/// Rewrites BIO (IOB1 or IOB2) or BIOES tags as BIOES. A chunk starts at B
/// or S, or at an I/E that does not continue an open chunk of the same type;
/// it ends at E or S or wherever the next tag does not continue it.
/// Already-BIOES input is returned unchanged.
pub fn to_bioes(tags: &[RawTag]) -> Vec<RawTag> {
    let n = tags.len();
    let starts = |i: usize| -> bool {
        match &tags[i] {
            RawTag::Outside => false,
            RawTag::Chunk('B' | 'S', _) => true,
            RawTag::Chunk(_, t) => {
                i == 0
                    || match &tags[i - 1] {
                        RawTag::Chunk('B' | 'I', u) => u != t,
                        _ => true,
                    }
            }
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let Some(ty) = tags[i].ty() else {
            out.push(RawTag::Outside);
            continue;
        };
        let closes_here = matches!(tags[i], RawTag::Chunk('E' | 'S', _));
        let continues = !closes_here && i + 1 < n && !starts(i + 1) && tags[i + 1].ty() == Some(ty);
        let p = match (starts(i), continues) {
            (true, true) => 'B',
            (true, false) => 'S',
            (false, true) => 'I',
            (false, false) => 'E',
        };
        out.push(RawTag::Chunk(p, ty.to_string()));
    }
    out
}

struct RawSentence {
    tokens: Vec<String>,
    tags: Vec<RawTag>,
    lines: Vec<usize>,
    doc_boundary: bool,
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_conll(path: &Path, split: Split, config: &ColumnConfig) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_conll(&text, path, split, config)
}

/// Parses CoNLL column text. `path` is only used in error messages.
pub fn parse_conll(text: &str, path: &Path, split: Split, config: &ColumnConfig) -> Result<Corpus> {
    let mut raw = Vec::new();
    let mut current: Option<RawSentence> = None;
    let mut pending_boundary = false;
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            if let Some(s) = current.take() {
                raw.push(s);
            }
            continue;
        }
        if cols[0] == DOCSTART {
            if let Some(s) = current.take() {
                raw.push(s);
            }
            pending_boundary = true;
            continue;
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(format_err(
                    path,
                    lineno,
                    format!("expected {w} columns, found {}", cols.len()),
                ))
            }
            _ => {}
        }
        let tag_col = config.tag_column.unwrap_or(cols.len() - 1);
        if cols.len() < 2 || tag_col >= cols.len() || config.token_column >= cols.len() {
            return Err(format_err(path, lineno, "missing token or tag column"));
        }
        let tag = RawTag::parse(cols[tag_col])
            .ok_or_else(|| format_err(path, lineno, format!("unknown tag {:?}", cols[tag_col])))?;
        if let (Some(set), Some(ty)) = (&config.labels, tag.ty()) {
            if set.type_index(ty).is_none() {
                return Err(format_err(path, lineno, format!("unknown entity type {ty:?}")));
            }
        }
        let s = current.get_or_insert_with(|| RawSentence {
            tokens: Vec::new(),
            tags: Vec::new(),
            lines: Vec::new(),
            doc_boundary: std::mem::take(&mut pending_boundary),
        });
        s.tokens.push(cols[config.token_column].to_string());
        s.tags.push(tag);
        s.lines.push(lineno);
    }
    if let Some(s) = current.take() {
        raw.push(s);
    }

    let labels = match &config.labels {
        Some(l) => l.clone(),
        None => {
            let types: BTreeSet<&str> = raw.iter().flat_map(|s| s.tags.iter().filter_map(RawTag::ty)).collect();
            EntityLabelSet::new(types)?
        }
    };
    let bioes_input = raw
        .iter()
        .any(|s| s.tags.iter().any(|t| matches!(t, RawTag::Chunk('E' | 'S', _))));

    let mut sentences = Vec::with_capacity(raw.len());
    for s in raw {
        let tags = if bioes_input { s.tags.clone() } else { to_bioes(&s.tags) };
        let classes: Vec<WordClass> = tags
            .iter()
            .map(|t| labels.parse_word_class(&t.to_string()).expect("type checked above"))
            .collect();
        let gold = segmentation_from_labels(&WordTagSequence::new(classes)).map_err(|e| match e {
            Error::IllegalTags { position } => {
                format_err(path, s.lines[position - 1], "illegal BIOES tag sequence")
            }
            other => other,
        })?;
        let mut sentence = Sentence::new(s.tokens)?;
        sentence.doc_boundary = s.doc_boundary;
        sentences.push(AnnotatedSentence { sentence, gold });
    }
    Ok(Corpus {
        split,
        labels,
        sentences,
    })
}

/// Drops training sentences with a gold entity longer than `max_len`.
/// Returns the pruned corpus and the number of sentences dropped.
pub fn prune_long_entities(corpus: &Corpus, max_len: usize) -> Result<(Corpus, usize)> {
    if corpus.split != Split::Train {
        return Err(Error::Usage(format!(
            "pruning applies to the training split only, got {}",
            corpus.split
        )));
    }
    if max_len == 0 {
        return Err(Error::Usage("maximum segment length must be at least 1".into()));
    }
    let kept: Vec<AnnotatedSentence> = corpus
        .sentences
        .iter()
        .filter(|s| s.gold.fits_lattice(max_len))
        .cloned()
        .collect();
    let dropped = corpus.len() - kept.len();
    Ok((
        Corpus {
            split: corpus.split,
            labels: corpus.labels.clone(),
            sentences: kept,
        },
        dropped,
    ))
}

/// Entity-length buckets: 1..=5 and 6+.
pub const LENGTH_BUCKETS: usize = 6;

pub fn length_bucket(len: usize) -> usize {
    len.clamp(1, LENGTH_BUCKETS) - 1
}

pub fn bucket_name(b: usize) -> String {
    if b + 1 == LENGTH_BUCKETS {
        format!(">={LENGTH_BUCKETS}")
    } else {
        (b + 1).to_string()
    }
}

/// True positives, predicted and gold entity counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Per entity type, in label-set order.
    pub per_type: Vec<(String, Counts)>,
    /// Gold entities are bucketed by gold length, predictions by predicted
    /// length.
    pub per_length: Vec<Counts>,
}

impl EvalReport {
    /// Counts pooled over all length buckets from `min_len` upwards.
    pub fn counts_for_min_length(&self, min_len: usize) -> Counts {
        let mut c = Counts::default();
        for b in length_bucket(min_len)..LENGTH_BUCKETS {
            c.add(self.per_length[b]);
        }
        c
    }

    pub fn length_f1(&self) -> Vec<f64> {
        self.per_length.iter().map(Counts::f1).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9} {:>7} {:>7}", "scope", "precision", "recall", "f1", "gold", "pred");
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted
            );
        };
        row("all", &self.overall);
        for (t, c) in &self.per_type {
            row(t, c);
        }
        for (b, c) in self.per_length.iter().enumerate() {
            row(&format!("len {}", bucket_name(b)), c);
        }
        s
    }

    /// One JSON record per metric.
    pub fn to_records(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |scope: String, c: &Counts| {
            for (metric, value) in [("precision", c.precision()), ("recall", c.recall()), ("f1", c.f1())] {
                out.push(
                    serde_json::json!({"scope": scope, "metric": metric, "value": value, "gold": c.gold, "predicted": c.predicted})
                        .to_string(),
                );
            }
        };
        push("all".into(), &self.overall);
        for (t, c) in &self.per_type {
            push(format!("type:{t}"), c);
        }
        for (b, c) in self.per_length.iter().enumerate() {
            push(format!("length:{}", bucket_name(b)), c);
        }
        out
    }
}

fn entity_set(s: &Segmentation) -> BTreeSet<Segment> {
    s.entities().copied().collect()
}

/// Exact-match entity scores of `predicted` against `gold`.
pub fn evaluate_segmentations(
    labels: &EntityLabelSet,
    gold: &[Segmentation],
    predicted: &[Segmentation],
) -> Result<EvalReport> {
    if gold.len() != predicted.len() {
        return Err(Error::Usage(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut overall = Counts::default();
    let mut per_type = vec![Counts::default(); labels.num_types()];
    let mut per_length = vec![Counts::default(); LENGTH_BUCKETS];
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Usage(format!(
                "sentence {}: gold covers {} words, prediction {}",
                i + 1,
                g.len(),
                p.len()
            )));
        }
        let gs = entity_set(g);
        let ps = entity_set(p);
        for e in &gs {
            let t = entity_type(e);
            overall.gold += 1;
            per_type[t].gold += 1;
            per_length[length_bucket(e.len())].gold += 1;
            if ps.contains(e) {
                overall.tp += 1;
                per_type[t].tp += 1;
                per_length[length_bucket(e.len())].tp += 1;
            }
        }
        for e in &ps {
            let t = entity_type(e);
            overall.predicted += 1;
            per_type[t].predicted += 1;
            per_length[length_bucket(e.len())].predicted += 1;
        }
    }
    Ok(EvalReport {
        overall,
        precision: overall.precision(),
        recall: overall.recall(),
        f1: overall.f1(),
        per_type: labels.types().iter().cloned().zip(per_type).collect(),
        per_length,
    })
}

fn entity_type(s: &Segment) -> usize {
    match s.label {
        SegLabel::Entity(t) => t,
        SegLabel::Outside => unreachable!("entities only"),
    }
}

pub fn evaluate(gold: &Corpus, predicted: &[Segmentation]) -> Result<EvalReport> {
    evaluate_segmentations(&gold.labels, &gold.gold(), predicted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub per_type_f1: Vec<(String, MeanStd)>,
    pub per_length_f1: Vec<MeanStd>,
}

impl AggregateReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "runs       {}", self.runs);
        let _ = writeln!(s, "precision  {}", self.precision);
        let _ = writeln!(s, "recall     {}", self.recall);
        let _ = writeln!(s, "f1         {}", self.f1);
        for (t, m) in &self.per_type_f1 {
            let _ = writeln!(s, "f1 {t:<7} {m}");
        }
        for (b, m) in self.per_length_f1.iter().enumerate() {
            let _ = writeln!(s, "f1 len {:<3} {m}", bucket_name(b));
        }
        s
    }
}

/// Mean and sample standard deviation of every metric across runs.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(Error::Usage(format!(
            "need at least 2 runs to aggregate, got {}",
            reports.len()
        )));
    }
    let col = |f: &dyn Fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let per_type_f1 = reports[0]
        .per_type
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.clone(), col(&|r| r.per_type[i].1.f1())))
        .collect();
    let per_length_f1 = (0..LENGTH_BUCKETS)
        .map(|b| col(&|r| r.per_length[b].f1()))
        .collect();
    Ok(AggregateReport {
        runs: reports.len(),
        precision: col(&|r| r.precision),
        recall: col(&|r| r.recall),
        f1: col(&|r| r.f1),
        per_type_f1,
        per_length_f1,
    })
}

/// Lines of a CoNLL file grouped by sentence, keeping the original text so
/// predictions can be appended as a new column.
#[derive(Debug, Clone)]
pub struct RawBlock {
    /// Original lines, including `-DOCSTART-` and blank separators.
    pub lines: Vec<String>,
    /// `Some(tokens)` if the block is a sentence.
    pub tokens: Option<Vec<String>>,
}

/// Splits a CoNLL file into sentence blocks and pass-through lines.
pub fn read_conll_blocks(path: &Path, token_column: usize) -> Result<Vec<RawBlock>> {
    let text = fs::read_to_string(path)?;
    let mut blocks = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    let mut toks: Vec<String> = Vec::new();
    let flush = |cur: &mut Vec<String>, toks: &mut Vec<String>, blocks: &mut Vec<RawBlock>| {
        if !cur.is_empty() {
            blocks.push(RawBlock {
                lines: std::mem::take(cur),
                tokens: Some(std::mem::take(toks)),
            });
        }
    };
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() || cols[0] == DOCSTART {
            flush(&mut cur, &mut toks, &mut blocks);
            blocks.push(RawBlock {
                lines: vec![line.to_string()],
                tokens: None,
            });
            continue;
        }
        let tok = cols.get(token_column).ok_or_else(|| Error::Format {
            path: PathBuf::from(path),
            line: i + 1,
            message: "missing token column".into(),
        })?;
        toks.push(tok.to_string());
        cur.push(line.to_string());
    }
    flush(&mut cur, &mut toks, &mut blocks);
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Corpus> {
        parse_conll(text, Path::new("mem.conll"), Split::Train, &ColumnConfig::default())
    }

    fn raw(tags: &[&str]) -> Vec<RawTag> {
        tags.iter().map(|t| RawTag::parse(t).unwrap()).collect()
    }

    fn names(tags: &[RawTag]) -> Vec<String> {
        tags.iter().map(ToString::to_string).collect()
    }

    #[test]
    fn bio_to_bioes() {
        assert_eq!(names(&to_bioes(&raw(&["B-PER", "I-PER"]))), ["B-PER", "E-PER"]);
        assert_eq!(names(&to_bioes(&raw(&["B-LOC"]))), ["S-LOC"]);
        // IOB1: I starts a chunk after O; B splits adjacent same-type chunks.
        assert_eq!(
            names(&to_bioes(&raw(&["I-ORG", "I-ORG", "B-ORG", "O", "I-PER", "I-LOC"]))),
            ["B-ORG", "E-ORG", "S-ORG", "O", "S-PER", "S-LOC"]
        );
    }

    #[test]
    fn bioes_conversion_is_idempotent() {
        let t = raw(&["B-PER", "I-PER", "E-PER", "S-LOC", "O", "S-LOC", "B-ORG", "E-ORG"]);
        assert_eq!(to_bioes(&t), t);
        let once = to_bioes(&raw(&["I-A", "I-A", "B-A", "I-B", "O", "B-A", "I-A", "I-A"]));
        assert_eq!(to_bioes(&once), once);
    }

    #[test]
    fn reads_bio_corpus() {
        let c = parse("John NNP B-PER\nSmith NNP I-PER\n\nParis NNP B-LOC\n").unwrap();
        assert_eq!(c.labels.types(), ["LOC", "PER"]);
        assert_eq!(c.len(), 2);
        let per = SegLabel::Entity(c.labels.type_index("PER").unwrap());
        assert_eq!(c.sentences[0].gold.entities().next(), Some(&Segment::new(1, 2, per)));
        assert_eq!(c.sentences[1].gold.max_entity_len(), 1);
    }

    #[test]
    fn docstart_only_is_empty() {
        let c = parse("-DOCSTART- -X- O O\n\n\n").unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn docstart_marks_boundary() {
        let c = parse("-DOCSTART- -X- O O\n\na x O O\n\nb x O O\n").unwrap();
        assert!(c.sentences[0].sentence.doc_boundary);
        assert!(!c.sentences[1].sentence.doc_boundary);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse("a O\nb X-PER\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
        let err = parse("a x O\nb O\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
        let err = parse("a B-PER\nb O\nc S-PER\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
        let cfg = ColumnConfig {
            labels: Some(EntityLabelSet::new(["PER"]).unwrap()),
            ..Default::default()
        };
        let err = parse_conll("a B-LOC\n", Path::new("x"), Split::Dev, &cfg).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
        assert!(read_conll(Path::new("/nonexistent/file"), Split::Train, &ColumnConfig::default()).is_err());
    }

    fn corpus_with(lengths: &[usize]) -> Corpus {
        let labels = EntityLabelSet::new(["X"]).unwrap();
        let sentences = lengths
            .iter()
            .map(|&len| AnnotatedSentence {
                sentence: Sentence::new((0..len + 1).map(|i| format!("w{i}"))).unwrap(),
                gold: Segmentation::from_triples(&[(1, len, SegLabel::Entity(0)), (len + 1, len + 1, SegLabel::Outside)], len + 1)
                    .unwrap(),
            })
            .collect();
        Corpus {
            split: Split::Train,
            labels,
            sentences,
        }
    }

    #[test]
    fn pruning() {
        let c = corpus_with(&[1, 3, 6]);
        let (p, dropped) = prune_long_entities(&c, 6).unwrap();
        assert_eq!((p.len(), dropped), (3, 0));
        let c = corpus_with(&[1, 7, 2]);
        let (p, dropped) = prune_long_entities(&c, 6).unwrap();
        assert_eq!((p.len(), dropped), (2, 1));
        let mut dev = c.clone();
        dev.split = Split::Dev;
        assert!(matches!(prune_long_entities(&dev, 6), Err(Error::Usage(_))));
    }

    #[test]
    fn perfect_predictions() {
        let c = corpus_with(&[1, 2, 7]);
        let r = evaluate(&c, &c.gold()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.per_length.iter().map(|c| c.gold).sum::<usize>(), 3);
        assert_eq!(r.per_length[5].f1(), 1.0);
    }

    #[test]
    fn partial_match() {
        let labels = EntityLabelSet::new(["PER", "LOC"]).unwrap();
        let (per, loc, o) = (SegLabel::Entity(0), SegLabel::Entity(1), SegLabel::Outside);
        let gold = Segmentation::from_triples(&[(1, 2, per), (3, 3, o), (4, 4, loc), (5, 5, o)], 5).unwrap();
        let pred = Segmentation::from_triples(&[(1, 2, per), (3, 4, o), (5, 5, loc)], 5).unwrap();
        let r = evaluate_segmentations(&labels, &[gold], &[pred]).unwrap();
        assert_eq!(r.overall.tp, 1);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_predictions_are_zero() {
        let c = corpus_with(&[2]);
        let r = evaluate(&c, &[Segmentation::outside(3)]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(evaluate(&c, &[]).is_err());
    }

    #[test]
    fn single_bucket_reproduces_overall() {
        let c = corpus_with(&[2, 2, 2]);
        let mut pred = c.gold();
        pred[1] = Segmentation::outside(3);
        let r = evaluate(&c, &pred).unwrap();
        assert_eq!(r.per_length[1], r.overall);
        assert_eq!(r.per_length[1].f1(), r.f1);
    }

    #[test]
    fn aggregation() {
        let c = corpus_with(&[2]);
        let r = evaluate(&c, &c.gold()).unwrap();
        let a = aggregate_runs(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(a.f1.std, 0.0);
        assert!(aggregate_runs(&[r.clone()]).is_err());
        let m = MeanStd::of(&[0.90, 0.92]);
        assert!((m.mean - 0.91).abs() < 1e-12);
        assert!((m.std - 0.014142135623730963).abs() < 1e-12);
        assert_eq!(a.per_length_f1.len(), LENGTH_BUCKETS);
        assert_eq!(a.per_length_f1[1].mean, 1.0);
    }

    #[test]
    fn records_and_table() {
        let c = corpus_with(&[2]);
        let r = evaluate(&c, &c.gold()).unwrap();
        let recs = r.to_records();
        assert_eq!(recs.len(), 3 * (1 + 1 + LENGTH_BUCKETS));
        let v: serde_json::Value = serde_json::from_str(&recs[2]).unwrap();
        assert_eq!(v["metric"], "f1");
        assert!(r.to_table().contains("len >=6"));
    }
}
