//! Intent accuracy, chunk-level slot F1, overall accuracy and the
//! uncoordinated-slot error analysis.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{is_valid_tag, Example};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("utterance {utterance}: {pred} predicted tags vs {gold} gold tags")]
    LengthMismatch { utterance: usize, pred: usize, gold: usize },
    #[error("{pred} predicted utterances vs {gold} gold utterances")]
    CountMismatch { pred: usize, gold: usize },
    #[error("utterance {utterance}: tokens differ between prediction and gold")]
    TokenMismatch { utterance: usize },
    #[error("malformed tag {0:?}")]
    MalformedTag(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ChunkSpan {
    pub slot_type: String,
    /// Inclusive.
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse<S: AsRef<str>>(tag: &S) -> Result<Tag<'_>, EvalError> {
    let t = tag.as_ref();
    if !is_valid_tag(t) {
        return Err(EvalError::MalformedTag(t.to_string()));
    }
    Ok(match t.split_at(t.len().min(2)) {
        ("B-", ty) => Tag::Begin(ty),
        ("I-", ty) => Tag::Inside(ty),
        _ => Tag::Outside,
    })
}

/// IOB2 chunks, conlleval convention: an `I-x` that cannot continue an open
/// chunk of type `x` starts a new one.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> Result<Vec<ChunkSpan>, EvalError> {
    let mut out: Vec<ChunkSpan> = Vec::new();
    let mut open: Option<ChunkSpan> = None;
    for (j, tag) in tags.iter().enumerate() {
        match parse(tag)? {
            Tag::Outside => out.extend(open.take()),
            Tag::Begin(ty) => {
                out.extend(open.take());
                open = Some(ChunkSpan { slot_type: ty.to_string(), start: j, end: j });
            }
            Tag::Inside(ty) => match open.as_mut() {
                Some(c) if c.slot_type == ty => c.end = j,
                _ => {
                    out.extend(open.take());
                    open = Some(ChunkSpan { slot_type: ty.to_string(), start: j, end: j });
                }
            },
        }
    }
    out.extend(open);
    Ok(out)
}

/// Strict IOB2 reading: chunks only start at `B-x`; every `I-x` that cannot
/// continue an open chunk of type `x` is reported as an orphan and dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrictChunks {
    pub chunks: Vec<ChunkSpan>,
    pub orphans: Vec<usize>,
}

pub fn extract_chunks_strict<S: AsRef<str>>(tags: &[S]) -> Result<StrictChunks, EvalError> {
    let mut chunks = Vec::new();
    let mut orphans = Vec::new();
    let mut open: Option<ChunkSpan> = None;
    for (j, tag) in tags.iter().enumerate() {
        match parse(tag)? {
            Tag::Outside => chunks.extend(open.take()),
            Tag::Begin(ty) => {
                chunks.extend(open.take());
                open = Some(ChunkSpan { slot_type: ty.to_string(), start: j, end: j });
            }
            Tag::Inside(ty) => match open.as_mut() {
                Some(c) if c.slot_type == ty => c.end = j,
                _ => {
                    chunks.extend(open.take());
                    orphans.push(j);
                }
            },
        }
    }
    chunks.extend(open);
    Ok(StrictChunks { chunks, orphans })
}

/// Turns chunks back into IOB2 tags over `len` positions.
pub fn chunks_to_tags(chunks: &[ChunkSpan], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for c in chunks {
        tags[c.start] = format!("B-{}", c.slot_type);
        for t in &mut tags[c.start + 1..=c.end] {
            *t = format!("I-{}", c.slot_type);
        }
    }
    tags
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlotScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

fn check_count(pred: usize, gold: usize) -> Result<(), EvalError> {
    if pred == gold {
        Ok(())
    } else {
        Err(EvalError::CountMismatch { pred, gold })
    }
}

fn check_lengths<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<(), EvalError> {
    check_count(pred.len(), gold.len())?;
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::LengthMismatch { utterance: i, pred: p.len(), gold: g.len() });
        }
    }
    Ok(())
}

/// Micro-averaged chunk precision, recall and F1. A chunk is correct when
/// type, start and end all match.
pub fn slot_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<SlotScores, EvalError> {
    check_lengths(pred, gold)?;
    let (mut correct, mut predicted, mut total_gold) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let pc = extract_chunks(p)?;
        let gc = extract_chunks(g)?;
        correct += pc.iter().filter(|c| gc.contains(c)).count();
        predicted += pc.len();
        total_gold += gc.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, total_gold);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SlotScores { precision, recall, f1, correct, predicted, gold: total_gold })
}

pub fn intent_accuracy<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64, EvalError> {
    check_count(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Fraction of utterances whose intent and every slot tag are correct.
pub fn overall_accuracy<S: AsRef<str>>(
    pred_intents: &[S],
    pred_tags: &[Vec<S>],
    gold_intents: &[S],
    gold_tags: &[Vec<S>],
) -> Result<f64, EvalError> {
    check_count(pred_intents.len(), gold_intents.len())?;
    check_count(pred_intents.len(), pred_tags.len())?;
    check_lengths(pred_tags, gold_tags)?;
    if gold_intents.is_empty() {
        return Ok(0.0);
    }
    let hits = (0..gold_intents.len())
        .filter(|&i| {
            pred_intents[i].as_ref() == gold_intents[i].as_ref()
                && pred_tags[i].iter().zip(&gold_tags[i]).all(|(p, g)| p.as_ref() == g.as_ref())
        })
        .count();
    Ok(hits as f64 / gold_intents.len() as f64)
}

/// Positions `j` where `tags[j] = I-x` but `tags[j-1]` is neither `B-x` nor `I-x`.
pub fn find_uncoordinated<S: AsRef<str>>(tags: &[S]) -> Vec<usize> {
    let type_of = |t: &str| t.get(2..).map(str::to_string);
    (0..tags.len())
        .filter(|&j| {
            let t = tags[j].as_ref();
            if !t.starts_with("I-") {
                return false;
            }
            if j == 0 {
                return true;
            }
            let prev = tags[j - 1].as_ref();
            !((prev.starts_with("B-") || prev.starts_with("I-")) && type_of(prev) == type_of(t))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UncKind {
    /// Predecessor correct, the `I-` side wrong.
    Bi,
    /// `I-` side correct, predecessor wrong.
    Ib,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct UncCase {
    pub utterance: usize,
    pub position: usize,
    pub kind: UncKind,
    /// Predicted tags at `position - 1` (if any) and `position`.
    pub pred: Vec<String>,
    pub gold: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ErrorReport {
    /// Token positions whose predicted tag differs from gold.
    pub slot_errors: usize,
    pub uncoordinated: usize,
    pub bi_errors: usize,
    pub ib_errors: usize,
    pub other_unc: usize,
    pub cases: Vec<UncCase>,
}

impl ErrorReport {
    /// Share of slot errors that are uncoordinated positions, if any errors.
    pub fn uncoordinated_share(&self) -> Option<f64> {
        (self.slot_errors > 0).then(|| self.uncoordinated as f64 / self.slot_errors as f64)
    }
}

/// Buckets every uncoordinated position of each predicted sequence.
pub fn classify_unc_errors<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<ErrorReport, EvalError> {
    check_lengths(pred, gold)?;
    let mut r = ErrorReport::default();
    for (u, (p, g)) in pred.iter().zip(gold).enumerate() {
        r.slot_errors += p.iter().zip(g).filter(|(a, b)| a.as_ref() != b.as_ref()).count();
        for j in find_uncoordinated(p) {
            let ok = |k: usize| p[k].as_ref() == g[k].as_ref();
            let kind = match j {
                0 => UncKind::Other,
                _ if ok(j - 1) && !ok(j) => UncKind::Bi,
                _ if ok(j) && !ok(j - 1) => UncKind::Ib,
                _ => UncKind::Other,
            };
            match kind {
                UncKind::Bi => r.bi_errors += 1,
                UncKind::Ib => r.ib_errors += 1,
                UncKind::Other => r.other_unc += 1,
            }
            r.uncoordinated += 1;
            let window = j.saturating_sub(1)..=j;
            r.cases.push(UncCase {
                utterance: u,
                position: j,
                kind,
                pred: p[window.clone()].iter().map(|s| s.as_ref().to_string()).collect(),
                gold: g[window].iter().map(|s| s.as_ref().to_string()).collect(),
            });
        }
    }
    Ok(r)
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub intent_accuracy: f64,
    pub slot: SlotScores,
    pub overall_accuracy: f64,
    pub errors: ErrorReport,
}

/// Scores predicted examples against gold examples over the same tokens.
pub fn evaluate(pred: &[Example], gold: &[Example]) -> Result<Metrics, EvalError> {
    check_count(pred.len(), gold.len())?;
    if let Some(u) = pred.iter().zip(gold).position(|(p, g)| p.tokens != g.tokens) {
        return Err(EvalError::TokenMismatch { utterance: u });
    }
    let pi: Vec<&str> = pred.iter().map(|e| e.intent.as_str()).collect();
    let gi: Vec<&str> = gold.iter().map(|e| e.intent.as_str()).collect();
    let pt: Vec<Vec<&str>> = pred.iter().map(|e| e.slot_labels.iter().map(String::as_str).collect()).collect();
    let gt: Vec<Vec<&str>> = gold.iter().map(|e| e.slot_labels.iter().map(String::as_str).collect()).collect();
    Ok(Metrics {
        intent_accuracy: intent_accuracy(&pi, &gi)?,
        slot: slot_f1(&pt, &gt)?,
        overall_accuracy: overall_accuracy(&pi, &pt, &gi, &gt)?,
        errors: classify_unc_errors(&pt, &gt)?,
    })
}
