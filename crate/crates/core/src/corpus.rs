//! Dataset loading, vocabularies and padded batches.
//!
//! A split directory holds three line-aligned files: `seq.in` (whitespace
//! separated tokens), `seq.out` (one IOB tag per token) and `label` (one intent
//! per utterance).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: token and tag counts (or file line counts) differ")]
    LengthMismatch { line: usize },
    #[error("line {line}: malformed tag {tag:?}")]
    MalformedTag { line: usize, tag: String },
    #[error("line {line}: empty utterance")]
    EmptyUtterance { line: usize },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("example {index} has {len} tokens, limit is {max}")]
    SequenceTooLong { index: usize, len: usize, max: usize },
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
}

/// One utterance with its gold annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub slot_labels: Vec<String>,
    pub intent: String,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// True for `O`, `B-<type>` and `I-<type>` with a nonempty type.
pub fn is_valid_tag(tag: &str) -> bool {
    tag == "O" || ((tag.starts_with("B-") || tag.starts_with("I-")) && tag.len() > 2)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

/// Reads a `seq.out`-style file: one whitespace separated tag sequence per line.
pub fn read_tag_file(path: &Path) -> Result<Vec<Vec<String>>, CorpusError> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    if is_valid_tag(t) {
                        Ok(t.to_string())
                    } else {
                        Err(CorpusError::MalformedTag { line: i + 1, tag: t.to_string() })
                    }
                })
                .collect()
        })
        .collect()
}

pub fn read_token_file(path: &Path) -> Result<Vec<Vec<String>>, CorpusError> {
    Ok(read_lines(path)?.into_iter().map(|l| l.split_whitespace().map(str::to_lowercase).collect()).collect())
}

pub fn read_label_file(path: &Path) -> Result<Vec<String>, CorpusError> {
    Ok(read_lines(path)?.into_iter().map(|l| l.trim().to_string()).collect())
}

/// Loads `dir/split/{seq.in,seq.out,label}`. Tokens are lowercased.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Example>, CorpusError> {
    let root = dir.join(split);
    let tokens = read_token_file(&root.join("seq.in"))?;
    let tags = read_tag_file(&root.join("seq.out"))?;
    let intents = read_label_file(&root.join("label"))?;
    let lines = tokens.len().max(tags.len()).max(intents.len());
    if tokens.len() != lines || tags.len() != lines || intents.len() != lines {
        let first_missing = tokens.len().min(tags.len()).min(intents.len());
        return Err(CorpusError::LengthMismatch { line: first_missing + 1 });
    }
    let mut out = Vec::with_capacity(lines);
    for (i, ((tokens, slot_labels), intent)) in tokens.into_iter().zip(tags).zip(intents).enumerate() {
        if tokens.len() != slot_labels.len() {
            return Err(CorpusError::LengthMismatch { line: i + 1 });
        }
        if tokens.is_empty() {
            return Err(CorpusError::EmptyUtterance { line: i + 1 });
        }
        out.push(Example { tokens, slot_labels, intent });
    }
    Ok(out)
}

/// Writes predictions (or any examples) in the three-file split layout.
pub fn write_split(dir: &Path, examples: &[Example]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
    let join = |f: &dyn Fn(&Example) -> String| examples.iter().map(|e| f(e) + "\n").collect::<String>();
    let files = [
        ("seq.in", join(&|e| e.tokens.join(" "))),
        ("seq.out", join(&|e| e.slot_labels.join(" "))),
        ("label", join(&|e| e.intent.clone())),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| CorpusError::Io { path, source })?;
    }
    Ok(())
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CLS_TOKEN: &str = "<cls>";
pub const BOS_TAG: &str = "<bos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub slot_pad: usize,
    pub slot_bos: usize,
}

pub const SPECIALS: Specials = Specials { pad: 0, unk: 1, cls: 2, slot_pad: 0, slot_bos: 1 };
const TOKEN_SPECIALS: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN];
const SLOT_SPECIALS: [&str; 2] = [PAD_TOKEN, BOS_TAG];

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    slots: Vec<String>,
    intents: Vec<String>,
    specials: Specials,
}

fn index(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

/// Bidirectional token, slot-tag and intent maps.
///
/// Token ids 0..3 are PAD, UNK, CLS; slot ids 0..2 are PAD and BOS. Slot
/// tags proper start at id 2, so classifier class `c` is slot id `c + 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    slots: Vec<String>,
    intents: Vec<String>,
    token_ids: HashMap<String, usize>,
    slot_ids: HashMap<String, usize>,
    intent_ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const SLOT_OFFSET: usize = SLOT_SPECIALS.len();

    pub fn build(train: &[Example]) -> Result<Self, CorpusError> {
        if train.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut toks = BTreeSet::new();
        let mut tags = BTreeSet::new();
        let mut intents = BTreeSet::new();
        for ex in train {
            toks.extend(ex.tokens.iter().cloned());
            tags.extend(ex.slot_labels.iter().cloned());
            intents.insert(ex.intent.clone());
        }
        tags.insert("O".to_string());
        for s in TOKEN_SPECIALS {
            toks.remove(s);
        }
        for s in SLOT_SPECIALS {
            tags.remove(s);
        }
        let tokens = TOKEN_SPECIALS.iter().map(|s| s.to_string()).chain(toks).collect();
        let slots = SLOT_SPECIALS.iter().map(|s| s.to_string()).chain(tags).collect();
        Ok(Self::from_parts(tokens, slots, intents.into_iter().collect()))
    }

    fn from_parts(tokens: Vec<String>, slots: Vec<String>, intents: Vec<String>) -> Self {
        Self {
            token_ids: index(&tokens),
            slot_ids: index(&slots),
            intent_ids: index(&intents),
            tokens,
            slots,
            intents,
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            slots: self.slots.clone(),
            intents: self.intents.clone(),
            specials: SPECIALS,
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| CorpusError::VocabFormat(e.to_string()))?;
        if file.specials != SPECIALS
            || file.tokens.get(..3) != Some(&TOKEN_SPECIALS.map(String::from)[..])
            || file.slots.get(..2) != Some(&SLOT_SPECIALS.map(String::from)[..])
        {
            return Err(CorpusError::VocabFormat("unexpected special ids".into()));
        }
        let v = Self::from_parts(file.tokens, file.slots, file.intents);
        if v.token_ids.len() != v.tokens.len() || v.slot_ids.len() != v.slots.len() || v.intent_ids.len() != v.intents.len() {
            return Err(CorpusError::VocabFormat("duplicate entries".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_json()).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    /// Number of slot tags proper (excluding PAD and BOS).
    pub fn num_slot_tags(&self) -> usize {
        self.slots.len() - Self::SLOT_OFFSET
    }

    /// Size of the slot-id space including PAD and BOS.
    pub fn num_slot_ids(&self) -> usize {
        self.slots.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_ids.get(token).copied().unwrap_or(SPECIALS.unk)
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.token_ids.contains_key(token)
    }

    pub fn slot_id(&self, tag: &str) -> Result<usize, CorpusError> {
        match self.slot_ids.get(tag) {
            Some(&id) if id >= Self::SLOT_OFFSET => Ok(id),
            _ => Err(CorpusError::UnknownLabel { kind: "slot", label: tag.to_string() }),
        }
    }

    pub fn intent_id(&self, intent: &str) -> Result<usize, CorpusError> {
        self.intent_ids
            .get(intent)
            .copied()
            .ok_or_else(|| CorpusError::UnknownLabel { kind: "intent", label: intent.to_string() })
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn slot_tag(&self, id: usize) -> &str {
        &self.slots[id]
    }

    /// Tag for classifier class `class` (slot id `class + SLOT_OFFSET`).
    pub fn slot_class_tag(&self, class: usize) -> &str {
        &self.slots[class + Self::SLOT_OFFSET]
    }

    pub fn intent(&self, id: usize) -> &str {
        &self.intents[id]
    }

    pub fn slot_tags(&self) -> &[String] {
        &self.slots[Self::SLOT_OFFSET..]
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }
}

/// Padded batch. Row `b` of `token_ids` is `[CLS, x_1, .., x_n, PAD, ..]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    /// Longest utterance in the batch (T); token rows have length T + 1.
    pub max_len: usize,
    pub token_ids: Vec<usize>,
    pub slot_ids: Vec<usize>,
    pub intent_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.max_len + 1
    }

    /// `[B, T]` mask of real token positions (CLS excluded).
    pub fn token_mask(&self) -> Vec<bool> {
        let t = self.max_len;
        let mut m = Vec::with_capacity(self.batch_size * t);
        for &len in &self.lengths {
            m.extend((0..t).map(|j| j < len));
        }
        m
    }

    /// Classifier class of every `[B, T]` slot position; padding maps to 0
    /// and must be masked by the caller.
    pub fn slot_classes(&self) -> Vec<usize> {
        self.slot_ids
            .iter()
            .map(|&id| id.saturating_sub(Vocabulary::SLOT_OFFSET))
            .collect()
    }

    /// The same batch padded to `max_len` positions (no-op if already longer).
    pub fn padded_to(&self, max_len: usize) -> Batch {
        let (t, l) = (self.max_len, self.seq_len());
        if max_len <= t {
            return self.clone();
        }
        let extra = max_len - t;
        let mut out = Batch { max_len, token_ids: Vec::new(), slot_ids: Vec::new(), pad_mask: Vec::new(), ..self.clone() };
        for b in 0..self.batch_size {
            out.token_ids.extend_from_slice(&self.token_ids[b * l..(b + 1) * l]);
            out.token_ids.extend(std::iter::repeat_n(SPECIALS.pad, extra));
            out.pad_mask.extend_from_slice(&self.pad_mask[b * l..(b + 1) * l]);
            out.pad_mask.extend(std::iter::repeat_n(false, extra));
            out.slot_ids.extend_from_slice(&self.slot_ids[b * t..(b + 1) * t]);
            out.slot_ids.extend(std::iter::repeat_n(SPECIALS.slot_pad, extra));
        }
        out
    }

    /// Drops padding and maps ids back to strings.
    pub fn decode(&self, vocab: &Vocabulary) -> Vec<Example> {
        let (t, l) = (self.max_len, self.seq_len());
        (0..self.batch_size)
            .map(|b| {
                let n = self.lengths[b];
                Example {
                    tokens: (1..=n).map(|j| vocab.token(self.token_ids[b * l + j]).to_string()).collect(),
                    slot_labels: (0..n).map(|j| vocab.slot_tag(self.slot_ids[b * t + j]).to_string()).collect(),
                    intent: vocab.intent(self.intent_ids[b]).to_string(),
                }
            })
            .collect()
    }
}

/// Encodes examples into a batch padded to the longest member.
pub fn encode_batch(examples: &[Example], vocab: &Vocabulary, max_len: usize) -> Result<Batch, CorpusError> {
    for (index, ex) in examples.iter().enumerate() {
        if ex.len() > max_len {
            return Err(CorpusError::SequenceTooLong { index, len: ex.len(), max: max_len });
        }
    }
    let t = examples.iter().map(Example::len).max().unwrap_or(0);
    let b = examples.len();
    let mut batch = Batch {
        batch_size: b,
        max_len: t,
        token_ids: vec![SPECIALS.pad; b * (t + 1)],
        slot_ids: vec![SPECIALS.slot_pad; b * t],
        intent_ids: Vec::with_capacity(b),
        pad_mask: vec![false; b * (t + 1)],
        lengths: Vec::with_capacity(b),
    };
    for (i, ex) in examples.iter().enumerate() {
        let row = i * (t + 1);
        batch.token_ids[row] = SPECIALS.cls;
        batch.pad_mask[row] = true;
        for (j, (tok, tag)) in ex.tokens.iter().zip(&ex.slot_labels).enumerate() {
            batch.token_ids[row + 1 + j] = vocab.token_id(tok);
            batch.pad_mask[row + 1 + j] = true;
            batch.slot_ids[i * t + j] = vocab.slot_id(tag)?;
        }
        batch.intent_ids.push(vocab.intent_id(&ex.intent)?);
        batch.lengths.push(ex.len());
    }
    Ok(batch)
}

/// Encodes token sequences alone, for prediction when gold labels may fall
/// outside the vocabulary. Slot ids are PAD and intents 0.
pub fn encode_tokens<S: AsRef<str>>(utterances: &[&[S]], vocab: &Vocabulary) -> Batch {
    let t = utterances.iter().map(|u| u.len()).max().unwrap_or(0);
    let b = utterances.len();
    let mut batch = Batch {
        batch_size: b,
        max_len: t,
        token_ids: vec![SPECIALS.pad; b * (t + 1)],
        slot_ids: vec![SPECIALS.slot_pad; b * t],
        intent_ids: vec![0; b],
        pad_mask: vec![false; b * (t + 1)],
        lengths: Vec::with_capacity(b),
    };
    for (i, u) in utterances.iter().enumerate() {
        let row = i * (t + 1);
        batch.token_ids[row] = SPECIALS.cls;
        batch.pad_mask[row] = true;
        for (j, tok) in u.iter().enumerate() {
            batch.token_ids[row + 1 + j] = vocab.token_id(tok.as_ref());
            batch.pad_mask[row + 1 + j] = true;
        }
        batch.lengths.push(u.len());
    }
    batch
}

/// Splits one epoch into batches of example indices: shuffle, sort pools of
/// `pool_batches` batches by length, cut into batches, shuffle batch order.
pub fn bucketed_batches<R: Rng + ?Sized>(
    lengths: &[usize],
    batch_size: usize,
    pool_batches: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let pool = (batch_size * pool_batches.max(1)).max(1);
    let mut batches = Vec::new();
    for chunk in order.chunks_mut(pool) {
        chunk.sort_by_key(|&i| lengths[i]);
        batches.extend(chunk.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Shape of a generated corpus.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_intents: usize,
    /// Slot types; each contributes a B- and an I- tag.
    pub n_slot_types: usize,
    pub words_per_slot: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    /// ATIS-sized label spaces (21 intents, 119 B/I tags plus O) with
    /// utterances of 5 to 18 tokens.
    pub fn atis_shaped() -> Self {
        Self { n_intents: 21, n_slot_types: 60, words_per_slot: 4, filler_words: 200, min_len: 5, max_len: 18 }
    }
}

/// Generates a learnable corpus: the first token names the intent, filler
/// words are tagged O and every slot type owns its own words. The last slot
/// type only ever forms one-token chunks, so the tag set has `2 t - 1`
/// B/I tags plus O.
pub fn synthetic_examples<R: Rng + ?Sized>(spec: &SyntheticSpec, n: usize, rng: &mut R) -> Vec<Example> {
    let last = spec.n_slot_types.saturating_sub(1);
    (0..n)
        .map(|_| {
            let intent = rng.random_range(0..spec.n_intents.max(1));
            let target = rng.random_range(spec.min_len.max(1)..=spec.max_len.max(spec.min_len.max(1)));
            let mut tokens = vec![format!("ask{intent}")];
            let mut tags = vec!["O".to_string()];
            while tokens.len() < target {
                if spec.n_slot_types > 0 && rng.random_bool(0.4) {
                    let ty = rng.random_range(0..spec.n_slot_types);
                    let len = if ty == last { 1 } else { rng.random_range(1..=3) };
                    for k in 0..len.min(target - tokens.len()) {
                        tokens.push(format!("s{ty}w{}", rng.random_range(0..spec.words_per_slot.max(1))));
                        tags.push(format!("{}-slot{ty}", if k == 0 { 'B' } else { 'I' }));
                    }
                } else {
                    tokens.push(format!("f{}", rng.random_range(0..spec.filler_words.max(1))));
                    tags.push("O".to_string());
                }
            }
            Example { tokens, slot_labels: tags, intent: format!("intent{intent}") }
        })
        .collect()
}

impl SyntheticSpec {
    /// Vocabulary covering every label the spec can produce, whether or not a
    /// particular sample uses it.
    pub fn vocabulary(&self) -> Vocabulary {
        let last = self.n_slot_types.saturating_sub(1);
        let mut tokens: BTreeSet<String> = (0..self.n_intents).map(|i| format!("ask{i}")).collect();
        tokens.extend((0..self.filler_words).map(|i| format!("f{i}")));
        let mut tags = BTreeSet::from(["O".to_string()]);
        for ty in 0..self.n_slot_types {
            tokens.extend((0..self.words_per_slot).map(|w| format!("s{ty}w{w}")));
            tags.insert(format!("B-slot{ty}"));
            if ty != last {
                tags.insert(format!("I-slot{ty}"));
            }
        }
        let intents: BTreeSet<String> = (0..self.n_intents).map(|i| format!("intent{i}")).collect();
        Vocabulary::from_parts(
            TOKEN_SPECIALS.iter().map(|s| s.to_string()).chain(tokens).collect(),
            SLOT_SPECIALS.iter().map(|s| s.to_string()).chain(tags).collect(),
            intents.into_iter().collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(tokens: &str, tags: &str, intent: &str) -> Example {
        Example {
            tokens: tokens.split_whitespace().map(String::from).collect(),
            slot_labels: tags.split_whitespace().map(String::from).collect(),
            intent: intent.to_string(),
        }
    }

    fn write(dir: &Path, seq_in: &str, seq_out: &str, label: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("seq.in"), seq_in).unwrap();
        fs::write(dir.join("seq.out"), seq_out).unwrap();
        fs::write(dir.join("label"), label).unwrap();
    }

    #[test]
    fn loads_weather_example() {
        let dir = tempfile::tempdir().unwrap();
        write(
            &dir.path().join("train"),
            "What is the weather here on 2/7/2021\n",
            "O O O O B-location O B-time\n",
            "GetWeather\n",
        );
        let split = load_split(dir.path(), "train").unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split[0].tokens.len(), 7);
        assert_eq!(split[0].tokens[0], "what");
        assert_eq!(split[0].slot_labels[4], "B-location");
        assert_eq!(split[0].intent, "GetWeather");
    }

    #[test]
    fn empty_label_file_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("train"), "a b\n", "O O\n", "");
        assert!(matches!(load_split(dir.path(), "train"), Err(CorpusError::LengthMismatch { line: 1 })));
    }

    #[test]
    fn token_tag_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("train"), "a b\nc\n", "O O\nO O\n", "x\ny\n");
        assert!(matches!(load_split(dir.path(), "train"), Err(CorpusError::LengthMismatch { line: 2 })));
    }

    #[test]
    fn malformed_tag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("train"), "to boston\n", "O X-city\n", "flight\n");
        match load_split(dir.path(), "train") {
            Err(CorpusError::MalformedTag { line: 1, tag }) => assert_eq!(tag, "X-city"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_split(dir.path(), "train"), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn single_example_vocab() {
        let v = Vocabulary::build(&[ex("hi", "O", "greet")]).unwrap();
        assert_eq!(v.num_tokens(), 4);
        assert_eq!(v.token(3), "hi");
        assert_eq!(v.num_slot_tags(), 1);
        assert_eq!(v.slot_tag(2), "O");
        assert_eq!(v.num_intents(), 1);
        assert!(matches!(Vocabulary::build(&[]), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocabulary::build(&[ex("b a", "B-x O", "i2"), ex("c", "I-x", "i1")]).unwrap();
        let again = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, again);
        assert_eq!(v.hash(), again.hash());
        assert_eq!(v.intents(), &["i1".to_string(), "i2".to_string()]);
    }

    #[test]
    fn encode_pads_and_masks() {
        let train = [ex("a b c", "O O O", "x"), ex("a b c d e", "O O O O O", "x")];
        let v = Vocabulary::build(&train).unwrap();
        let b = encode_batch(&train, &v, 50).unwrap();
        assert_eq!(b.seq_len(), 6);
        assert_eq!(b.token_ids.len(), 12);
        assert_eq!(&b.pad_mask[..6], &[true, true, true, true, false, false]);
        assert_eq!(b.token_ids[0], SPECIALS.cls);
        assert_eq!(b.token_ids[6], SPECIALS.cls);
        assert_eq!(b.slot_ids[3], SPECIALS.slot_pad);
        assert_eq!(b.decode(&v), train.to_vec());
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = Vocabulary::build(&[ex("a", "O", "x")]).unwrap();
        let b = encode_batch(&[ex("zzz", "O", "x")], &v, 10).unwrap();
        assert_eq!(b.token_ids[1], SPECIALS.unk);
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let v = Vocabulary::build(&[ex("a", "O", "x")]).unwrap();
        assert!(matches!(
            encode_batch(&[ex("a", "B-new", "x")], &v, 10),
            Err(CorpusError::UnknownLabel { kind: "slot", .. })
        ));
        assert!(matches!(
            encode_batch(&[ex("a", "O", "y")], &v, 10),
            Err(CorpusError::UnknownLabel { kind: "intent", .. })
        ));
    }

    #[test]
    fn too_long_is_rejected() {
        let v = Vocabulary::build(&[ex("a a a", "O O O", "x")]).unwrap();
        assert!(matches!(
            encode_batch(&[ex("a", "O", "x"), ex("a a a", "O O O", "x")], &v, 2),
            Err(CorpusError::SequenceTooLong { index: 1, .. })
        ));
    }

    #[test]
    fn buckets_cover_every_index_once() {
        let lengths: Vec<usize> = (0..103).map(|i| 1 + (i * 7) % 13).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches = bucketed_batches(&lengths, 8, 4, &mut rng);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 8));
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(batches, bucketed_batches(&lengths, 8, 4, &mut rng2));
    }

    #[test]
    fn atis_shaped_vocabulary_sizes() {
        let spec = SyntheticSpec::atis_shaped();
        let v = spec.vocabulary();
        assert_eq!(v.num_intents(), 21);
        assert_eq!(v.num_slot_tags(), 120);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = synthetic_examples(&spec, 200, &mut rng);
        let mean = data.iter().map(Example::len).sum::<usize>() as f64 / 200.0;
        assert!((9.0..=13.0).contains(&mean), "mean length {mean}");
        assert!(encode_batch(&data, &v, 18).is_ok());
        assert!(data.iter().all(|e| e.slot_labels.iter().all(|t| is_valid_tag(t))));
    }

    #[test]
    fn padding_keeps_real_positions() {
        let v = Vocabulary::build(&[ex("a b", "O B-x", "i")]).unwrap();
        let b = encode_batch(&[ex("a b", "O B-x", "i"), ex("b", "B-x", "i")], &v, 10).unwrap();
        let p = b.padded_to(5);
        assert_eq!(p.seq_len(), 6);
        assert_eq!(p.decode(&v), b.decode(&v));
        assert_eq!(p.token_mask().iter().filter(|&&m| m).count(), 3);
        assert_eq!(b.padded_to(1), b);
    }
}
