//! Synthetic classification tasks, TSV ingestion, and batching.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
/// First id available to task symbols.
pub const FIRST_SYMBOL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    SingleSentence,
    SentencePair,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    /// Includes the leading `[CLS]` and any `[SEP]` tokens.
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub label: usize,
}

impl Example {
    fn single(symbols: &[usize], label: usize) -> Self {
        let mut tokens = vec![CLS];
        tokens.extend(symbols);
        Example {
            segments: vec![0; tokens.len()],
            tokens,
            label,
        }
    }

    fn pair(first: &[usize], second: &[usize], label: usize) -> Self {
        let mut tokens = vec![CLS];
        tokens.extend(first);
        tokens.push(SEP);
        let split = tokens.len();
        tokens.extend(second);
        tokens.push(SEP);
        let segments = (0..tokens.len()).map(|i| usize::from(i >= split)).collect();
        Example {
            tokens,
            segments,
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task_type: TaskType,
    pub metric: Metric,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
        }
    }

    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.dev)
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0)
    }

    /// SHA-256 over every example in order, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, split) in [(b'T', &self.train), (b'D', &self.dev)] {
            for e in split {
                h.update([tag]);
                hash_example(&mut h, e);
            }
        }
        hex(&h.finalize())
    }

    /// Keeps the first `n` training examples.
    pub fn truncate_train(&mut self, n: usize) {
        self.train.truncate(n);
    }
}

fn hash_example(h: &mut Sha256, e: &Example) {
    h.update((e.tokens.len() as u64).to_le_bytes());
    for (&t, &s) in e.tokens.iter().zip(&e.segments) {
        h.update((t as u64).to_le_bytes());
        h.update((s as u64).to_le_bytes());
    }
    h.update((e.label as u64).to_le_bytes());
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Padded mini-batch, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Unpadded length of each row; keys at or beyond it are masked out.
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap();
        let mut batch = Batch {
            batch_size: examples.len(),
            seq_len,
            token_ids: Vec::with_capacity(examples.len() * seq_len),
            segment_ids: Vec::with_capacity(examples.len() * seq_len),
            lengths: Vec::with_capacity(examples.len()),
            labels: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            let pad = seq_len - e.tokens.len();
            batch.token_ids.extend(&e.tokens);
            batch.token_ids.extend(std::iter::repeat_n(PAD, pad));
            batch.segment_ids.extend(&e.segments);
            batch.segment_ids.extend(std::iter::repeat_n(0, pad));
            batch.lengths.push(e.tokens.len());
            batch.labels.push(e.label);
        }
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.batch_size * self.seq_len;
        if self.batch_size == 0
            || self.seq_len == 0
            || self.token_ids.len() != n
            || self.segment_ids.len() != n
            || self.lengths.len() != self.batch_size
            || self.lengths.iter().any(|&l| l == 0 || l > self.seq_len)
        {
            return Err(Error::Contract("inconsistent batch layout".into()));
        }
        if self
            .segment_ids
            .iter()
            .any(|&s| s >= crate::model::SEGMENT_VOCAB)
        {
            return Err(Error::Input("segment id out of range".into()));
        }
        Ok(())
    }
}

/// XOR of a bit sequence.
pub fn parity_label(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| acc ^ usize::from(b & 1))
}

/// Binary sequences labeled by parity; train and dev draw distinct sequences.
///
/// Each label is flipped independently with probability `label_noise`.
pub fn gen_parity(
    n_train: usize,
    n_dev: usize,
    seq_len: usize,
    label_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if seq_len == 0 || seq_len >= 63 {
        return Err(Error::Contract(format!(
            "parity seq_len {seq_len} unsupported"
        )));
    }
    let space = 1u64 << seq_len;
    let total = (n_train + n_dev) as u64;
    if total > space {
        return Err(Error::Contract(format!(
            "{total} distinct sequences requested but only {space} exist at length {seq_len}"
        )));
    }
    let mut rng = Rng::new(seed);
    let codes: Vec<u64> = if total * 2 > space {
        let mut all: Vec<u64> = (0..space).collect();
        rng.shuffle(&mut all);
        all.truncate(total as usize);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(total as usize);
        while out.len() < total as usize {
            let c = rng.next_u64() & (space - 1);
            if seen.insert(c) {
                out.push(c);
            }
        }
        out
    };
    let mut examples: Vec<Example> = codes
        .iter()
        .map(|&c| {
            let bits: Vec<u8> = (0..seq_len).map(|i| ((c >> i) & 1) as u8).collect();
            let mut label = parity_label(&bits);
            if label_noise > 0.0 && rng.bernoulli(label_noise) {
                label ^= 1;
            }
            let symbols: Vec<usize> = bits.iter().map(|&b| FIRST_SYMBOL + b as usize).collect();
            Example::single(&symbols, label)
        })
        .collect();
    let dev = examples.split_off(n_train);
    Ok(Dataset {
        name: "parity".into(),
        task_type: TaskType::SingleSentence,
        metric: Metric::Accuracy,
        vocab_size: FIRST_SYMBOL + 2,
        num_classes: 2,
        train: examples,
        dev,
    })
}

/// True iff `b` is a rearrangement of `a`.
pub fn is_multiset_match(a: &[usize], b: &[usize]) -> bool {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_unstable();
    y.sort_unstable();
    x == y
}

/// Sentence pairs labeled 1 iff the second segment is a shuffled copy of the
/// first. Negatives are shuffled copies with one symbol substituted.
pub fn gen_pair_match(
    n_train: usize,
    n_dev: usize,
    vocab: usize,
    segment_len: usize,
    label_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if vocab < 8 {
        return Err(Error::Contract(format!(
            "pair_match needs vocab >= 8, got {vocab}"
        )));
    }
    if segment_len == 0 {
        return Err(Error::Contract("segment_len must be positive".into()));
    }
    let symbols = vocab - FIRST_SYMBOL;
    let mut rng = Rng::new(seed);
    let mut seen = HashSet::new();
    let mut make_split = |n: usize, rng: &mut Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 1000 {
                return Err(Error::Contract(format!(
                    "could not draw {n} distinct pairs at vocab {vocab}, segment length {segment_len}"
                )));
            }
            let positive = out.len() % 2 == 0;
            let first: Vec<usize> = (0..segment_len)
                .map(|_| FIRST_SYMBOL + rng.below(symbols))
                .collect();
            let mut second = first.clone();
            rng.shuffle(&mut second);
            if !positive {
                let pos = rng.below(segment_len);
                let old = second[pos];
                let mut replacement = FIRST_SYMBOL + rng.below(symbols - 1);
                if replacement >= old {
                    replacement += 1;
                }
                second[pos] = replacement;
            }
            if !seen.insert((first.clone(), second.clone())) {
                continue;
            }
            let mut label = usize::from(positive);
            if label_noise > 0.0 && rng.bernoulli(label_noise) {
                label ^= 1;
            }
            out.push(Example::pair(&first, &second, label));
        }
        rng.shuffle(&mut out);
        Ok(out)
    };
    let train = make_split(n_train, &mut rng)?;
    let dev = make_split(n_dev, &mut rng)?;
    Ok(Dataset {
        name: "pair_match".into(),
        task_type: TaskType::SentencePair,
        metric: Metric::Accuracy,
        vocab_size: vocab,
        num_classes: 2,
        train,
        dev,
    })
}

/// Column layout of a TSV file with a header row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSchema {
    pub sentence: String,
    #[serde(default)]
    pub sentence2: Option<String>,
    pub label: String,
    /// Total ids including the reserved ones.
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Frequency-descending, then lexicographic, capped at `cap` total ids.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = cap.saturating_sub(FIRST_SYMBOL);
        let ids = ranked
            .into_iter()
            .take(room)
            .enumerate()
            .map(|(i, (w, _))| (w.to_string(), FIRST_SYMBOL + i))
            .collect();
        Vocab { ids }
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.ids.len() + FIRST_SYMBOL
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
struct TsvRow {
    first: Vec<String>,
    second: Option<Vec<String>>,
    label: usize,
}

fn read_tsv(path: &Path, schema: &TsvSchema) -> Result<Vec<TsvRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Input(format!("{} is empty", path.display())));
    };
    let cols: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Input(format!("{}: missing column {name:?}", path.display())))
    };
    let c1 = find(&schema.sentence)?;
    let c2 = schema.sentence2.as_deref().map(find).transpose()?;
    let cl = find(&schema.label)?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let lineno = i + 1;
        if fields.len() != cols.len() {
            return Err(Error::Input(format!(
                "{}:{lineno}: expected {} fields, found {}",
                path.display(),
                cols.len(),
                fields.len()
            )));
        }
        let label = fields[cl].trim().parse::<usize>().map_err(|_| {
            Error::Input(format!(
                "{}:{lineno}: label {:?} is not a class index",
                path.display(),
                fields[cl]
            ))
        })?;
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect();
        rows.push(TsvRow {
            first: words(fields[c1]),
            second: c2.map(|c| words(fields[c])),
            label,
        });
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{} has no data rows", path.display())));
    }
    Ok(rows)
}

fn encode(row: &TsvRow, vocab: &Vocab, max_len: usize) -> Example {
    let ids = |ws: &[String]| ws.iter().map(|w| vocab.id(w)).collect::<Vec<_>>();
    let mut ex = match &row.second {
        None => Example::single(&ids(&row.first), row.label),
        Some(second) => Example::pair(&ids(&row.first), &ids(second), row.label),
    };
    ex.tokens.truncate(max_len);
    ex.segments.truncate(max_len);
    ex
}

/// Loads one TSV file, building the vocabulary from that same file.
pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<(Vocab, Vec<Example>)> {
    let rows = read_tsv(path, schema)?;
    let vocab = vocab_of(&rows, schema.vocab_size);
    let examples = rows
        .iter()
        .map(|r| encode(r, &vocab, schema.max_seq_len))
        .collect();
    Ok((vocab, examples))
}

fn vocab_of(rows: &[TsvRow], cap: usize) -> Vocab {
    Vocab::build(
        rows.iter().flat_map(|r| {
            r.first
                .iter()
                .chain(r.second.iter().flatten())
                .map(String::as_str)
        }),
        cap,
    )
}

/// Train/dev TSV pair; the vocabulary comes from the training file only.
pub fn load_tsv_task(train: &Path, dev: &Path, schema: &TsvSchema) -> Result<Dataset> {
    let train_rows = read_tsv(train, schema)?;
    let dev_rows = read_tsv(dev, schema)?;
    let vocab = vocab_of(&train_rows, schema.vocab_size);
    let enc = |rows: &[TsvRow]| -> Vec<Example> {
        rows.iter()
            .map(|r| encode(r, &vocab, schema.max_seq_len))
            .collect()
    };
    let (train, dev) = (enc(&train_rows), enc(&dev_rows));
    let num_classes = train.iter().chain(&dev).map(|e| e.label).max().unwrap_or(0) + 1;
    Ok(Dataset {
        name: "tsv".into(),
        task_type: if schema.sentence2.is_some() {
            TaskType::SentencePair
        } else {
            TaskType::SingleSentence
        },
        metric: Metric::Accuracy,
        vocab_size: schema.vocab_size.max(vocab.len()),
        num_classes: num_classes.max(2),
        train,
        dev,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Parity,
    PairMatch,
    Tsv,
}

/// Declarative description of a task, as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub name: String,
    pub source: TaskSource,
    pub metric: Metric,
    pub n_train: usize,
    pub n_dev: usize,
    /// Symbols per sequence (parity) or per segment (pair_match).
    pub seq_len: usize,
    pub vocab_size: usize,
    pub label_noise: f64,
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub tsv: Option<TsvSchema>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            name: "parity".into(),
            source: TaskSource::Parity,
            metric: Metric::Accuracy,
            n_train: 2000,
            n_dev: 500,
            seq_len: 12,
            vocab_size: 16,
            label_noise: 0.0,
            seed: 17,
            train_path: None,
            dev_path: None,
            tsv: None,
        }
    }
}

impl TaskSpec {
    pub fn build(&self) -> Result<Dataset> {
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must be in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        let mut ds = match self.source {
            TaskSource::Parity => gen_parity(
                self.n_train,
                self.n_dev,
                self.seq_len,
                self.label_noise,
                self.seed,
            )?,
            TaskSource::PairMatch => gen_pair_match(
                self.n_train,
                self.n_dev,
                self.vocab_size,
                self.seq_len,
                self.label_noise,
                self.seed,
            )?,
            TaskSource::Tsv => {
                let (Some(train), Some(dev), Some(schema)) =
                    (&self.train_path, &self.dev_path, &self.tsv)
                else {
                    return Err(Error::Config(
                        "tsv task needs train_path, dev_path and [task.tsv]".into(),
                    ));
                };
                load_tsv_task(train, dev, schema)?
            }
        };
        if ds.train.is_empty() || ds.dev.is_empty() {
            return Err(Error::Config(
                "task needs nonempty train and dev splits".into(),
            ));
        }
        ds.name = self.name.clone();
        ds.metric = self.metric;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_labels() {
        assert_eq!(parity_label(&[1, 0, 1]), 0);
        assert_eq!(parity_label(&[1, 1, 1]), 1);
    }

    #[test]
    fn parity_splits_disjoint_and_reproducible() {
        let a = gen_parity(300, 100, 10, 0.0, 5).unwrap();
        let b = gen_parity(300, 100, 10, 0.0, 5).unwrap();
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.content_hash(), b.content_hash());
        let train: HashSet<_> = a.train.iter().map(|e| &e.tokens).collect();
        assert!(a.dev.iter().all(|e| !train.contains(&e.tokens)));
        for e in a.train.iter().chain(&a.dev) {
            let bits: Vec<u8> = e.tokens[1..]
                .iter()
                .map(|&t| (t - FIRST_SYMBOL) as u8)
                .collect();
            assert_eq!(e.label, parity_label(&bits));
        }
    }

    #[test]
    fn parity_rejects_impossible_request() {
        assert!(gen_parity(10, 10, 4, 0.0, 1).is_err());
        // the dense path enumerates the whole space
        let full = gen_parity(10, 6, 4, 0.0, 1).unwrap();
        assert_eq!(full.train.len() + full.dev.len(), 16);
    }

    #[test]
    fn multiset_examples() {
        assert!(is_multiset_match(&[1, 2, 3], &[3, 1, 2]));
        assert!(!is_multiset_match(&[1, 2, 3], &[1, 2, 4]));
    }

    #[test]
    fn pair_match_balanced_and_correct() {
        let ds = gen_pair_match(201, 100, 12, 4, 0.0, 9).unwrap();
        for split in [&ds.train, &ds.dev] {
            let pos = split.iter().filter(|e| e.label == 1).count() as i64;
            let n = split.len() as i64;
            assert!((2 * pos - n).abs() <= 2, "pos {pos} of {n}");
            for e in split {
                let sep = e.tokens.iter().position(|&t| t == SEP).unwrap();
                let first = &e.tokens[1..sep];
                let second = &e.tokens[sep + 1..e.tokens.len() - 1];
                assert_eq!(e.label == 1, is_multiset_match(first, second));
                assert_eq!(e.segments[sep], 0);
                assert_eq!(e.segments[sep + 1], 1);
            }
        }
        let train: HashSet<_> = ds.train.iter().map(|e| &e.tokens).collect();
        assert!(ds.dev.iter().all(|e| !train.contains(&e.tokens)));
    }

    #[test]
    fn batch_pads_with_lengths() {
        let a = Example::single(&[4, 5], 1);
        let b = Example::single(&[4, 5, 5, 4], 0);
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        assert_eq!(batch.seq_len, 5);
        assert_eq!(batch.lengths, vec![3, 5]);
        assert_eq!(&batch.token_ids[..5], &[CLS, 4, 5, PAD, PAD]);
        assert!(Batch::from_examples(&[]).is_err());
    }

    #[test]
    fn vocab_order_is_frequency_then_lexicographic() {
        let v = Vocab::build(["b", "a", "c", "b", "a", "d"], FIRST_SYMBOL + 3);
        assert_eq!(v.id("a"), FIRST_SYMBOL);
        assert_eq!(v.id("b"), FIRST_SYMBOL + 1);
        assert_eq!(v.id("c"), FIRST_SYMBOL + 2);
        assert_eq!(v.id("d"), UNK);
    }
}
