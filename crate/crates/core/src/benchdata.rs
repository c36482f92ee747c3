//! Synthetic classification tasks with a per-example difficulty stratum.
//!
//! Every sequence starts with the classification token `0` at position 0.
//! Within a split, example `k` gets difficulty `k mod levels` and label
//! `(k / levels) mod classes` before the split is shuffled, so strata and
//! labels are balanced by construction.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const CLS_TOKEN: usize = 0;
/// Allowed deviation of any class frequency from uniform, per split and per stratum.
pub const BALANCE_TOLERANCE: f64 = 0.02;
const MAX_DRAWS_PER_EXAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Majority token class, with label-flip noise growing with difficulty.
    NoisyMajority,
    /// Parity of the designated token over a prefix that grows with difficulty.
    PrefixParity,
    /// Nested indirection: the label is the class of
    /// `tokens[tokens[..tokens[1]..]]` with `difficulty` levels of nesting.
    /// Difficulty 0 stores the class value at position 1 directly. Every
    /// class has a chain of the same length, so value tokens alone say
    /// nothing about the label.
    PatternDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub difficulty_levels: usize,
    pub examples_per_split: SplitSizes,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: Task::NoisyMajority,
            vocab_size: 32,
            seq_len: 32,
            num_classes: 2,
            difficulty_levels: 4,
            examples_per_split: SplitSizes {
                train: 4096,
                dev: 512,
                test: 512,
            },
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.difficulty_levels < 2 {
            return fail("difficulty_levels must be at least 2".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.seq_len < 2 {
            return fail("seq_len must be at least 2".into());
        }
        match self.task {
            Task::NoisyMajority => {
                if self.vocab_size < self.num_classes + 1 {
                    return fail(format!(
                        "noisy_majority needs vocab_size >= num_classes + 1 = {}",
                        self.num_classes + 1
                    ));
                }
                if self.difficulty_levels > 10 {
                    return fail("noisy_majority supports at most 10 difficulty levels".into());
                }
            }
            Task::PrefixParity => {
                if self.num_classes != 2 {
                    return fail("prefix_parity is a two-class task".into());
                }
                if self.vocab_size < 4 {
                    return fail("prefix_parity needs vocab_size >= 4".into());
                }
                if self.difficulty_levels > self.seq_len - 1 {
                    return fail("prefix_parity needs difficulty_levels <= seq_len - 1".into());
                }
            }
            Task::PatternDepth => {
                if self.vocab_size < self.seq_len + self.num_classes {
                    return fail(format!(
                        "pattern_depth needs vocab_size >= seq_len + num_classes = {}",
                        self.seq_len + self.num_classes
                    ));
                }
                let need = self.num_classes * self.difficulty_levels + 1;
                if self.seq_len < need {
                    return fail(format!(
                        "pattern_depth needs seq_len >= num_classes · difficulty_levels + 1 = {need}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub difficulty: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::input(format!("unknown split `{other}`"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Example> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    /// Writes `train.tsv`, `dev.tsv` and `test.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            save_split(&split_path(dir, split), self.split(split))?;
        }
        Ok(())
    }

    /// Reads the three split files; a missing file is an error, an empty one is not.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut data = Dataset::default();
        for split in Split::ALL {
            *data.split_mut(split) = load_split(&split_path(dir, split))?;
        }
        Ok(data)
    }
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tsv", split.name()))
}

/// One line per example: `difficulty \t label \t tok tok ...`.
pub fn format_split(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        write!(out, "{}\t{}\t", ex.difficulty, ex.label).expect("write to string");
        for (i, t) in ex.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{t}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn save_split(path: &Path, examples: &[Example]) -> Result<()> {
    fs::write(path, format_split(examples))?;
    Ok(())
}

pub fn parse_split(path: &Path, text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("{what} `{s}` is not a non-negative integer")))
        };
        let difficulty = num(fields[0], "difficulty")?;
        let label = num(fields[1], "label")?;
        let tokens = fields[2]
            .split(' ')
            .map(|t| num(t, "token"))
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(bad("no tokens".into()));
        }
        out.push(Example {
            tokens,
            label,
            difficulty,
        });
    }
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line,
            reason: "record not terminated by a newline (truncated file?)".into(),
        });
    }
    Ok(out)
}

pub fn load_split(path: &Path) -> Result<Vec<Example>> {
    parse_split(path, &fs::read_to_string(path)?)
}

/// Generates all three splits. Deterministic in `spec`; no token sequence
/// appears twice across the dataset.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut seen = HashSet::new();
    let mut data = Dataset::default();
    for (stream, split) in Split::ALL.into_iter().enumerate() {
        let size = match split {
            Split::Train => spec.examples_per_split.train,
            Split::Dev => spec.examples_per_split.dev,
            Split::Test => spec.examples_per_split.test,
        };
        let mut rng = RngStream::with_stream(spec.seed, stream as u64);
        let mut examples = Vec::with_capacity(size);
        for k in 0..size {
            let difficulty = k % spec.difficulty_levels;
            let label = (k / spec.difficulty_levels) % spec.num_classes;
            let mut draws = 0;
            let ex = loop {
                let ex = generate_example(spec, difficulty, label, &mut rng);
                if seen.insert(ex.tokens.clone()) {
                    break ex;
                }
                draws += 1;
                if draws >= MAX_DRAWS_PER_EXAMPLE {
                    return Err(Error::config(format!(
                        "cannot draw {size} distinct {} examples for difficulty {difficulty}; \
                         the task space is too small",
                        split.name()
                    )));
                }
            };
            examples.push(ex);
        }
        rng.shuffle(&mut examples);
        check_balance(&examples, spec.num_classes, spec.difficulty_levels).map_err(|e| {
            Error::config(format!("{} split: {e}", split.name()))
        })?;
        *data.split_mut(split) = examples;
    }
    Ok(data)
}

/// Largest deviation of a class frequency from `1/classes`, over the whole
/// split and over each difficulty stratum. Strata with no examples are skipped.
pub fn max_label_imbalance(examples: &[Example], classes: usize, levels: usize) -> f64 {
    let deviation = |subset: &mut dyn Iterator<Item = &Example>| {
        let mut counts = vec![0usize; classes];
        let mut total = 0usize;
        for ex in subset {
            if ex.label < classes {
                counts[ex.label] += 1;
            }
            total += 1;
        }
        if total == 0 {
            return 0.0;
        }
        counts
            .iter()
            .map(|&c| (c as f64 / total as f64 - 1.0 / classes as f64).abs())
            .fold(0.0, f64::max)
    };
    let mut worst = deviation(&mut examples.iter());
    for d in 0..levels {
        worst = worst.max(deviation(&mut examples.iter().filter(|e| e.difficulty == d)));
    }
    worst
}

pub fn check_balance(examples: &[Example], classes: usize, levels: usize) -> std::result::Result<(), String> {
    let worst = max_label_imbalance(examples, classes, levels);
    if worst >= BALANCE_TOLERANCE {
        return Err(format!(
            "class frequencies deviate from uniform by {worst:.4} (limit {BALANCE_TOLERANCE}); \
             use a split size that is a multiple of difficulty_levels · num_classes"
        ));
    }
    Ok(())
}

fn generate_example(spec: &TaskSpec, difficulty: usize, label: usize, rng: &mut RngStream) -> Example {
    let tokens = match spec.task {
        Task::NoisyMajority => noisy_majority(spec, difficulty, label, rng),
        Task::PrefixParity => prefix_parity(spec, difficulty, label, rng),
        Task::PatternDepth => pattern_depth(spec, difficulty, label, rng),
    };
    Example {
        tokens,
        label,
        difficulty,
    }
}

/// Class of a content token in `noisy_majority`.
pub fn majority_token_class(token: usize, classes: usize) -> usize {
    (token - 1) % classes
}

/// Label-flip probability of a `noisy_majority` stratum.
pub fn flip_probability(difficulty: usize) -> f64 {
    0.1 * difficulty as f64
}

fn noisy_majority(spec: &TaskSpec, difficulty: usize, label: usize, rng: &mut RngStream) -> Vec<usize> {
    let c = spec.num_classes;
    let majority = if rng.bernoulli(flip_probability(difficulty)) {
        (label + 1 + rng.below(c - 1)) % c
    } else {
        label
    };
    // Content ids of each class.
    let ids: Vec<Vec<usize>> = (0..c)
        .map(|k| (1..spec.vocab_size).filter(|&t| majority_token_class(t, c) == k).collect())
        .collect();
    let body = spec.seq_len - 1;
    let mut classes: Vec<usize> = (0..body).map(|_| rng.below(c)).collect();
    loop {
        let mut counts = vec![0usize; c];
        for &k in &classes {
            counts[k] += 1;
        }
        let top_other = (0..c).filter(|&k| k != majority).map(|k| counts[k]).max().unwrap_or(0);
        if counts[majority] > top_other {
            break;
        }
        let others: Vec<usize> = (0..body).filter(|&i| classes[i] != majority).collect();
        classes[others[rng.below(others.len())]] = majority;
    }
    let mut tokens = vec![CLS_TOKEN];
    tokens.extend(classes.iter().map(|&k| ids[k][rng.below(ids[k].len())]));
    tokens
}

pub const PARITY_TOKEN: usize = 1;
pub const PAD_TOKEN: usize = 2;

/// Number of content positions covered by the parity prefix of a stratum.
pub fn parity_prefix_len(seq_len: usize, levels: usize, difficulty: usize) -> usize {
    ((difficulty + 1) * (seq_len - 1)).div_ceil(levels)
}

fn prefix_parity(spec: &TaskSpec, difficulty: usize, label: usize, rng: &mut RngStream) -> Vec<usize> {
    let len = parity_prefix_len(spec.seq_len, spec.difficulty_levels, difficulty);
    let other = |rng: &mut RngStream| 3 + rng.below(spec.vocab_size - 3);
    let mut tokens = vec![CLS_TOKEN];
    for _ in 0..len {
        let t = if rng.bernoulli(0.5) { PARITY_TOKEN } else { other(rng) };
        tokens.push(t);
    }
    let count = tokens.iter().filter(|&&t| t == PARITY_TOKEN).count();
    if count % 2 != label {
        let i = 1 + rng.below(len);
        tokens[i] = if tokens[i] == PARITY_TOKEN { other(rng) } else { PARITY_TOKEN };
    }
    tokens.resize(spec.seq_len, PAD_TOKEN);
    tokens
}

/// Value token of class `c` in `pattern_depth`; ids below `seq_len` are pointers.
pub fn value_token(seq_len: usize, class: usize) -> usize {
    seq_len + class
}

fn pattern_depth(spec: &TaskSpec, difficulty: usize, label: usize, rng: &mut RngStream) -> Vec<usize> {
    let len = spec.seq_len;
    let chain_len = difficulty + 1;
    let mut free: Vec<usize> = (2..len).collect();
    rng.shuffle(&mut free);
    let mut free = free.into_iter();

    // One chain per class, all of the same length; the chain of `label`
    // starts at position 1.
    let mut tokens = vec![CLS_TOKEN; len];
    let mut used = vec![false; len];
    for class in 0..spec.num_classes {
        let class = (label + class) % spec.num_classes;
        let mut chain = Vec::with_capacity(chain_len);
        if class == label {
            chain.push(1);
        }
        while chain.len() < chain_len {
            chain.push(free.next().expect("validated: enough positions"));
        }
        for w in chain.windows(2) {
            tokens[w[0]] = w[1];
        }
        tokens[chain[chain_len - 1]] = value_token(len, class);
        for &p in &chain {
            used[p] = true;
        }
    }
    for pos in 1..len {
        if !used[pos] {
            tokens[pos] = 1 + rng.below(len - 1);
        }
    }
    tokens
}

/// Label of a `pattern_depth` sequence and the number of pointers followed,
/// or `None` if the walk from position 1 revisits a position.
pub fn follow_pointers(tokens: &[usize], seq_len: usize) -> Option<(usize, usize)> {
    let mut pos = 1;
    let mut hops = 0;
    let mut visited = vec![false; tokens.len()];
    loop {
        if visited[pos] {
            return None;
        }
        visited[pos] = true;
        let t = tokens[pos];
        if t >= seq_len {
            return Some((t - seq_len, hops));
        }
        pos = t;
        hops += 1;
    }
}
