//! Synthetic corpora: a pretraining grammar and templated instruction tasks.
//!
//! Files hold one example per line as `prompt<TAB>response`; a line without
//! a tab is a response with an empty prompt (pretraining text).

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{TokenSeq, Vocab};

pub const GENERATOR: &str = "dkd-synthetic-v1";
pub const PRETRAIN_FILE: &str = "pretrain.tsv";
pub const SFT_TRAIN_FILE: &str = "sft_train.tsv";
pub const SFT_TEST_FILE: &str = "sft_test.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Letters the instruction tasks draw from.
const TASK_LETTERS: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub response: String,
    pub split: Split,
}

impl Example {
    pub fn to_seq(&self, vocab: &Vocab) -> Result<TokenSeq> {
        TokenSeq::from_example(vocab, &self.prompt, &self.response)
    }
}

/// Relative weights of the instruction tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMix {
    pub reverse: f64,
    pub sort: f64,
    pub continue_pattern: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { reverse: 1.0, sort: 1.0, continue_pattern: 1.0 }
    }
}

impl TaskMix {
    pub fn validate(&self) -> Result<()> {
        let w = [self.reverse, self.sort, self.continue_pattern];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(vec![format!(
                "task_mix weights must be non-negative with a positive sum, got {self}"
            )]));
        }
        Ok(())
    }
}

impl fmt::Display for TaskMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.reverse, self.sort, self.continue_pattern)
    }
}

impl FromStr for TaskMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config(vec![format!("task_mix {s:?} is not three comma-separated numbers")]))?;
        let [reverse, sort, continue_pattern] = parts[..] else {
            return Err(Error::Config(vec![format!("task_mix {s:?} needs exactly three weights")]));
        };
        let mix = Self { reverse, sort, continue_pattern };
        mix.validate()?;
        Ok(mix)
    }
}

/// Longest text (in characters) that still fits `BOS text EOS` into the
/// context.
fn max_text_chars(context_limit: usize) -> usize {
    context_limit.saturating_sub(2)
}

mod grammar {
    pub const DET: &[&str] = &["the", "a", "one", "every", "no", "my", "your", "this"];
    pub const ADJ: &[&str] = &["big", "small", "red", "old", "quick", "lazy", "happy", "dark", "green", "odd"];
    pub const NOUN: &[&str] = &[
        "cat", "dog", "bird", "fox", "king", "child", "robot", "river", "house", "tree", "ship",
        "book", "friend", "garden",
    ];
    pub const VERB_T: &[&str] = &["sees", "likes", "finds", "eats", "follows", "helps", "builds", "reads"];
    pub const VERB_I: &[&str] = &["sleeps", "runs", "sings", "waits", "falls", "smiles", "jumps"];
    pub const PREP: &[&str] = &["near", "under", "behind", "with", "over", "inside"];
    pub const ADV: &[&str] = &["today", "again", "slowly", "at night", "often", "now"];
    pub const CONJ: &[&str] = &["and", "but", "so", "while"];
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(pick(rng, grammar::DET));
    if rng.random_bool(0.4) {
        out.push(' ');
        out.push_str(pick(rng, grammar::ADJ));
    }
    out.push(' ');
    out.push_str(pick(rng, grammar::NOUN));
}

fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    if rng.random_bool(0.6) {
        out.push_str(pick(rng, grammar::VERB_T));
        out.push(' ');
        noun_phrase(rng, out);
    } else {
        out.push_str(pick(rng, grammar::VERB_I));
    }
    if rng.random_bool(0.3) {
        out.push(' ');
        out.push_str(pick(rng, grammar::PREP));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.random_bool(0.25) {
        out.push(' ');
        out.push_str(pick(rng, grammar::ADV));
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    match rng.random_range(0..10) {
        0 => {
            // small arithmetic facts keep digits in the inventory
            let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
            write!(s, "{a} + {b} = {}", a + b).unwrap();
        }
        1 => {
            s.push_str("does ");
            noun_phrase(rng, &mut s);
            s.push(' ');
            s.push_str(pick(rng, grammar::VERB_I).trim_end_matches('s'));
            s.push('?');
            return s;
        }
        _ => {
            clause(rng, &mut s);
            if rng.random_bool(0.2) {
                s.push_str(", ");
                s.push_str(pick(rng, grammar::CONJ));
                s.push(' ');
                clause(rng, &mut s);
            }
        }
    }
    s.push(if rng.random_bool(0.1) { '!' } else { '.' });
    s
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sentences from a small probabilistic grammar. Deterministic per seed;
/// every sentence fits the context.
pub fn generate_pretrain_corpus(seed: u64, size: usize, context_limit: usize) -> Result<Vec<Example>> {
    if size == 0 {
        return Err(Error::input("pretrain corpus size must be at least 1"));
    }
    let limit = max_text_chars(context_limit);
    if limit < 8 {
        return Err(Error::input(format!("context limit {context_limit} is too small for the grammar")));
    }
    let mut rng = rng_for(seed, 1);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let s = sentence(&mut rng);
        if s.chars().count() <= limit {
            out.push(Example { prompt: String::new(), response: s, split: Split::Train });
        }
    }
    Ok(out)
}

fn letters(rng: &mut ChaCha8Rng, n: usize) -> Vec<char> {
    (0..n).map(|_| *TASK_LETTERS.choose(rng).unwrap()).collect()
}

fn spaced(cs: &[char]) -> String {
    let mut s = String::with_capacity(cs.len() * 2);
    for (i, c) in cs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push(*c);
    }
    s
}

/// One instruction example, task chosen by `mix`.
fn task_example(rng: &mut ChaCha8Rng, mix: &TaskMix) -> (String, String) {
    let total = mix.reverse + mix.sort + mix.continue_pattern;
    let r = rng.random_range(0.0..total);
    if r < mix.reverse {
        let n = rng.random_range(3..=6);
        let xs = letters(rng, n);
        let rev: Vec<char> = xs.iter().rev().copied().collect();
        (format!("rev: {}", spaced(&xs)), spaced(&rev))
    } else if r < mix.reverse + mix.sort {
        let n = rng.random_range(3..=6);
        let xs = letters(rng, n);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        (format!("sort: {}", spaced(&xs)), spaced(&sorted))
    } else {
        let period = rng.random_range(2..=4);
        // resample until the unit is not itself a repetition, so the
        // answer is unambiguous
        let unit = loop {
            let u = letters(rng, period);
            if (1..period).all(|p| period % p != 0 || u.chunks(p).any(|c| c != &u[..p])) {
                break u;
            }
        };
        let reps = if period == 4 { 2 } else { rng.random_range(2..=3) };
        let shown: Vec<char> = unit.iter().copied().cycle().take(period * reps).collect();
        (format!("cont: {}", spaced(&shown)), spaced(&unit))
    }
}

/// Instruction corpus: `test_size` test examples first, then `train_size`
/// training examples whose prompts never occur in the test split.
pub fn generate_sft_corpus(
    seed: u64,
    train_size: usize,
    test_size: usize,
    mix: &TaskMix,
) -> Result<(Vec<Example>, Vec<Example>)> {
    mix.validate()?;
    let mut rng = rng_for(seed, 2);
    let mut test_prompts = HashSet::new();
    let mut test = Vec::with_capacity(test_size);
    let budget = 100 * (train_size + test_size) + 1000;
    let mut attempts = 0;
    while test.len() < test_size {
        attempts += 1;
        if attempts > budget {
            return Err(Error::input("could not draw enough distinct test prompts"));
        }
        let (prompt, response) = task_example(&mut rng, mix);
        if test_prompts.insert(prompt.clone()) {
            test.push(Example { prompt, response, split: Split::Test });
        }
    }
    let mut train = Vec::with_capacity(train_size);
    while train.len() < train_size {
        attempts += 1;
        if attempts > budget {
            return Err(Error::input("could not draw enough training prompts outside the test split"));
        }
        let (prompt, response) = task_example(&mut rng, mix);
        if !test_prompts.contains(&prompt) {
            train.push(Example { prompt, response, split: Split::Train });
        }
    }
    Ok((train, test))
}

pub fn format_examples(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        if !e.prompt.is_empty() {
            out.push_str(&e.prompt);
            out.push('\t');
        }
        out.push_str(&e.response);
        out.push('\n');
    }
    out
}

/// Parses the line format, checking every character against `vocab` and
/// every example against the context limit.
pub fn parse_examples(text: &str, split: Split, vocab: &Vocab, context_limit: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.is_empty() {
            continue;
        }
        let (prompt, response) = match line.split_once('\t') {
            Some((p, r)) => (p, r),
            None => ("", line),
        };
        if response.contains('\t') {
            return Err(Error::input(format!("line {line_no}: more than one tab")));
        }
        let ex = Example { prompt: prompt.into(), response: response.into(), split };
        let seq = ex.to_seq(vocab).map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("line {line_no}: {m}")),
            other => other,
        })?;
        if seq.len() > context_limit {
            return Err(Error::input(format!(
                "line {line_no}: example needs {} tokens, context limit is {context_limit}",
                seq.len()
            )));
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::input("no examples found"));
    }
    Ok(out)
}

pub fn read_examples(path: &Path, split: Split, vocab: &Vocab, context_limit: usize) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format_args!("reading {}", path.display()), e))?;
    parse_examples(&text, split, vocab, context_limit).map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Everything needed to regenerate a corpus directory byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub generator: String,
    pub seed: u64,
    pub pretrain_size: usize,
    pub sft_train_size: usize,
    pub sft_test_size: usize,
    pub task_mix: TaskMix,
    pub context_limit: usize,
    pub vocab_fingerprint: u64,
    /// `(file name, hex SHA-256)` of each generated file.
    pub files: Vec<(String, String)>,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "generator={}", self.generator).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "pretrain_size={}", self.pretrain_size).unwrap();
        writeln!(s, "sft_train_size={}", self.sft_train_size).unwrap();
        writeln!(s, "sft_test_size={}", self.sft_test_size).unwrap();
        writeln!(s, "task_mix={}", self.task_mix).unwrap();
        writeln!(s, "context_limit={}", self.context_limit).unwrap();
        writeln!(s, "vocab_fingerprint={:016x}", self.vocab_fingerprint).unwrap();
        for (name, hash) in &self.files {
            writeln!(s, "sha256.{name}={hash}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = CorpusManifest {
            generator: String::new(),
            seed: 0,
            pretrain_size: 0,
            sft_train_size: 0,
            sft_test_size: 0,
            task_mix: TaskMix::default(),
            context_limit: 0,
            vocab_fingerprint: 0,
            files: Vec::new(),
        };
        let mut seen = HashSet::new();
        let mut bad = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let Some((k, v)) = line.split_once('=') else {
                bad.push(format!("manifest line {line:?} is not key=value"));
                continue;
            };
            let num = |v: &str, bad: &mut Vec<String>| {
                v.parse::<u64>().unwrap_or_else(|_| {
                    bad.push(format!("manifest key {k}: {v:?} is not an integer"));
                    0
                })
            };
            seen.insert(k.to_string());
            match k {
                "generator" => m.generator = v.into(),
                "seed" => m.seed = num(v, &mut bad),
                "pretrain_size" => m.pretrain_size = num(v, &mut bad) as usize,
                "sft_train_size" => m.sft_train_size = num(v, &mut bad) as usize,
                "sft_test_size" => m.sft_test_size = num(v, &mut bad) as usize,
                "context_limit" => m.context_limit = num(v, &mut bad) as usize,
                "task_mix" => match v.parse() {
                    Ok(mix) => m.task_mix = mix,
                    Err(e) => bad.push(e.to_string()),
                },
                "vocab_fingerprint" => match u64::from_str_radix(v, 16) {
                    Ok(f) => m.vocab_fingerprint = f,
                    Err(_) => bad.push(format!("manifest key vocab_fingerprint: {v:?} is not hex")),
                },
                k if k.starts_with("sha256.") => m.files.push((k["sha256.".len()..].into(), v.into())),
                other => bad.push(format!("unknown manifest key {other:?}")),
            }
        }
        for k in ["generator", "seed", "pretrain_size", "sft_train_size", "sft_test_size", "context_limit"] {
            if !seen.contains(k) {
                bad.push(format!("manifest is missing {k}"));
            }
        }
        if bad.is_empty() {
            Ok(m)
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Parameters for [`generate_corpus_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub pretrain_size: usize,
    pub sft_train_size: usize,
    pub sft_test_size: usize,
    pub task_mix: TaskMix,
    pub context_limit: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_size: 50_000,
            sft_train_size: 5_000,
            sft_test_size: 500,
            task_mix: TaskMix::default(),
            context_limit: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub pretrain: Vec<Example>,
    pub sft_train: Vec<Example>,
    pub sft_test: Vec<Example>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let pretrain = generate_pretrain_corpus(spec.seed, spec.pretrain_size, spec.context_limit)?;
    let (sft_train, sft_test) =
        generate_sft_corpus(spec.seed, spec.sft_train_size, spec.sft_test_size, &spec.task_mix)?;
    Ok(Corpus { pretrain, sft_train, sft_test })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the three corpus files and a manifest into `dir`.
pub fn generate_corpus_dir(spec: &CorpusSpec, vocab: &Vocab, dir: &Path) -> Result<CorpusManifest> {
    let corpus = generate_corpus(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format_args!("creating {}", dir.display()), e))?;
    let mut files = Vec::new();
    for (name, examples) in [
        (PRETRAIN_FILE, &corpus.pretrain),
        (SFT_TRAIN_FILE, &corpus.sft_train),
        (SFT_TEST_FILE, &corpus.sft_test),
    ] {
        for e in examples.iter() {
            e.to_seq(vocab)?;
        }
        let text = format_examples(examples);
        let path = dir.join(name);
        fs::write(&path, &text).map_err(|e| Error::io(format_args!("writing {}", path.display()), e))?;
        files.push((name.to_string(), sha256_hex(text.as_bytes())));
    }
    let manifest = CorpusManifest {
        generator: GENERATOR.into(),
        seed: spec.seed,
        pretrain_size: spec.pretrain_size,
        sft_train_size: spec.sft_train_size,
        sft_test_size: spec.sft_test_size,
        task_mix: spec.task_mix,
        context_limit: spec.context_limit,
        vocab_fingerprint: vocab.fingerprint(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(format_args!("writing {}", path.display()), e))?;
    Ok(manifest)
}

impl CorpusManifest {
    pub fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            pretrain_size: self.pretrain_size,
            sft_train_size: self.sft_train_size,
            sft_test_size: self.sft_test_size,
            task_mix: self.task_mix,
            context_limit: self.context_limit,
        }
    }

    /// Regenerates the corpus in memory and checks every recorded hash.
    pub fn verify_regeneration(&self) -> Result<()> {
        if self.generator != GENERATOR {
            return Err(Error::input(format!("unknown generator {:?}", self.generator)));
        }
        let corpus = generate_corpus(&self.spec())?;
        for (name, hash) in &self.files {
            let examples = match name.as_str() {
                PRETRAIN_FILE => &corpus.pretrain,
                SFT_TRAIN_FILE => &corpus.sft_train,
                SFT_TEST_FILE => &corpus.sft_test,
                other => return Err(Error::input(format!("manifest lists unknown file {other:?}"))),
            };
            let got = sha256_hex(format_examples(examples).as_bytes());
            if &got != hash {
                return Err(Error::input(format!("regenerated {name} hashes to {got}, manifest says {hash}")));
            }
        }
        Ok(())
    }
}

/// Loads a corpus directory written by [`generate_corpus_dir`] (or by hand
/// in the same format).
pub fn load_corpus_dir(dir: &Path, vocab: &Vocab, context_limit: usize) -> Result<Corpus> {
    Ok(Corpus {
        pretrain: read_examples(&dir.join(PRETRAIN_FILE), Split::Train, vocab, context_limit)?,
        sft_train: read_examples(&dir.join(SFT_TRAIN_FILE), Split::Train, vocab, context_limit)?,
        sft_test: read_examples(&dir.join(SFT_TEST_FILE), Split::Test, vocab, context_limit)?,
    })
}
