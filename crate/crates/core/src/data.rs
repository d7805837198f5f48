//! Datasets: the news-headline task builder, a whitespace vocabulary, and a
//! synthetic keyword benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{CLS_ID, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::trainer::TaskData;

pub const BUILDER_VERSION: &str = "nhc-builder/1";
pub const NHC_TASKS: usize = 7;
pub const NHC_PER_CLASS: usize = 2000;
pub const NHC_TRAIN: usize = 3200;
pub const DEFAULT_MAX_LEN: usize = 128;
pub const TOKEN_POOL: usize = 5000;

/// A tokenized example tagged with its task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub task: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// On-disk example record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextDataset {
    pub name: String,
    pub train: Vec<TextExample>,
    pub eval: Vec<TextExample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsRecord {
    pub category: String,
    pub headline: String,
    #[serde(default)]
    pub short_description: String,
    #[serde(default)]
    pub authors: String,
    #[serde(default)]
    pub link: String,
    #[serde(default)]
    pub date: String,
}

/// Reads newline-delimited news records, skipping blank lines.
pub fn parse_news_records<R: Read>(reader: R) -> Result<Vec<NewsRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<news records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NewsRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        if rec.category.trim().is_empty() || rec.headline.trim().is_empty() {
            return Err(Error::Data(format!(
                "line {}: category and headline must be non-empty",
                n + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_news_records(path: impl AsRef<Path>) -> Result<Vec<NewsRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_news_records(file)
}

/// An NHC example that remembers which input record it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourcedExample {
    pub record: usize,
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NhcTask {
    pub category: String,
    pub train: Vec<SourcedExample>,
    pub eval: Vec<SourcedExample>,
}

impl NhcTask {
    pub fn dir_name(&self) -> String {
        task_dir_name(&self.category)
    }

    pub fn to_text_dataset(&self) -> TextDataset {
        let strip = |v: &[SourcedExample]| {
            v.iter()
                .map(|e| TextExample {
                    text: e.text.clone(),
                    label: e.label,
                })
                .collect()
        };
        TextDataset {
            name: self.dir_name(),
            train: strip(&self.train),
            eval: strip(&self.eval),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NhcDataset {
    pub seed: u64,
    pub tasks: Vec<NhcTask>,
}

/// Lowercase, with every run of non-alphanumerics collapsed to `_`.
pub fn task_dir_name(category: &str) -> String {
    let mut out = String::new();
    for c in category.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let trimmed = out.trim_matches('_');
    if trimmed.is_empty() {
        "task".into()
    } else {
        trimmed.into()
    }
}

/// The seven most frequent categories, ties broken lexicographically.
pub fn top_categories(records: &[NewsRecord], k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.category.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(c, n)| (c.to_string(), n))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Builds the seven binary headline tasks: for each of the top categories,
/// 2,000 in-category records as positives and 2,000 others as negatives,
/// split 3,200/800 at random.
pub fn build_nhc(records: &[NewsRecord], seed: u64) -> Result<NhcDataset> {
    let top = top_categories(records, NHC_TASKS);
    if top.len() < NHC_TASKS {
        return Err(Error::Data(format!(
            "need {NHC_TASKS} categories, input has {}",
            top.len()
        )));
    }
    // Tasks draw from independent streams, so they build in parallel.
    let tasks = top
        .par_iter()
        .enumerate()
        .map(|(t, (category, _))| {
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                (0..records.len()).partition(|&i| records[i].category == *category);
            for (pool, what) in [(&pos, category.clone()), (&neg, format!("not {category}"))] {
                if pool.len() < NHC_PER_CLASS {
                    return Err(Error::InsufficientRecords {
                        category: what,
                        needed: NHC_PER_CLASS,
                        available: pool.len(),
                    });
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut picked: Vec<SourcedExample> = Vec::with_capacity(2 * NHC_PER_CLASS);
            for (pool, label) in [(&pos, 1), (&neg, 0)] {
                for i in index::sample(&mut rng, pool.len(), NHC_PER_CLASS) {
                    let r = pool[i];
                    picked.push(SourcedExample {
                        record: r,
                        text: records[r].headline.clone(),
                        label,
                    });
                }
            }
            picked.shuffle(&mut rng);
            let eval = picked.split_off(NHC_TRAIN);
            Ok(NhcTask {
                category: category.clone(),
                train: picked,
                eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NhcDataset { seed, tasks })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub category: String,
    pub classes: usize,
    pub train: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub builder_version: String,
    pub seed: u64,
    pub tasks: Vec<ManifestTask>,
}

fn write_jsonl(path: &Path, examples: &[TextExample]) -> Result<()> {
    let mut buf = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_jsonl(path: &Path) -> Result<Vec<TextExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Writes one directory per task (`train.jsonl`, `eval.jsonl`) plus
/// `manifest.json`.
pub fn write_datasets(
    out: impl AsRef<Path>,
    datasets: &[TextDataset],
    categories: &[String],
    seed: u64,
) -> Result<Manifest> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut tasks = Vec::with_capacity(datasets.len());
    for (d, category) in datasets.iter().zip(categories) {
        let dir = out.join(&d.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), &d.train)?;
        write_jsonl(&dir.join("eval.jsonl"), &d.eval)?;
        let classes = d
            .train
            .iter()
            .chain(&d.eval)
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(2)
            .max(2);
        tasks.push(ManifestTask {
            name: d.name.clone(),
            category: category.clone(),
            classes,
            train: d.train.len(),
            eval: d.eval.len(),
        });
    }
    let manifest = Manifest {
        builder_version: BUILDER_VERSION.into(),
        seed,
        tasks,
    };
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn write_nhc(out: impl AsRef<Path>, dataset: &NhcDataset) -> Result<Manifest> {
    let sets: Vec<TextDataset> = dataset.tasks.iter().map(NhcTask::to_text_dataset).collect();
    let cats: Vec<String> = dataset.tasks.iter().map(|t| t.category.clone()).collect();
    write_datasets(out, &sets, &cats, dataset.seed)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the named task directories (all manifest tasks when `names` is
/// empty), in the order given.
pub fn load_datasets(
    dir: impl AsRef<Path>,
    names: &[String],
) -> Result<(Manifest, Vec<TextDataset>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let wanted: Vec<String> = if names.is_empty() {
        manifest.tasks.iter().map(|t| t.name.clone()).collect()
    } else {
        names.to_vec()
    };
    let mut out = Vec::with_capacity(wanted.len());
    for name in wanted {
        if !manifest.tasks.iter().any(|t| t.name == name) {
            return Err(Error::Data(format!(
                "task '{name}' not listed in {}",
                dir.join("manifest.json").display()
            )));
        }
        let task_dir: PathBuf = dir.join(&name);
        out.push(TextDataset {
            train: read_jsonl(&task_dir.join("train.jsonl"))?,
            eval: read_jsonl(&task_dir.join("eval.jsonl"))?,
            name,
        });
    }
    Ok((manifest, out))
}

/// Lowercased whitespace-split tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token table with `[PAD]`, `[UNK]`, `[CLS]` at ids 0..3 followed by corpus
/// tokens in descending frequency (ties by first occurrence).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

pub const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

impl Vocabulary {
    /// Keeps at most `max_size` corpus tokens in addition to the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut first_seen: HashMap<String, (u64, usize)> = HashMap::new();
        let mut order = 0;
        for text in texts {
            for w in words(text) {
                let entry = first_seen.entry(w).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                entry.0 += 1;
            }
        }
        let mut ranked: Vec<(String, u64, usize)> = first_seen
            .into_iter()
            .map(|(w, (c, o))| (w, c, o))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size);
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIALS.len()];
        for (w, c, _) in ranked {
            tokens.push(w);
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    /// Total ids including specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    /// Ids of the `k` most frequent corpus tokens (all of them if fewer).
    pub fn top_tokens(&self, k: usize) -> Vec<usize> {
        (SPECIALS.len()..self.tokens.len()).take(k).collect()
    }

    /// Lowercases, splits on whitespace, maps unknown words to `[UNK]` and
    /// keeps the first `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        words(text)
            .take(max_len)
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect()
    }

    /// One `token<TAB>count` line per id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(buf, "{t}\t{c}").expect("write to Vec");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (t, c) = line.rsplit_once('\t').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: expected token<TAB>count",
                    path.display(),
                    n + 1
                ))
            })?;
            tokens.push(t.to_string());
            counts.push(c.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad count '{c}'", path.display(), n + 1))
            })?);
        }
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Data(format!(
                "{}: missing special tokens",
                path.display()
            )));
        }
        Ok(Self::from_parts(tokens, counts))
    }
}

const _: () = assert!(PAD_ID == 0 && UNK_ID == 1 && CLS_ID == 2);

/// Tokenizes text datasets into the trainer's per-task form; task `i` of the
/// result is `datasets[i]`.
pub fn encode_datasets(
    vocab: &Vocabulary,
    datasets: &[TextDataset],
    max_len: usize,
) -> Vec<TaskData> {
    datasets
        .iter()
        .enumerate()
        .map(|(task, d)| {
            let enc = |v: &[TextExample]| {
                v.iter()
                    .map(|e| Example {
                        task,
                        tokens: vocab.tokenize(&e.text, max_len),
                        label: e.label,
                    })
                    .collect()
            };
            TaskData {
                train: enc(&d.train),
                eval: enc(&d.eval),
            }
        })
        .collect()
}

/// Keyword token for task `t` of the synthetic benchmark.
pub fn synthetic_keyword(task: usize) -> String {
    format!("kw{task}")
}

pub const SYNTHETIC_FILLER: usize = 200;

/// Keyword-detection tasks: each text is 10 to 20 filler words, with the
/// task's keyword inserted exactly for the positive half. With
/// `conflict_mode`, task 1 shares task 0's keyword but labels it negative.
/// Each task is split 80/20 into train and eval.
pub fn generate_synthetic(
    num_tasks: usize,
    examples_per_task: usize,
    conflict_mode: bool,
    seed: u64,
) -> Result<Vec<TextDataset>> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument(
            "need at least one synthetic task".into(),
        ));
    }
    let mut out = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let inverted = conflict_mode && t == 1;
        let keyword = if conflict_mode && t == 1 {
            synthetic_keyword(0)
        } else {
            synthetic_keyword(t)
        };
        let mut examples = Vec::with_capacity(examples_per_task);
        for i in 0..examples_per_task {
            let present = i % 2 == 0;
            let len = rng.gen_range(10..=20);
            let mut ws: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.gen_range(0..SYNTHETIC_FILLER)))
                .collect();
            if present {
                let at = rng.gen_range(0..=ws.len());
                ws.insert(at, keyword.clone());
            }
            examples.push(TextExample {
                text: ws.join(" "),
                label: usize::from(present != inverted),
            });
        }
        examples.shuffle(&mut rng);
        let eval = examples.split_off(examples_per_task * 4 / 5);
        out.push(TextDataset {
            name: format!("synth{t}"),
            train: examples,
            eval,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_ranks_by_frequency() {
        let v = Vocabulary::build(["a b a"], 10);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.count(3), 2);
        assert_eq!(v.token(0), Some("[PAD]"));
        assert_eq!(v, Vocabulary::build(["a b a"], 10));
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocabulary::build(["hello world"], 10);
        assert_eq!(
            v.tokenize("Hello World", 128),
            vec![v.id("hello").unwrap(), v.id("world").unwrap()]
        );
        assert_eq!(v.tokenize("unseen", 128), vec![UNK_ID]);
        let long = vec!["hello"; 200].join(" ");
        assert_eq!(v.tokenize(&long, 128).len(), 128);
    }

    #[test]
    fn dir_names() {
        assert_eq!(task_dir_name("STYLE & BEAUTY"), "style_beauty");
        assert_eq!(task_dir_name("POLITICS"), "politics");
    }

    #[test]
    fn top_categories_tie_break() {
        let rec = |c: &str| NewsRecord {
            category: c.into(),
            headline: "h".into(),
            short_description: String::new(),
            authors: String::new(),
            link: String::new(),
            date: String::new(),
        };
        let rs = vec![rec("B"), rec("A"), rec("C"), rec("C")];
        let top = top_categories(&rs, 2);
        assert_eq!(top, vec![("C".into(), 2), ("A".into(), 1)]);
    }

    #[test]
    fn synthetic_balanced_with_keyword_rule() {
        let sets = generate_synthetic(3, 100, false, 4).unwrap();
        for (t, d) in sets.iter().enumerate() {
            let all: Vec<&TextExample> = d.train.iter().chain(&d.eval).collect();
            assert_eq!(all.iter().filter(|e| e.label == 1).count(), 50);
            let kw = synthetic_keyword(t);
            for e in all {
                assert_eq!(e.label == 1, e.text.split(' ').any(|w| w == kw));
            }
        }
    }

    #[test]
    fn conflict_mode_inverts_shared_keyword() {
        let sets = generate_synthetic(3, 20, true, 4).unwrap();
        let kw = synthetic_keyword(0);
        for e in sets[1].train.iter() {
            assert_eq!(e.label == 0, e.text.split(' ').any(|w| w == kw));
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["x y z x"], 10);
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
