//! Parallel corpora: loading, cleaning, language tagging and vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const NUM_SPECIALS: usize = 4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no corpus file for {split}.{src}-{tgt} under {dir}")]
    MissingPair { dir: PathBuf, split: Split, src: String, tgt: String },
    #[error("{left} has {left_lines} lines but {right} has {right_lines}")]
    LineMismatch { left: PathBuf, left_lines: usize, right: PathBuf, right_lines: usize },
    #[error("language {0:?} is not configured")]
    UnknownLanguage(String),
    #[error("{path}:{line}: {detail}")]
    Format { path: PathBuf, line: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub language: String,
}

impl Sentence {
    pub fn new(language: &str, tokens: Vec<String>) -> Self {
        Self { tokens, language: language.to_string() }
    }

    pub fn from_line(language: &str, raw: &str) -> Self {
        Self::new(language, tokenize_line(raw))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(split: Split) -> Self {
        Self { split, pairs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Both translation directions of every pair.
    pub fn bidirectional(&self) -> ParallelCorpus {
        let mut pairs = Vec::with_capacity(self.pairs.len() * 2);
        for p in &self.pairs {
            pairs.push(p.clone());
            pairs.push(SentencePair { source: p.target.clone(), target: p.source.clone() });
        }
        ParallelCorpus { split: self.split, pairs }
    }

    pub fn extend(&mut self, other: ParallelCorpus) {
        self.pairs.extend(other.pairs);
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().flat_map(|p| [&p.source, &p.target])
    }
}

/// Unicode simple lowercasing followed by whitespace splitting.
pub fn tokenize_line(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .map(|tok| tok.chars().map(|c| c.to_lowercase().next().unwrap_or(c)).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingletonPolicy {
    /// Replace rare tokens by `<unk>`.
    #[default]
    Unk,
    /// Drop any pair containing a rare token.
    DropSentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub max_len: usize,
    pub min_freq: u64,
    pub singleton_policy: SingletonPolicy,
    /// Splits the length filter applies to.
    pub length_filter_splits: Vec<Split>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { max_len: 60, min_freq: 2, singleton_policy: SingletonPolicy::Unk, length_filter_splits: vec![Split::Train] }
    }
}

/// Per-language token counts over retained training text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl FrequencyTable {
    pub fn count(corpus: &ParallelCorpus) -> Self {
        let mut table = FrequencyTable::default();
        for s in corpus.sentences() {
            let lang = table.counts.entry(s.language.clone()).or_default();
            for t in &s.tokens {
                *lang.entry(t.clone()).or_insert(0) += 1;
            }
        }
        table
    }

    pub fn get(&self, lang: &str, token: &str) -> u64 {
        self.counts.get(lang).and_then(|m| m.get(token)).copied().unwrap_or(0)
    }

    /// Writes one `token<TAB>id<TAB>frequency` file per language; `id` is the
    /// vocabulary id of the token or `-` when it is not in the vocabulary.
    pub fn write_dir(&self, dir: &Path, vocab: &Vocabulary) -> Result<Vec<PathBuf>, CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        for (lang, counts) in &self.counts {
            let path = dir.join(format!("freq.{lang}.tsv"));
            let mut entries: Vec<_> = counts.iter().collect();
            entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
            let mut out = String::new();
            for (tok, n) in entries {
                let id = vocab.lookup(tok, lang).map(|i| i.to_string()).unwrap_or_else(|| "-".into());
                out.push_str(&format!("{tok}\t{id}\t{n}\n"));
            }
            fs::write(&path, out).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CorpusWarning {
    EmptyAfterFiltering,
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub corpus: ParallelCorpus,
    pub frequencies: FrequencyTable,
    pub dropped_too_long: usize,
    pub dropped_empty: usize,
    pub dropped_rare: usize,
    pub warnings: Vec<CorpusWarning>,
}

/// Length filter, then (training split only) rare-token handling.
///
/// Frequencies are counted per language over the retained training pairs.
/// Dev and test splits keep their tokens; words outside the vocabulary are
/// mapped to `<unk>` at encoding time.
pub fn preprocess_corpus(corpus: &ParallelCorpus, cfg: &PreprocessConfig) -> Preprocessed {
    let filter_len = cfg.length_filter_splits.contains(&corpus.split);
    let mut dropped_too_long = 0;
    let mut dropped_empty = 0;
    let mut kept = ParallelCorpus::new(corpus.split);
    for p in &corpus.pairs {
        if p.source.is_empty() || p.target.is_empty() {
            dropped_empty += 1;
        } else if filter_len && (p.source.len() > cfg.max_len || p.target.len() > cfg.max_len) {
            dropped_too_long += 1;
        } else {
            kept.pairs.push(p.clone());
        }
    }

    let mut dropped_rare = 0;
    let mut frequencies = FrequencyTable::default();
    if corpus.split == Split::Train {
        frequencies = FrequencyTable::count(&kept);
        let rare = |s: &Sentence, t: &str| frequencies.get(&s.language, t) < cfg.min_freq;
        match cfg.singleton_policy {
            SingletonPolicy::Unk => {
                for p in kept.pairs.iter_mut() {
                    for s in [&mut p.source, &mut p.target] {
                        let lang = s.language.clone();
                        for t in s.tokens.iter_mut() {
                            if frequencies.get(&lang, t) < cfg.min_freq {
                                *t = UNK.to_string();
                            }
                        }
                    }
                }
            }
            SingletonPolicy::DropSentence => {
                let before = kept.pairs.len();
                kept.pairs.retain(|p| {
                    !p.source.tokens.iter().any(|t| rare(&p.source, t))
                        && !p.target.tokens.iter().any(|t| rare(&p.target, t))
                });
                dropped_rare = before - kept.pairs.len();
                frequencies = FrequencyTable::count(&kept);
            }
        }
    }

    let mut warnings = Vec::new();
    if kept.is_empty() {
        log::warn!("{} corpus is empty after preprocessing", corpus.split);
        warnings.push(CorpusWarning::EmptyAfterFiltering);
    }
    Preprocessed { corpus: kept, frequencies, dropped_too_long, dropped_empty, dropped_rare, warnings }
}

pub fn tag_token(lang: &str) -> String {
    format!("<2{lang}>")
}

/// Returns a copy of `s` with the `<2xx>` target indicator in front.
pub fn prepend_target_tag(s: &Sentence, target_lang: &str, languages: &[String]) -> Result<Sentence, CorpusError> {
    if !languages.iter().any(|l| l == target_lang) {
        return Err(CorpusError::UnknownLanguage(target_lang.to_string()));
    }
    let mut tokens = Vec::with_capacity(s.tokens.len() + 1);
    tokens.push(tag_token(target_lang));
    tokens.extend(s.tokens.iter().cloned());
    Ok(Sentence { tokens, language: s.language.clone() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabMode {
    /// Identical surface forms in different languages share one entry.
    #[default]
    SharedForm,
    /// Every lexical entry is prefixed by its language (`sv:hej`).
    LanguageOrigin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Dense id assignment: specials, then language tags, then lexical entries by
/// descending frequency with lexicographic tie-break.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    mode: VocabMode,
    languages: Vec<String>,
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.languages == other.languages
            && self.tokens == other.tokens
            && self.frequencies == other.frequencies
    }
}

/// Lexicon entries known only from an embedding file (frequency 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtraLexicon {
    pub language: String,
    pub tokens: Vec<String>,
}

pub fn lexical_key(mode: VocabMode, token: &str, lang: &str) -> String {
    match mode {
        VocabMode::SharedForm => token.to_string(),
        VocabMode::LanguageOrigin => format!("{lang}:{token}"),
    }
}

fn is_special(token: &str) -> bool {
    matches!(token, PAD | UNK | BOS | EOS)
}

pub fn build_vocabulary(
    corpora: &[&ParallelCorpus],
    languages: &[String],
    mode: VocabMode,
    extra: &[ExtraLexicon],
) -> Vocabulary {
    let tags: BTreeSet<String> = languages.iter().map(|l| tag_token(l)).collect();
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for c in corpora {
        for s in c.sentences() {
            for t in &s.tokens {
                if is_special(t) || tags.contains(t) {
                    continue;
                }
                *freq.entry(lexical_key(mode, t, &s.language)).or_insert(0) += 1;
            }
        }
    }
    for lex in extra {
        for t in &lex.tokens {
            if is_special(t) || tags.contains(t) {
                continue;
            }
            freq.entry(lexical_key(mode, t, &lex.language)).or_insert(0);
        }
    }
    let mut lexical: Vec<(String, u64)> = freq.into_iter().collect();
    lexical.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
    let mut frequencies = vec![0; NUM_SPECIALS];
    for l in languages {
        tokens.push(tag_token(l));
        frequencies.push(0);
    }
    for (t, n) in lexical {
        tokens.push(t);
        frequencies.push(n);
    }
    Vocabulary::from_parts(mode, languages.to_vec(), tokens, frequencies)
}

impl Vocabulary {
    fn from_parts(mode: VocabMode, languages: Vec<String>, tokens: Vec<String>, frequencies: Vec<u64>) -> Self {
        let mut v = Self { mode, languages, tokens, frequencies, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    /// Restores the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.frequencies.get(id).copied().unwrap_or(0)
    }

    pub fn id(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Id of a lexical token of language `lang`, honoring the vocabulary mode.
    pub fn lookup(&self, token: &str, lang: &str) -> Option<usize> {
        self.id(&lexical_key(self.mode, token, lang))
    }

    pub fn tag_id(&self, lang: &str) -> Result<usize, CorpusError> {
        self.id(&tag_token(lang)).ok_or_else(|| CorpusError::UnknownLanguage(lang.to_string()))
    }

    pub fn is_tag(&self, id: usize) -> bool {
        (NUM_SPECIALS..NUM_SPECIALS + self.languages.len()).contains(&id)
    }

    pub fn is_lexical(&self, id: usize) -> bool {
        id >= NUM_SPECIALS + self.languages.len() && id < self.len()
    }

    /// Language and surface form of a lexical entry in language-origin mode.
    pub fn origin(&self, id: usize) -> Option<(&str, &str)> {
        if self.mode != VocabMode::LanguageOrigin || !self.is_lexical(id) {
            return None;
        }
        self.tokens[id].split_once(':')
    }

    /// Surface form of an id: the language prefix is dropped in
    /// language-origin mode.
    pub fn surface(&self, id: usize) -> &str {
        match self.origin(id) {
            Some((_, form)) => form,
            None => self.token(id).unwrap_or(UNK),
        }
    }

    pub fn encode_sentence(&self, s: &Sentence, side: Side) -> Vec<usize> {
        let mut ids = Vec::with_capacity(s.tokens.len() + 2);
        if side == Side::Target {
            ids.push(BOS_ID);
        }
        for t in &s.tokens {
            let id = if t == UNK {
                UNK_ID
            } else if t.starts_with("<2") {
                self.id(t).filter(|&i| self.is_tag(i)).unwrap_or(UNK_ID)
            } else {
                self.lookup(t, &s.language).unwrap_or(UNK_ID)
            };
            ids.push(id);
        }
        if side == Side::Target {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Surface tokens of `ids` with PAD/BOS/EOS removed.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOS_ID | EOS_ID))
            .map(|&i| self.surface(i).to_string())
            .collect()
    }

    /// `token<TAB>id<TAB>frequency` per line.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}\t{}", self.frequencies[i]).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// Reads the text format written by [`Vocabulary::write`]; languages are
    /// recovered from the tag entries that follow the specials.
    pub fn read(path: &Path, mode: VocabMode) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut tokens = Vec::new();
        let mut frequencies = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fmt_err = |detail: &str| CorpusError::Format { path: path.to_path_buf(), line: n + 1, detail: detail.into() };
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(freq), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(fmt_err("expected token<TAB>id<TAB>frequency"));
            };
            let id: usize = id.parse().map_err(|_| fmt_err("bad id"))?;
            if id != n {
                return Err(fmt_err("ids must be dense and in order"));
            }
            tokens.push(tok.to_string());
            frequencies.push(freq.parse().map_err(|_| fmt_err("bad frequency"))?);
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != [PAD, UNK, BOS, EOS] {
            return Err(CorpusError::Format { path: path.to_path_buf(), line: 1, detail: "missing special tokens".into() });
        }
        let languages = tokens[NUM_SPECIALS..]
            .iter()
            .map_while(|t| t.strip_prefix("<2").and_then(|r| r.strip_suffix('>')).map(str::to_string))
            .collect();
        Ok(Self::from_parts(mode, languages, tokens, frequencies))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io_err(path))
}

/// File name of one side of a parallel file pair: `<split>.<a>-<b>.<lang>`.
pub fn pair_file(dir: &Path, split: Split, a: &str, b: &str, lang: &str) -> PathBuf {
    dir.join(format!("{split}.{a}-{b}.{lang}"))
}

/// Locates the file pair for `src`/`tgt` in either name order.
pub fn find_pair_files(dir: &Path, split: Split, src: &str, tgt: &str) -> Option<(PathBuf, PathBuf)> {
    [(src, tgt), (tgt, src)].into_iter().find_map(|(a, b)| {
        let s = pair_file(dir, split, a, b, src);
        let t = pair_file(dir, split, a, b, tgt);
        (s.is_file() && t.is_file()).then_some((s, t))
    })
}

/// Loads a line-aligned file pair as `src -> tgt` sentences.
pub fn load_parallel(dir: &Path, split: Split, src: &str, tgt: &str) -> Result<(ParallelCorpus, [PathBuf; 2]), CorpusError> {
    let (sp, tp) = find_pair_files(dir, split, src, tgt).ok_or_else(|| CorpusError::MissingPair {
        dir: dir.to_path_buf(),
        split,
        src: src.to_string(),
        tgt: tgt.to_string(),
    })?;
    let (sl, tl) = (read_lines(&sp)?, read_lines(&tp)?);
    if sl.len() != tl.len() {
        return Err(CorpusError::LineMismatch { left: sp, left_lines: sl.len(), right: tp, right_lines: tl.len() });
    }
    let pairs = sl
        .iter()
        .zip(&tl)
        .map(|(s, t)| SentencePair { source: Sentence::from_line(src, s), target: Sentence::from_line(tgt, t) })
        .collect();
    Ok((ParallelCorpus { split, pairs }, [sp, tp]))
}

/// Writes a corpus as a line-aligned file pair; all pairs must share one direction.
pub fn write_parallel(dir: &Path, corpus: &ParallelCorpus, src: &str, tgt: &str) -> Result<[PathBuf; 2], CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sp = pair_file(dir, corpus.split, src, tgt, src);
    let tp = pair_file(dir, corpus.split, src, tgt, tgt);
    let join = |f: &dyn Fn(&SentencePair) -> &Sentence| {
        corpus.pairs.iter().map(|p| f(p).tokens.join(" ") + "\n").collect::<String>()
    };
    fs::write(&sp, join(&|p| &p.source)).map_err(io_err(&sp))?;
    fs::write(&tp, join(&|p| &p.target)).map_err(io_err(&tp))?;
    Ok([sp, tp])
}
