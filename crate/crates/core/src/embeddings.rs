//! Pre-trained aligned word vectors and the cross-lingual embedding table.
//!
//! The table concatenates the vectors of every configured language. A form
//! that occurs in several languages' files (shared-form vocabulary only) gets
//! the elementwise mean of its vectors. Rows backed by pre-trained vectors are
//! frozen; specials, language tags and tokens without a vector are seeded
//! random rows that stay trainable.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{VocabMode, Vocabulary};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("embedding dimension mismatch: {lang} has {found}, expected {expected}")]
    DimMismatch { lang: String, expected: usize, found: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("embedding table has {rows} rows but the vocabulary has {vocab} entries")]
    VocabMismatch { rows: usize, vocab: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorFile {
    pub language: String,
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
    pub warnings: Vec<String>,
}

impl WordVectorFile {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }
}

pub fn parse_vector_file(path: &Path, expected_lang: &str) -> Result<WordVectorFile, EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io { path: path.to_path_buf(), source })?;
    parse_vector_text(&text, expected_lang, path)
}

/// Parses the `<count> <dim>` header followed by `token v1 … v_dim` lines.
pub fn parse_vector_text(text: &str, lang: &str, path: &Path) -> Result<WordVectorFile, EmbeddingError> {
    let err = |line: usize, detail: String| EmbeddingError::Parse { path: path.to_path_buf(), line, detail };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let hdr: Vec<&str> = header.split_whitespace().collect();
    let [count, dim] = hdr.as_slice() else {
        return Err(err(1, format!("malformed header {header:?}")));
    };
    let count: usize = count.parse().map_err(|_| err(1, format!("bad count {count:?}")))?;
    let dim: usize = dim.parse().map_err(|_| err(1, format!("bad dimension {dim:?}")))?;
    if dim == 0 {
        return Err(err(1, "dimension must be positive".into()));
    }

    let mut entries: Vec<(String, Vec<f64>)> = Vec::with_capacity(count);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    for (n, line) in lines {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line").to_string();
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|_| err(lineno, format!("non-numeric component {p:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != dim {
            return Err(err(lineno, format!("expected {dim} components, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(lineno, "non-finite component".into()));
        }
        match seen.get(&token) {
            Some(&idx) => {
                warnings.push(format!("line {lineno}: duplicate token {token:?}, keeping the last vector"));
                entries[idx].1 = values;
            }
            None => {
                seen.insert(token.clone(), entries.len());
                entries.push((token, values));
            }
        }
    }
    if entries.len() != count {
        warnings.push(format!("header declares {count} entries, found {}", entries.len()));
    }
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(WordVectorFile { language: lang.to_string(), dim, entries, warnings })
}

/// Writes a vector file in the same text format.
pub fn write_vector_file(path: &Path, entries: &[(String, Vec<f64>)], dim: usize) -> Result<(), EmbeddingError> {
    let io = |source| EmbeddingError::Io { path: path.to_path_buf(), source };
    let f = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{} {dim}", entries.len()).map_err(io)?;
    for (tok, vec) in entries {
        write!(w, "{tok}").map_err(io)?;
        for v in vec {
            write!(w, " {v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Pretrained,
    MergedMean,
    RandomInit,
    Special,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Pretrained => "pretrained",
            Provenance::MergedMean => "merged-mean",
            Provenance::RandomInit => "random-init",
            Provenance::Special => "special",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    matrix: Tensor<f64>,
    trainable: Vec<bool>,
    provenance: Vec<Provenance>,
}

/// Uniform `[-range, range]` values for one row, independent of every other row.
fn random_row(seed: u64, row: usize, dim: usize, range: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    (0..dim).map(|_| rng.gen_range(-range..=range)).collect()
}

pub const DEFAULT_INIT_RANGE: f64 = 0.1;

pub fn build_embedding_table(
    files: &[WordVectorFile],
    vocab: &Vocabulary,
    seed: u64,
    init_range: f64,
) -> Result<EmbeddingTable, EmbeddingError> {
    let dim = files.first().map(|f| f.dim).ok_or_else(|| EmbeddingError::DimMismatch {
        lang: "<none>".into(),
        expected: 0,
        found: 0,
    })?;
    for f in files {
        if f.dim != dim {
            return Err(EmbeddingError::DimMismatch { lang: f.language.clone(), expected: dim, found: f.dim });
        }
    }
    // Sorting by language makes the mean independent of the file order.
    let mut ordered: Vec<&WordVectorFile> = files.iter().collect();
    ordered.sort_by(|a, b| a.language.cmp(&b.language));
    let lookups: Vec<(&str, HashMap<&str, &[f64]>)> = ordered
        .iter()
        .map(|f| (f.language.as_str(), f.entries.iter().map(|(t, v)| (t.as_str(), v.as_slice())).collect()))
        .collect();

    let n = vocab.len();
    let mut data = Vec::with_capacity(n * dim);
    let mut trainable = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for id in 0..n {
        let sources: Vec<&[f64]> = if !vocab.is_lexical(id) {
            Vec::new()
        } else {
            match vocab.mode() {
                VocabMode::SharedForm => {
                    let form = vocab.token(id).expect("id in range");
                    lookups.iter().filter_map(|(_, m)| m.get(form).copied()).collect()
                }
                VocabMode::LanguageOrigin => {
                    let (lang, form) = vocab.origin(id).expect("lexical id in origin mode");
                    lookups.iter().filter(|(l, _)| *l == lang).filter_map(|(_, m)| m.get(form).copied()).collect()
                }
            }
        };
        let (row, prov) = match sources.len() {
            0 if !vocab.is_lexical(id) => (random_row(seed, id, dim, init_range), Provenance::Special),
            0 => (random_row(seed, id, dim, init_range), Provenance::RandomInit),
            1 => (sources[0].to_vec(), Provenance::Pretrained),
            k => {
                let mut mean = vec![0.0; dim];
                for s in &sources {
                    for (m, &v) in mean.iter_mut().zip(s.iter()) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= k as f64);
                (mean, Provenance::MergedMean)
            }
        };
        data.extend(row);
        trainable.push(matches!(prov, Provenance::Special | Provenance::RandomInit));
        provenance.push(prov);
    }
    Ok(EmbeddingTable::from_parts(n, dim, data, trainable, provenance))
}

/// Baseline table with every row drawn at random.
///
/// Lexical rows are frozen when `frozen` is set; specials and language tags
/// always stay trainable.
pub fn random_table(vocab: &Vocabulary, dim: usize, seed: u64, init_range: f64, frozen: bool) -> EmbeddingTable {
    let n = vocab.len();
    let data = (0..n).flat_map(|id| random_row(seed, id, dim, init_range)).collect();
    let trainable = (0..n).map(|id| !(frozen && vocab.is_lexical(id))).collect();
    EmbeddingTable::from_parts(n, dim, data, trainable, vec![Provenance::RandomInit; n])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

impl EmbeddingTable {
    fn from_parts(rows: usize, dim: usize, data: Vec<f64>, trainable: Vec<bool>, provenance: Vec<Provenance>) -> Self {
        let matrix = Tensor::matrix(rows, dim, data).expect("row-major table");
        Self { matrix, trainable, provenance }
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        self.matrix.row_mut(id)
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn trainable_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.trainable.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }

    pub fn provenance(&self, id: usize) -> Provenance {
        self.provenance[id]
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), EmbeddingError> {
        if self.rows() != vocab.len() {
            return Err(EmbeddingError::VocabMismatch { rows: self.rows(), vocab: vocab.len() });
        }
        Ok(())
    }

    /// `k` nearest lexical tokens to `query`, ties broken by lower id.
    pub fn nearest_neighbors(
        &self,
        vocab: &Vocabulary,
        query: &str,
        k: usize,
        metric: Metric,
    ) -> Result<Vec<(String, f64)>, EmbeddingError> {
        let q = vocab.id(query).ok_or_else(|| EmbeddingError::UnknownToken(query.to_string()))?;
        let qv = self.row(q);
        let mut scored: Vec<(usize, f64)> = (0..self.rows())
            .filter(|&id| id != q && vocab.is_lexical(id))
            .map(|id| (id, distance(metric, qv, self.row(id))))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().take(k).map(|(id, d)| (vocab.token(id).unwrap_or_default().to_string(), d)).collect())
    }

    /// Writes the merged table as a vector file plus a
    /// `token<TAB>provenance<TAB>trainable` sidecar.
    pub fn write(&self, vocab: &Vocabulary, vec_path: &Path, sidecar: &Path) -> Result<(), EmbeddingError> {
        self.check_vocab(vocab)?;
        let entries: Vec<(String, Vec<f64>)> =
            (0..self.rows()).map(|i| (vocab.token(i).unwrap().to_string(), self.row(i).to_vec())).collect();
        write_vector_file(vec_path, &entries, self.dim())?;
        let mut side = String::new();
        for i in 0..self.rows() {
            side.push_str(&format!("{}\t{}\t{}\n", vocab.token(i).unwrap(), self.provenance[i].as_str(), self.trainable[i]));
        }
        fs::write(sidecar, side).map_err(|source| EmbeddingError::Io { path: sidecar.to_path_buf(), source })
    }
}
