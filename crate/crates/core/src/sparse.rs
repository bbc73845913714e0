//! Sparse count data: corpora, file formats, feature transforms and the
//! held-out-user split used for top-N recommendation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math::Rng;

/// A sparse row: sorted unique indices with strictly positive values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::shape(
                format!("{} values", indices.len()),
                values.len(),
            ));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(
                    "sparse indices must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(Error::InvalidArgument(format!(
                    "feature id {last} out of range for dimension {dim}"
                )));
            }
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "sparse values must be positive and finite".into(),
            ));
        }
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a vector from unordered `(index, value)` pairs, summing
    /// duplicates and dropping zero entries.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in pairs {
            *acc.entry(i).or_insert(0.0) += v;
        }
        let (indices, values): (Vec<_>, Vec<_>) = acc.into_iter().filter(|&(_, v)| v != 0.0).unzip();
        Self::new(dim, indices, values)
    }

    pub fn from_dense(x: &[f64]) -> Result<Self> {
        let (indices, values): (Vec<_>, Vec<_>) = x
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .unzip();
        Self::new(x.len(), indices, values)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Sum of the values (the document length `N_d` for count data).
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.indices
            .binary_search(&index)
            .map_or(0.0, |p| self.values[p])
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> SparseVector {
        SparseVector {
            dim: self.dim,
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A collection of sparse rows over a shared vocabulary, with per-feature
/// document frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<SparseVector>,
    vocab_size: usize,
    doc_frequency: Vec<usize>,
}

impl Corpus {
    pub fn new(docs: Vec<SparseVector>, vocab_size: usize) -> Result<Self> {
        let mut doc_frequency = vec![0usize; vocab_size];
        for (d, doc) in docs.iter().enumerate() {
            if doc.dim() != vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "document {d} has dimension {}, corpus vocabulary is {vocab_size}",
                    doc.dim()
                )));
            }
            for &i in doc.indices() {
                doc_frequency[i] += 1;
            }
        }
        Ok(Self {
            docs,
            vocab_size,
            doc_frequency,
        })
    }

    pub fn docs(&self) -> &[SparseVector] {
        &self.docs
    }

    pub fn doc(&self, d: usize) -> &SparseVector {
        &self.docs[d]
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_frequency(&self) -> &[usize] {
        &self.doc_frequency
    }

    pub fn stats(&self) -> FeatureStats {
        FeatureStats {
            doc_count: self.docs.len(),
            doc_frequency: self.doc_frequency.clone(),
        }
    }

    /// Indices of documents with no nonzero entries. They are kept so that
    /// document ids stay stable; training skips them.
    pub fn empty_docs(&self) -> Vec<usize> {
        self.docs
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_tokens(&self) -> f64 {
        self.docs.iter().map(SparseVector::total).sum()
    }

    /// Writes the corpus in triples format with a `D V` header.
    pub fn write_triples<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.doc_count(), self.vocab_size)?;
        for (d, doc) in self.docs.iter().enumerate() {
            for (i, v) in doc.iter() {
                writeln!(w, "{d} {i} {v}")?;
            }
        }
        Ok(())
    }

    pub fn save_triples(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_triples(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Training-set document counts and document frequencies; the only corpus
/// information the TF-IDF and rare-word transforms need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureStats {
    pub doc_count: usize,
    pub doc_frequency: Vec<usize>,
}

impl FeatureStats {
    pub fn vocab_size(&self) -> usize {
        self.doc_frequency.len()
    }

    /// Inverse document frequency `log(D / df)`, or 0 for features never
    /// seen in training.
    pub fn idf(&self, v: usize) -> f64 {
        let df = self.doc_frequency[v];
        if df == 0 || self.doc_count == 0 {
            0.0
        } else {
            (self.doc_count as f64 / df as f64).ln()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// `doc word count` lines, optional `D V` header.
    Triples,
    /// `[label] index:value ...`, one document per line.
    Svmlight,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triples" => Ok(Self::Triples),
            "svmlight" => Ok(Self::Svmlight),
            other => Err(Error::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl std::fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Triples => "triples",
            Self::Svmlight => "svmlight",
        })
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(p) => &line[..p],
        None => line,
    }
    .trim()
}

fn parse_field<T: std::str::FromStr>(tok: &str, what: &str, path: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("cannot parse {what} from {tok:?}"),
    })
}

fn parse_count(tok: &str, path: &str, line: usize) -> Result<f64> {
    let v: f64 = parse_field(tok, "count", path, line)?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Parse {
            path: path.to_string(),
            line,
            msg: format!("count must be finite and nonnegative, got {tok}"),
        });
    }
    Ok(v)
}

/// Loads a corpus from disk. `vocab_size` overrides the header; without
/// either the vocabulary is inferred as `max id + 1`.
pub fn load_corpus(
    path: impl AsRef<Path>,
    format: CorpusFormat,
    vocab_size: Option<usize>,
) -> Result<Corpus> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    read_corpus(BufReader::new(f), format, vocab_size, &name)
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    format: CorpusFormat,
    vocab_size: Option<usize>,
    name: &str,
) -> Result<Corpus> {
    match format {
        CorpusFormat::Triples => read_triples(reader, vocab_size, name),
        CorpusFormat::Svmlight => read_svmlight(reader, vocab_size, name),
    }
}

fn read_triples<R: BufRead>(reader: R, vocab_hint: Option<usize>, name: &str) -> Result<Corpus> {
    let mut header: Option<(usize, usize)> = None;
    let mut entries: Vec<(usize, usize, f64, usize)> = Vec::new();
    let mut seen_data = false;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(name, e))?;
        let body = strip_comment(&line);
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        match toks.len() {
            2 if !seen_data && header.is_none() => {
                let d = parse_field(toks[0], "document count", name, lineno)?;
                let v = parse_field(toks[1], "vocabulary size", name, lineno)?;
                header = Some((d, v));
            }
            3 => {
                seen_data = true;
                let d: usize = parse_field(toks[0], "document id", name, lineno)?;
                let w: usize = parse_field(toks[1], "feature id", name, lineno)?;
                let c = parse_count(toks[2], name, lineno)?;
                entries.push((d, w, c, lineno));
            }
            n => {
                return Err(Error::Parse {
                    path: name.to_string(),
                    line: lineno,
                    msg: format!("expected `doc word count`, found {n} fields"),
                })
            }
        }
    }

    let vocab = match (vocab_hint, header) {
        (Some(v), Some((_, hv))) if v != hv => {
            return Err(Error::InvalidArgument(format!(
                "{name}: header declares {hv} features but {v} were requested"
            )))
        }
        (Some(v), _) => v,
        (None, Some((_, hv))) => hv,
        (None, None) => entries.iter().map(|e| e.1 + 1).max().unwrap_or(0),
    };
    let n_docs = match header {
        Some((d, _)) => d,
        None => entries.iter().map(|e| e.0 + 1).max().unwrap_or(0),
    };

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_docs];
    for &(d, w, c, lineno) in &entries {
        if w >= vocab {
            return Err(Error::Parse {
                path: name.to_string(),
                line: lineno,
                msg: format!("feature id {w} >= vocabulary size {vocab}"),
            });
        }
        if d >= n_docs {
            return Err(Error::Parse {
                path: name.to_string(),
                line: lineno,
                msg: format!("document id {d} >= declared document count {n_docs}"),
            });
        }
        rows[d].push((w, c));
    }
    let docs = rows
        .into_iter()
        .map(|r| SparseVector::from_pairs(vocab, r))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(docs, vocab)
}

fn read_svmlight<R: BufRead>(reader: R, vocab_hint: Option<usize>, name: &str) -> Result<Corpus> {
    let mut rows: Vec<(Vec<(usize, f64)>, usize)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(name, e))?;
        let body = strip_comment(&line);
        if body.is_empty() {
            continue;
        }
        let mut pairs = Vec::new();
        for (k, tok) in body.split_whitespace().enumerate() {
            match tok.split_once(':') {
                Some((i, v)) => {
                    let i: usize = parse_field(i, "feature id", name, lineno)?;
                    pairs.push((i, parse_count(v, name, lineno)?));
                }
                // leading label
                None if k == 0 => {}
                None => {
                    return Err(Error::Parse {
                        path: name.to_string(),
                        line: lineno,
                        msg: format!("expected index:value, found {tok:?}"),
                    })
                }
            }
        }
        rows.push((pairs, lineno));
    }
    let vocab = vocab_hint.unwrap_or_else(|| {
        rows.iter()
            .flat_map(|(p, _)| p.iter().map(|e| e.0 + 1))
            .max()
            .unwrap_or(0)
    });
    let mut docs = Vec::with_capacity(rows.len());
    for (pairs, lineno) in rows {
        if let Some(&(w, _)) = pairs.iter().find(|(w, _)| *w >= vocab) {
            return Err(Error::Parse {
                path: name.to_string(),
                line: lineno,
                msg: format!("feature id {w} >= vocabulary size {vocab}"),
            });
        }
        docs.push(SparseVector::from_pairs(vocab, pairs)?);
    }
    Corpus::new(docs, vocab)
}

/// One token per line; the line number is the feature id.
pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map(|s| s.trim_end().to_string()).map_err(|e| Error::io(path, e)))
        .collect()
}

/// TF-IDF reweighting `x_v · log(D / df_v)` followed by L2 normalization.
/// Features unseen in training get weight 0; an all-zero result is returned
/// as the zero vector.
pub fn tfidf_l2(stats: &FeatureStats, x: &SparseVector) -> Result<SparseVector> {
    if x.dim() != stats.vocab_size() {
        return Err(Error::DimMismatch {
            data: x.dim(),
            model: stats.vocab_size(),
        });
    }
    let weighted: Vec<(usize, f64)> = x
        .iter()
        .map(|(i, v)| (i, v * stats.idf(i)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let norm = weighted.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(SparseVector::empty(x.dim()));
    }
    let (indices, values) = weighted.into_iter().map(|(i, w)| (i, w / norm)).unzip();
    SparseVector::new(x.dim(), indices, values)
}

/// Counts divided by the document length.
pub fn normalize_counts(x: &SparseVector) -> SparseVector {
    let total = x.total();
    if total == 0.0 {
        x.clone()
    } else {
        x.scaled(1.0 / total)
    }
}

/// Number of tokens in `x` (summed counts) whose feature occurs in fewer
/// than `rare_frac` of the training documents; `rare_frac >= 1` counts every token.
pub fn rare_word_count(stats: &FeatureStats, x: &SparseVector, rare_frac: f64) -> f64 {
    let d = stats.doc_count as f64;
    x.iter()
        .filter(|&(i, _)| {
            let frac = if d > 0.0 {
                stats.doc_frequency[i] as f64 / d
            } else {
                0.0
            };
            frac < rare_frac || rare_frac >= 1.0
        })
        .map(|(_, v)| v)
        .sum()
}

/// Keeps the `l` features with the highest total count (ties to the lower
/// id), remapped to `0..l` in ascending original-id order. Returns the
/// restricted corpus and the kept original ids.
pub fn restrict_top_l(c: &Corpus, l: usize) -> Result<(Corpus, Vec<usize>)> {
    if l == 0 || l > c.vocab_size() {
        return Err(Error::InvalidArgument(format!(
            "top-L restriction needs 1 <= L <= {}, got {l}",
            c.vocab_size()
        )));
    }
    let mut totals = vec![0.0f64; c.vocab_size()];
    for doc in c.docs() {
        for (i, v) in doc.iter() {
            totals[i] += v;
        }
    }
    let mut order: Vec<usize> = (0..c.vocab_size()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..l].to_vec();
    kept.sort_unstable();
    Ok((select_features(c, &kept)?, kept))
}

/// Projects `c` onto the features `kept` (ascending original ids), which
/// become `0..kept.len()`. Used to apply a training-set restriction to
/// held-out data.
pub fn select_features(c: &Corpus, kept: &[usize]) -> Result<Corpus> {
    let mut remap = vec![usize::MAX; c.vocab_size()];
    for (new, &old) in kept.iter().enumerate() {
        if old >= c.vocab_size() || (new > 0 && kept[new - 1] >= old) {
            return Err(Error::InvalidArgument(format!(
                "feature list must be strictly increasing ids below {}",
                c.vocab_size()
            )));
        }
        remap[old] = new;
    }
    let l = kept.len();
    let docs = c
        .docs()
        .iter()
        .map(|doc| {
            let (idx, val): (Vec<_>, Vec<_>) = doc
                .iter()
                .filter(|&(i, _)| remap[i] != usize::MAX)
                .map(|(i, v)| (remap[i], v))
                .unzip();
            SparseVector::new(l, idx, val)
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(docs, l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
}

/// Binarized implicit feedback with the original user and item ids of each
/// row and column.
#[derive(Debug, Clone)]
pub struct ImplicitFeedback {
    pub corpus: Corpus,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<Rating>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let body = strip_comment(&line);
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
        if toks.len() < 3 {
            return Err(Error::Parse {
                path: name,
                line: lineno,
                msg: "expected `user item rating`".into(),
            });
        }
        out.push(Rating {
            user: parse_field(toks[0], "user id", &name, lineno)?,
            item: parse_field(toks[1], "item id", &name, lineno)?,
            rating: parse_field(toks[2], "rating", &name, lineno)?,
        });
    }
    Ok(out)
}

/// Keeps ratings `>= threshold` as binary feedback and drops users with
/// fewer than `min_items` retained items. Rows are ordered by user id and
/// columns by item id over the surviving ratings.
pub fn binarize_implicit(ratings: &[Rating], threshold: f64, min_items: usize) -> Result<ImplicitFeedback> {
    let mut by_user: BTreeMap<u64, std::collections::BTreeSet<u64>> = BTreeMap::new();
    for r in ratings {
        if r.rating.is_finite() && r.rating >= threshold {
            by_user.entry(r.user).or_default().insert(r.item);
        }
    }
    by_user.retain(|_, items| items.len() >= min_items);
    let item_ids: Vec<u64> = by_user
        .values()
        .flatten()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let col = |item: u64| item_ids.binary_search(&item).expect("item id collected above");
    let mut user_ids = Vec::with_capacity(by_user.len());
    let mut docs = Vec::with_capacity(by_user.len());
    for (user, items) in &by_user {
        user_ids.push(*user);
        let idx: Vec<usize> = items.iter().map(|&i| col(i)).collect();
        let n = idx.len();
        docs.push(SparseVector::new(item_ids.len(), idx, vec![1.0; n])?);
    }
    Ok(ImplicitFeedback {
        corpus: Corpus::new(docs, item_ids.len())?,
        user_ids,
        item_ids,
    })
}

/// Held-out users: each user's feedback split into an input portion and a
/// target portion.
#[derive(Debug, Clone, Default)]
pub struct HeldOutUsers {
    /// Row index of each user in the source corpus.
    pub users: Vec<usize>,
    pub fold_in: Vec<SparseVector>,
    pub targets: Vec<SparseVector>,
}

impl HeldOutUsers {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StrongGenSplit {
    pub train: Corpus,
    /// Row index of each training user in the source corpus.
    pub train_users: Vec<usize>,
    pub valid: HeldOutUsers,
    pub test: HeldOutUsers,
    /// Held-out users dropped because no target item would remain.
    pub excluded: usize,
}

/// Size of the fold-in part for a user with `nnz` items.
pub fn fold_in_size(nnz: usize, fold_frac: f64) -> usize {
    // The epsilon absorbs representation error in products like 0.8 * 10.
    ((fold_frac * nnz as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Partitions users into train / validation / test by a shuffled order and
/// splits every held-out user's items into `⌈fold_frac·nnz⌉` fold-in items
/// and the remaining targets.
pub fn split_strong_generalization(
    c: &Corpus,
    rng: &mut Rng,
    n_valid: usize,
    n_test: usize,
    fold_frac: f64,
) -> Result<StrongGenSplit> {
    if n_valid + n_test >= c.doc_count() {
        return Err(Error::InvalidArgument(format!(
            "{n_valid} validation + {n_test} test users leave no training users out of {}",
            c.doc_count()
        )));
    }
    if !(fold_frac > 0.0 && fold_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fold fraction must lie in (0, 1), got {fold_frac}"
        )));
    }
    let mut order: Vec<usize> = (0..c.doc_count()).collect();
    order.shuffle(rng);

    let mut excluded = 0;
    let mut held_out = |users: &[usize], rng: &mut Rng| -> Result<HeldOutUsers> {
        let mut out = HeldOutUsers::default();
        for &u in users {
            let doc = c.doc(u);
            let nnz = doc.nnz();
            let k = fold_in_size(nnz, fold_frac);
            if nnz < 2 || k >= nnz || k == 0 {
                excluded += 1;
                continue;
            }
            let mut pos: Vec<usize> = (0..nnz).collect();
            pos.shuffle(rng);
            let pick = |ps: &[usize]| {
                let pairs = ps.iter().map(|&p| (doc.indices()[p], doc.values()[p]));
                SparseVector::from_pairs(c.vocab_size(), pairs)
            };
            out.users.push(u);
            out.fold_in.push(pick(&pos[..k])?);
            out.targets.push(pick(&pos[k..])?);
        }
        Ok(out)
    };
    let valid = held_out(&order[..n_valid], rng)?;
    let test = held_out(&order[n_valid..n_valid + n_test], rng)?;
    let train_users = order[n_valid + n_test..].to_vec();
    let train = Corpus::new(
        train_users.iter().map(|&u| c.doc(u).clone()).collect(),
        c.vocab_size(),
    )?;
    Ok(StrongGenSplit {
        train,
        train_users,
        valid,
        test,
        excluded,
    })
}
