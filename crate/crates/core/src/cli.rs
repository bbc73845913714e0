//! Subcommand implementations behind the `nfa` binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_ranking, fit_documents, kl_rare_report, perplexity_report, rank_items, spectrum_report,
    KlRareReport, RankingResult, SpectrumReport,
};
use crate::math::Rng;
use crate::sparse::{
    binarize_implicit, load_corpus, load_ratings, restrict_top_l, split_strong_generalization, Corpus,
    CorpusFormat, FeatureStats, HeldOutUsers, SparseVector,
};
use crate::synthetic::{synthetic_split, SyntheticConfig};
use crate::train::{encoder_inputs, train_epoch, LocalOptConfig, Nfa, TrainState};

/// Loads a corpus and fits it to a model vocabulary of `vocab` features.
/// Files without a header infer their width from the largest index, so
/// narrower data is widened; wider data is an error naming both sizes.
pub fn load_for_model(path: &Path, format: CorpusFormat, vocab: usize) -> Result<Corpus> {
    let c = load_corpus(path, format, None)?;
    conform(c, vocab)
}

fn conform(c: Corpus, vocab: usize) -> Result<Corpus> {
    if c.vocab_size() == vocab {
        return Ok(c);
    }
    if c.vocab_size() > vocab {
        return Err(Error::DimMismatch {
            data: c.vocab_size(),
            model: vocab,
        });
    }
    let docs = c
        .docs()
        .iter()
        .map(|d| SparseVector::new(vocab, d.indices().to_vec(), d.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(docs, vocab)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn local_for_eval(cfg: &RunConfig) -> LocalOptConfig {
    LocalOptConfig {
        steps: cfg.eval_inner_steps,
        ..cfg.train.local_opt()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends `row` to a CSV, writing `header` first if the file is new.
fn append_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{row}").map_err(|e| Error::io(path, e))
}

/// Held-out users from a fold-in file and a target file with matching rows.
/// Users without targets are dropped.
pub fn load_held_out(fold_in: &Path, targets: &Path, format: CorpusFormat, vocab: usize) -> Result<HeldOutUsers> {
    let f = load_for_model(fold_in, format, vocab)?;
    let t = load_for_model(targets, format, vocab)?;
    if f.doc_count() != t.doc_count() {
        return Err(Error::shape(
            format!("{} target rows", f.doc_count()),
            format!("{} in {}", t.doc_count(), targets.display()),
        ));
    }
    let mut out = HeldOutUsers::default();
    for u in 0..f.doc_count() {
        if !t.doc(u).is_empty() {
            out.users.push(u);
            out.fold_in.push(f.doc(u).clone());
            out.targets.push(t.doc(u).clone());
        }
    }
    Ok(out)
}

/// Either held-out documents or held-out users.
pub enum Evaluation {
    Text(Corpus),
    Ranking(HeldOutUsers),
}

/// Validation score (lower is better) plus CSV cells.
pub struct ValidationResult {
    pub score: f64,
    pub header: String,
    pub row: String,
}

fn selection_n(ns: &[usize]) -> usize {
    if ns.contains(&100) {
        100
    } else {
        *ns.last().expect("validated nonempty")
    }
}

pub fn validate(model: &Nfa, stats: &FeatureStats, cfg: &RunConfig, data: &Evaluation) -> Result<ValidationResult> {
    match data {
        Evaluation::Text(c) => {
            let inputs = encoder_inputs(cfg.train.features, stats, c.docs())?;
            let fits = fit_documents(model, c.docs(), &inputs, &local_for_eval(cfg), cfg.train.seed)?;
            let p = perplexity_report(&fits, c.docs())?;
            Ok(ValidationResult {
                score: p.optimized,
                header: "perplexity_psi_x,perplexity_psi_star".into(),
                row: format!("{},{}", p.amortized, p.optimized),
            })
        }
        Evaluation::Ranking(users) => {
            let ns = if cfg.ranking_n.is_empty() { vec![100] } else { cfg.ranking_n.clone() };
            let res = evaluate_ranking(model, users, cfg.train.features, stats, &ns, cfg.exclude_fold_in)?;
            let pick = selection_n(&ns);
            let score = -res.iter().find(|r| r.n == pick).map(|r| r.mean_ndcg).unwrap_or(0.0);
            let header = res
                .iter()
                .map(|r| format!("recall@{0},ndcg@{0}", r.n))
                .collect::<Vec<_>>()
                .join(",");
            let row = res
                .iter()
                .map(|r| format!("{},{}", r.mean_recall, r.mean_ndcg))
                .collect::<Vec<_>>()
                .join(",");
            Ok(ValidationResult { score, header, row })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub epochs_completed: u64,
    pub best_score: f64,
    pub stopped_early: bool,
}

fn load_eval_set(cfg: &RunConfig, data: &Option<PathBuf>, targets: &Option<PathBuf>, vocab: usize) -> Result<Option<Evaluation>> {
    match (data, targets) {
        (None, _) => Ok(None),
        (Some(d), None) => Ok(Some(Evaluation::Text(load_for_model(d, cfg.data_format, vocab)?))),
        (Some(d), Some(t)) => Ok(Some(Evaluation::Ranking(load_held_out(d, t, cfg.data_format, vocab)?))),
    }
}

/// Trains per `cfg`, optionally resuming from a checkpoint. Writes
/// `metrics.csv`, `validation.csv`, `timing.csv`, `last.ckpt` and
/// `best.ckpt` into the output directory.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_path = required(&cfg.train_data, "train_data")?;
    let mut train = load_corpus(train_path, cfg.data_format, cfg.vocab_size)?;

    let (mut model, mut state, stats, mut best_score, mut since_best) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            train = conform(train, ck.model.vocab_size())?;
            log(&format!("resuming from {} at epoch {}", p.display(), ck.state.epoch));
            (ck.model, ck.state, ck.stats, ck.best_score, ck.since_best)
        }
        None => {
            let model = Nfa::new(&cfg.train, train.vocab_size())?;
            let state = TrainState::new(&model, &cfg.train);
            (model, state, train.stats(), f64::INFINITY, 0)
        }
    };
    let vocab = model.vocab_size();
    let valid = load_eval_set(cfg, &cfg.valid_data, &cfg.valid_targets, vocab)?;
    let inputs = encoder_inputs(cfg.train.features, &stats, train.docs())?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.save(cfg.out_dir.join("config.txt"))?;
    let metrics = cfg.out_dir.join("metrics.csv");
    let validation = cfg.out_dir.join("validation.csv");
    let timing = cfg.out_dir.join("timing.csv");
    let last = cfg.out_dir.join("last.ckpt");
    let best = cfg.out_dir.join("best.ckpt");

    let snapshot = |model: &Nfa, state: &TrainState, best_score: f64, since_best: u64| Checkpoint {
        config: cfg.clone(),
        model: model.clone(),
        state: state.clone(),
        stats: stats.clone(),
        best_score,
        since_best,
    };

    let mut stopped_early = false;
    let mut best_written = best.exists() && resume.is_some();
    while (state.epoch as usize) < cfg.train.epochs {
        let t0 = Instant::now();
        let m = match train_epoch(&mut model, &train, &inputs, &cfg.train, &mut state) {
            Ok(m) => m,
            Err(e @ Error::NonFinite(_)) => {
                let dump = cfg.out_dir.join("nan_dump.txt");
                fs::write(&dump, snapshot(&model, &state, best_score, since_best).to_text())
                    .map_err(|e| Error::io(&dump, e))?;
                log(&format!("non-finite parameters; state written to {}", dump.display()));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        append_csv(
            &metrics,
            "epoch,mode,train_elbo,train_kl,updates",
            &format!("{},{},{},{},{}", m.epoch, cfg.train.mode, m.mean_elbo, m.mean_kl, m.updates),
        )?;
        append_csv(&timing, "epoch,seconds", &format!("{},{:.3}", m.epoch, t0.elapsed().as_secs_f64()))?;
        log(&format!("epoch {} elbo {:.4} kl {:.4}", m.epoch, m.mean_elbo, m.mean_kl));

        let epoch = m.epoch as usize;
        if let Some(v) = &valid {
            if cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every) {
                let r = validate(&model, &stats, cfg, v)?;
                append_csv(&validation, &format!("epoch,{}", r.header), &format!("{epoch},{}", r.row))?;
                log(&format!("validation {}: {}", r.header, r.row));
                if r.score < best_score {
                    best_score = r.score;
                    since_best = 0;
                    snapshot(&model, &state, best_score, since_best).save(&best)?;
                    best_written = true;
                } else {
                    since_best += 1;
                }
            }
        }
        let at_end = epoch >= cfg.train.epochs;
        let stop = cfg.patience > 0 && since_best as usize >= cfg.patience;
        if (cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every)) || at_end || stop {
            snapshot(&model, &state, best_score, since_best).save(&last)?;
        }
        if stop && !at_end {
            log(&format!("stopping: {since_best} validations without improvement"));
            stopped_early = true;
            break;
        }
    }
    if !last.exists() {
        snapshot(&model, &state, best_score, since_best).save(&last)?;
    }

    if let Some(test) = load_eval_set(cfg, &cfg.test_data, &cfg.test_targets, vocab)? {
        let chosen = if best_written { Checkpoint::load(&best)?.model } else { model.clone() };
        let r = validate(&chosen, &stats, cfg, &test)?;
        let path = cfg.out_dir.join("test.csv");
        let mut w = create(&path)?;
        writeln!(w, "{}", r.header)?;
        writeln!(w, "{}", r.row)?;
        finish(w, &path)?;
        log(&format!("test {}: {}", r.header, r.row));
    }

    Ok(TrainOutcome {
        final_checkpoint: last,
        best_checkpoint: best_written.then_some(best),
        epochs_completed: state.epoch,
        best_score,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Perplexity,
    Ranking,
}

impl std::str::FromStr for EvalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perplexity" => Ok(Self::Perplexity),
            "ranking" => Ok(Self::Ranking),
            other => Err(Error::InvalidArgument(format!("unknown evaluation {other:?}"))),
        }
    }
}

pub fn write_ranking_csv(path: &Path, users: &HeldOutUsers, results: &[RankingResult]) -> Result<()> {
    let mut w = create(path)?;
    let header: Vec<String> = results.iter().map(|r| format!("recall@{0},ndcg@{0}", r.n)).collect();
    writeln!(w, "user,{}", header.join(","))?;
    for (i, u) in users.users.iter().enumerate() {
        let cells: Vec<String> = results.iter().map(|r| format!("{},{}", r.recall[i], r.ndcg[i])).collect();
        writeln!(w, "{u},{}", cells.join(","))?;
    }
    let means: Vec<String> = results.iter().map(|r| format!("{},{}", r.mean_recall, r.mean_ndcg)).collect();
    let errs: Vec<String> = results.iter().map(|r| format!("{},{}", r.stderr_recall, r.stderr_ndcg)).collect();
    writeln!(w, "mean,{}", means.join(","))?;
    writeln!(w, "stderr,{}", errs.join(","))?;
    finish(w, path)
}

/// Evaluates a checkpoint. Perplexity mode writes `perplexity.csv` and
/// `perplexity_docs.csv`; ranking mode writes `ranking.csv`. Returns the
/// paths written.
pub fn run_evaluate(
    checkpoint: &Path,
    data: &Path,
    targets: Option<&Path>,
    kind: EvalKind,
    out_dir: &Path,
    overrides: &dyn Fn(&mut RunConfig),
) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    overrides(&mut cfg);
    let vocab = ck.model.vocab_size();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match kind {
        EvalKind::Perplexity => {
            let c = load_for_model(data, cfg.data_format, vocab)?;
            let inputs = encoder_inputs(cfg.train.features, &ck.stats, c.docs())?;
            let fits = fit_documents(&ck.model, c.docs(), &inputs, &local_for_eval(&cfg), cfg.train.seed)?;
            let p = perplexity_report(&fits, c.docs())?;
            let summary = out_dir.join("perplexity.csv");
            let mut w = create(&summary)?;
            writeln!(w, "bound,perplexity")?;
            writeln!(w, "psi_x,{}", p.amortized)?;
            writeln!(w, "psi_star,{}", p.optimized)?;
            finish(w, &summary)?;
            let docs = out_dir.join("perplexity_docs.csv");
            let mut w = create(&docs)?;
            writeln!(w, "doc,tokens,elbo_psi_x,elbo_psi_star")?;
            for (d, (f, x)) in fits.iter().zip(c.docs()).enumerate() {
                if !x.is_empty() {
                    writeln!(w, "{d},{},{},{}", x.total(), f.elbo_x, f.elbo_star)?;
                }
            }
            finish(w, &docs)?;
            Ok(vec![summary, docs])
        }
        EvalKind::Ranking => {
            let targets = targets.ok_or_else(|| Error::InvalidArgument("ranking evaluation needs --targets".into()))?;
            let users = load_held_out(data, targets, cfg.data_format, vocab)?;
            let ns = if cfg.ranking_n.is_empty() { vec![50, 100] } else { cfg.ranking_n.clone() };
            let res = evaluate_ranking(&ck.model, &users, cfg.train.features, &ck.stats, &ns, cfg.exclude_fold_in)?;
            let path = out_dir.join("ranking.csv");
            write_ranking_csv(&path, &users, &res)?;
            Ok(vec![path])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnoseKind {
    Spectrum,
    KlRare,
}

impl std::str::FromStr for DiagnoseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectrum" => Ok(Self::Spectrum),
            "kl_rare" | "kl-rare" => Ok(Self::KlRare),
            other => Err(Error::InvalidArgument(format!("unknown diagnostic {other:?}"))),
        }
    }
}

pub fn write_spectrum_csv(path: &Path, r: &SpectrumReport) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "rank,singular_value,log10_value")?;
    for (i, s) in r.singular_values.iter().enumerate() {
        writeln!(w, "{},{},{}", i + 1, s, s.log10())?;
    }
    finish(w, path)
}

pub fn write_kl_rare_csv(path: &Path, r: &KlRareReport) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "doc,kl,rare_tokens")?;
    for row in &r.rows {
        writeln!(w, "{},{},{}", row.doc, row.kl, row.rare_tokens)?;
    }
    writeln!(w, "spearman_rho,{},", r.rho)?;
    finish(w, path)
}

pub fn run_diagnose(
    checkpoint: &Path,
    data: Option<&Path>,
    kind: DiagnoseKind,
    out_dir: &Path,
    overrides: &dyn Fn(&mut RunConfig),
) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    overrides(&mut cfg);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match kind {
        DiagnoseKind::Spectrum => {
            let r = spectrum_report(&ck.model.generator, 1.0)?;
            let path = out_dir.join("spectrum.csv");
            write_spectrum_csv(&path, &r)?;
            Ok(path)
        }
        DiagnoseKind::KlRare => {
            let data = data.ok_or_else(|| Error::InvalidArgument("kl_rare needs --data".into()))?;
            let c = load_for_model(data, cfg.data_format, ck.model.vocab_size())?;
            let inputs = encoder_inputs(cfg.train.features, &ck.stats, c.docs())?;
            let local = local_for_eval(&cfg);
            let r = kl_rare_report(&ck.model, c.docs(), &inputs, &ck.stats, &local, cfg.rare_frac, cfg.train.seed)?;
            let path = out_dir.join("kl_rare.csv");
            write_kl_rare_csv(&path, &r)?;
            Ok(path)
        }
    }
}

/// Top-`n` unseen items for every row of `feedback`, as
/// `user<TAB>item<TAB>item...` lines.
pub fn recommend<W: Write>(ck: &Checkpoint, feedback: &Corpus, n: usize, exclude_fold_in: bool, mut out: W) -> Result<()> {
    let vocab = ck.model.vocab_size();
    if feedback.vocab_size() > vocab {
        let bad = feedback
            .docs()
            .iter()
            .flat_map(|d| d.indices().iter().copied())
            .find(|&i| i >= vocab)
            .unwrap_or(feedback.vocab_size() - 1);
        return Err(Error::InvalidArgument(format!(
            "unknown item id {bad}: the model has {vocab} items"
        )));
    }
    let feedback = conform(feedback.clone(), vocab)?;
    let inputs = encoder_inputs(ck.config.train.features, &ck.stats, feedback.docs())?;
    for (u, (x, input)) in feedback.docs().iter().zip(&inputs).enumerate() {
        let ranking = rank_items(&ck.model.generator, &ck.model.encoder, input, x, exclude_fold_in)?;
        write!(out, "{u}")?;
        for i in ranking.iter().take(n) {
            write!(out, "\t{i}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn run_recommend(checkpoint: &Path, feedback: &Path, n: usize, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let fb = load_corpus(feedback, ck.config.data_format, None)?;
    match out {
        Some(p) => {
            let w = create(p)?;
            recommend(&ck, &fb, n, ck.config.exclude_fold_in, w)
        }
        None => recommend(&ck, &fb, n, ck.config.exclude_fold_in, std::io::stdout().lock()),
    }
}

/// Ratings file to implicit feedback; writes `feedback.txt` (triples),
/// `users.txt` and `items.txt` (original ids, one per row index).
pub fn prepare_binarize(ratings: &Path, threshold: f64, min_items: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let r = load_ratings(ratings)?;
    let fb = binarize_implicit(&r, threshold, min_items)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = out_dir.join("feedback.txt");
    fb.corpus.save_triples(&corpus)?;
    let mut paths = vec![corpus];
    for (name, ids) in [("users.txt", &fb.user_ids), ("items.txt", &fb.item_ids)] {
        let p = out_dir.join(name);
        let mut w = create(&p)?;
        for id in ids.iter() {
            writeln!(w, "{id}")?;
        }
        finish(w, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Strong-generalization split into `train.txt`, `valid_fold_in.txt`,
/// `valid_targets.txt`, `test_fold_in.txt` and `test_targets.txt`.
pub fn prepare_split(
    data: &Path,
    format: CorpusFormat,
    n_valid: usize,
    n_test: usize,
    fold_frac: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(Vec<PathBuf>, usize)> {
    let c = load_corpus(data, format, None)?;
    let mut rng = Rng::new(seed);
    let s = split_strong_generalization(&c, &mut rng, n_valid, n_test, fold_frac)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let v = c.vocab_size();
    let mut paths = Vec::new();
    let mut save = |name: &str, corpus: &Corpus| -> Result<()> {
        let p = out_dir.join(name);
        corpus.save_triples(&p)?;
        paths.push(p);
        Ok(())
    };
    save("train.txt", &s.train)?;
    for (prefix, users) in [("valid", &s.valid), ("test", &s.test)] {
        save(&format!("{prefix}_fold_in.txt"), &Corpus::new(users.fold_in.clone(), v)?)?;
        save(&format!("{prefix}_targets.txt"), &Corpus::new(users.targets.clone(), v)?)?;
    }
    Ok((paths, s.excluded))
}

/// Keeps the `l` most frequent features; writes the corpus and the kept
/// original ids (`<out>.features`).
pub fn prepare_top_l(data: &Path, format: CorpusFormat, l: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let c = load_corpus(data, format, None)?;
    let (r, kept) = restrict_top_l(&c, l)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    r.save_triples(out)?;
    let ids = out.with_extension("features");
    let mut w = create(&ids)?;
    for k in kept {
        writeln!(w, "{k}")?;
    }
    finish(w, &ids)?;
    Ok(vec![out.to_path_buf(), ids])
}

/// Writes `train.txt` and `test.txt` drawn from a random ground-truth
/// generator.
pub fn prepare_synthetic(cfg: &SyntheticConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (_, train, test) = synthetic_split(cfg, n_train, n_test)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let a = out_dir.join("train.txt");
    let b = out_dir.join("test.txt");
    train.save_triples(&a)?;
    test.save_triples(&b)?;
    Ok(vec![a, b])
}

/// Exit status for a failed command: 2 for usage problems (missing files,
/// bad configuration), 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) | Error::DimMismatch { .. } => 2,
        _ => 1,
    }
}
