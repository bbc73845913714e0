//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; the process exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nfa_core::checkpoint::Checkpoint;
use nfa_core::cli::{prepare_synthetic, run_train};
use nfa_core::config::RunConfig;
use nfa_core::encoder::{kl_between, kl_to_prior};
use nfa_core::eval::{
    fit_documents, kl_rare_from_fits, ndcg_at_n, perplexity_bound, perplexity_report, rank_by_scores, recall_at_n,
    spectrum_report, DocFit, DEFAULT_RARE_FRAC,
};
use nfa_core::mlp::Layer;
use nfa_core::model::JacobianTarget;
use nfa_core::sparse::{normalize_counts, restrict_top_l, select_features};
use nfa_core::synthetic::{synthetic_split, SyntheticConfig};
use nfa_core::train::{
    anneal_weight, elbo, elbo_grad_phi, elbo_grad_psi, elbo_grad_theta, encoder_inputs, train_epoch, AnnealSchedule,
    EpochMetrics, LocalOptConfig, Mode, Nfa, TrainConfig, TrainState,
};
use nfa_core::{Activation, Corpus, Generator, Matrix, MlpSpec, Result, Rng, SparseVector, VariationalParams};

type Outcome = Result<(bool, String)>;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn uniform_int(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + ((rng.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

fn random_doc(rng: &mut Rng, v: usize) -> SparseVector {
    let n = uniform_int(rng, 1, 12);
    let pairs = (0..n)
        .map(|_| (uniform_int(rng, 0, v - 1), 1.0 + (rng.uniform() * 4.0).floor()))
        .collect::<Vec<_>>();
    SparseVector::from_pairs(v, pairs).unwrap()
}

fn gauss(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.standard_normal()).collect()
}

// ---------------------------------------------------------------- 1

fn gradient_exactness() -> Outcome {
    let h = 1e-5;
    let instances = 24;
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut rng = Rng::new(2024);
    for i in 0..instances {
        let k = uniform_int(&mut rng, 1, 8);
        let v = uniform_int(&mut rng, 5, 50);
        let gen_depth = uniform_int(&mut rng, 1, 2);
        let enc_depth = uniform_int(&mut rng, 2, 3);
        let cfg = TrainConfig {
            seed: i as u64,
            latent_dim: k,
            generator_hidden: (0..gen_depth).map(|_| uniform_int(&mut rng, 2, 8)).collect(),
            encoder_hidden: (0..enc_depth).map(|_| uniform_int(&mut rng, 2, 8)).collect(),
            ..TrainConfig::default()
        };
        let model = Nfa::new(&cfg, v)?;
        let x = random_doc(&mut rng, v);
        let input = normalize_counts(&x);
        let psi = VariationalParams::new(gauss(&mut rng, k, 0.5), gauss(&mut rng, k, 0.5))?;
        let eps = gauss(&mut rng, k, 1.0);
        let anneal = rng.uniform();
        let mut record = |ana: f64, num: f64| {
            worst = worst.max(rel_err(ana, num));
            coords += 1;
        };

        let (_, g) = elbo_grad_psi(&model.generator, &psi, &x, &eps, anneal)?;
        for j in 0..k {
            for which in 0..2 {
                let f = |d: f64| {
                    let mut p = psi.clone();
                    if which == 0 {
                        p.mu[j] += d;
                    } else {
                        p.logvar[j] += d;
                    }
                    elbo(&model.generator, &p, &x, &eps, anneal).map(|e| e.value)
                };
                let num = (f(h)? - f(-h)?) / (2.0 * h);
                record(if which == 0 { g.mu[j] } else { g.logvar[j] }, num);
            }
        }

        let (_, g) = elbo_grad_theta(&model.generator, &psi, &x, &eps, anneal)?;
        let base = model.generator.clone();
        for t in 0..base.tensors().len() {
            for j in 0..base.tensors()[t].len() {
                let f = |d: f64| {
                    let mut gen = base.clone();
                    gen.tensors_mut()[t][j] += d;
                    elbo(&gen, &psi, &x, &eps, anneal).map(|e| e.value)
                };
                let num = (f(h)? - f(-h)?) / (2.0 * h);
                record(g.tensors()[t][j], num);
            }
        }

        let (_, g) = elbo_grad_phi(&model.generator, &model.encoder, &input, &x, &eps, anneal)?;
        let base = model.encoder.clone();
        for t in 0..base.tensors().len() {
            for j in 0..base.tensors()[t].len() {
                let f = |d: f64| {
                    let mut enc = base.clone();
                    enc.tensors_mut()[t][j] += d;
                    let (p, _) = enc.encode(&input)?;
                    elbo(&model.generator, &p, &x, &eps, anneal).map(|e| e.value)
                };
                let num = (f(h)? - f(-h)?) / (2.0 * h);
                record(g.tensors()[t][j], num);
            }
        }
    }
    Ok((
        worst <= 1e-5,
        format!("{instances} instances, {coords} coordinates, worst relative error {worst:.2e}"),
    ))
}

// ---------------------------------------------------------------- 2

fn closed_form_kl() -> Outcome {
    let vp = |mu: Vec<f64>, lv: Vec<f64>| VariationalParams::new(mu, lv).unwrap();
    let examples = [
        (kl_to_prior(&vp(vec![0.0, 0.0], vec![0.0, 0.0])), 0.0),
        (kl_to_prior(&vp(vec![1.0], vec![0.0])), 0.5),
        (
            kl_to_prior(&vp(vec![1.0, -2.0], vec![4f64.ln(), 0.0])),
            0.5 * (1.0 + 4.0 - 4f64.ln() - 1.0) + 0.5 * (4.0 + 1.0 - 0.0 - 1.0),
        ),
        (kl_between(&vp(vec![0.0], vec![0.0]), &vp(vec![1.0], vec![2f64.ln()]))?, 0.5 * 2f64.ln()),
        (kl_between(&vp(vec![0.3, -1.0], vec![0.2, -0.5]), &vp(vec![0.3, -1.0], vec![0.2, -0.5]))?, 0.0),
    ];
    let worst_example = examples.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = Rng::new(7);
    let mut negatives = 0;
    let mut worst_identity = 0.0f64;
    for _ in 0..10_000 {
        let k = uniform_int(&mut rng, 1, 8);
        let a = vp(gauss(&mut rng, k, 2.0), gauss(&mut rng, k, 2.0));
        let b = vp(gauss(&mut rng, k, 2.0), gauss(&mut rng, k, 2.0));
        let prior = VariationalParams::prior(k);
        if kl_to_prior(&a) < 0.0 || kl_between(&a, &b)? < 0.0 {
            negatives += 1;
        }
        worst_identity = worst_identity.max((kl_between(&a, &prior)? - kl_to_prior(&a)).abs());
    }
    Ok((
        worst_example <= 1e-12 && negatives == 0 && worst_identity <= 1e-12,
        format!(
            "example error {worst_example:.1e}, {negatives} negative values in 10^4 draws, prior identity error {worst_identity:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn reference_recall(ranking: &[usize], targets: &[usize], n: usize) -> f64 {
    let top = &ranking[..n.min(ranking.len())];
    let hit = top.iter().filter(|i| targets.contains(i)).count();
    hit as f64 / n.min(targets.len()) as f64
}

fn reference_ndcg(ranking: &[usize], targets: &[usize], n: usize) -> f64 {
    let mut dcg = 0.0;
    for (r, item) in ranking.iter().take(n).enumerate() {
        if targets.contains(item) {
            dcg += 1.0 / ((r + 2) as f64).ln();
        }
    }
    let ideal: f64 = (0..n.min(targets.len())).map(|r| 1.0 / ((r + 2) as f64).ln()).sum();
    dcg / ideal
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(99);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let items = uniform_int(&mut rng, 1, 60);
        let scores = gauss(&mut rng, items, 1.0);
        let ranking = rank_by_scores(&scores, &[]);
        let mut targets: Vec<usize> = (0..items).filter(|_| rng.uniform() < 0.3).collect();
        if targets.is_empty() {
            targets.push(uniform_int(&mut rng, 0, items - 1));
        }
        let n = uniform_int(&mut rng, 1, items + 5);
        let t = SparseVector::from_pairs(items, targets.iter().map(|&i| (i, 1.0)))?;
        if recall_at_n(&ranking, &t, n)? != reference_recall(&ranking, &targets, n)
            || ndcg_at_n(&ranking, &t, n)? != reference_ndcg(&ranking, &targets, n)
        {
            mismatches += 1;
        }
    }

    let v = 37;
    let gen = Generator::zeros(MlpSpec::new(vec![3, 5, v], Activation::Tanh)?);
    let docs: Vec<SparseVector> = (0..50).map(|_| random_doc(&mut rng, v)).collect();
    let bounds = docs
        .iter()
        .map(|d| elbo(&gen, &VariationalParams::prior(3), d, &gauss(&mut rng, 3, 1.0), 1.0).map(|e| e.value))
        .collect::<Result<Vec<_>>>()?;
    let ppl = perplexity_bound(&bounds, &docs)?;
    let rel = (ppl - v as f64).abs() / v as f64;
    Ok((
        mismatches == 0 && rel <= 1e-9,
        format!("{mismatches} mismatches in 1000 instances, uniform-model perplexity {ppl} (V = {v})"),
    ))
}

// ---------------------------------------------------------------- 4

fn bound_ordering() -> Outcome {
    let syn = SyntheticConfig {
        latent_dim: 5,
        hidden: vec![20],
        vocab: 200,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let (_, train, test) = synthetic_split(&syn, 300, 100)?;
    let cfg = TrainConfig {
        mode: Mode::Vae,
        inner_steps: 0,
        batch_size: 20,
        seed: 5,
        latent_dim: 5,
        generator_hidden: vec![20],
        encoder_hidden: vec![20, 20],
        lr_theta: 3e-3,
        lr_phi: 3e-3,
        ..TrainConfig::default()
    };
    let (model, _) = train_model(&cfg, &train, 20)?;
    let stats = train.stats();
    let inputs = encoder_inputs(cfg.features, &stats, test.docs())?;
    let local = LocalOptConfig {
        steps: 100,
        ..cfg.local_opt()
    };
    let fits = fit_documents(&model, test.docs(), &inputs, &local, 11)?;
    let scored: Vec<&DocFit> = fits.iter().zip(test.docs()).filter(|(_, d)| !d.is_empty()).map(|(f, _)| f).collect();
    let geq = scored.iter().filter(|f| f.elbo_star >= f.elbo_x).count();
    let strict = scored.iter().filter(|f| f.elbo_star > f.elbo_x).count();
    let n = scored.len();
    Ok((
        geq == n && strict as f64 >= 0.9 * n as f64,
        format!("{n} documents: >= on {geq}, strictly greater on {strict}"),
    ))
}

// ---------------------------------------------------------------- 5

fn train_model(cfg: &TrainConfig, corpus: &Corpus, epochs: usize) -> Result<(Nfa, Vec<EpochMetrics>)> {
    let stats = corpus.stats();
    let inputs = encoder_inputs(cfg.features, &stats, corpus.docs())?;
    let mut model = Nfa::new(cfg, corpus.vocab_size())?;
    let mut state = TrainState::new(&model, cfg);
    let mut metrics = Vec::new();
    for _ in 0..epochs {
        metrics.push(train_epoch(&mut model, corpus, &inputs, cfg, &mut state)?);
    }
    Ok((model, metrics))
}

fn bits(model: &Nfa) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    for t in model.generator.tensors().into_iter().chain(model.encoder.tensors()) {
        out.extend(t.iter().map(|v| v.to_bits()));
    }
    out
}

fn degeneration() -> Outcome {
    let syn = SyntheticConfig {
        latent_dim: 4,
        hidden: vec![16],
        vocab: 120,
        seed: 8,
        ..SyntheticConfig::default()
    };
    let (_, train, _) = synthetic_split(&syn, 200, 1)?;
    let base = TrainConfig {
        batch_size: 16,
        seed: 21,
        latent_dim: 4,
        generator_hidden: vec![16],
        encoder_hidden: vec![16, 16],
        anneal_updates: 20,
        ..TrainConfig::default()
    };
    let hybrid = TrainConfig {
        mode: Mode::Hybrid,
        inner_steps: 0,
        ..base.clone()
    };
    let vae = TrainConfig {
        mode: Mode::Vae,
        inner_steps: 0,
        ..base
    };
    let (mh, eh) = train_model(&hybrid, &train, 3)?;
    let (mv, ev) = train_model(&vae, &train, 3)?;
    let metric_bits = |e: &[EpochMetrics]| {
        e.iter()
            .map(|m| (m.mean_elbo.to_bits(), m.mean_kl.to_bits(), m.updates))
            .collect::<Vec<_>>()
    };
    let same = bits(&mh) == bits(&mv) && metric_bits(&eh) == metric_bits(&ev);
    Ok((
        same,
        format!(
            "{} parameters after 3 epochs, {}",
            bits(&mh).len(),
            if same { "all bits equal" } else { "bits differ" }
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn jacobian_fd(gen: &Generator, z: &[f64], h: f64) -> Result<Matrix> {
    let v = gen.vocab_size();
    let mut j = Matrix::zeros(v, z.len());
    for c in 0..z.len() {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[c] += h;
        zm[c] -= h;
        let lp = gen.forward(&zp)?.log_mu;
        let lm = gen.forward(&zm)?.log_mu;
        for r in 0..v {
            j.set(r, c, (lp[r] - lm[r]) / (2.0 * h));
        }
    }
    Ok(j)
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn jacobian_correctness() -> Outcome {
    let mut rng = Rng::new(31);
    let mut fd_err = 0.0f64;
    let mut null_err = 0.0f64;
    for _ in 0..5 {
        let gen = Generator::new(MlpSpec::new(vec![4, 7, 6, 15], Activation::Tanh)?, &mut rng);
        let z = gauss(&mut rng, 4, 1.0);
        let j = gen.jacobian_log_mu(&z)?;
        fd_err = fd_err.max(max_abs_diff(&j, &jacobian_fd(&gen, &z, 1e-5)?));
        let mu = gen.forward(&z)?.mu();
        let mt_j = j.mul_t_vec(&mu);
        null_err = null_err.max(mt_j.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }

    let (k, v) = (3, 9);
    let w = Matrix::from_vec(v, k, gauss(&mut rng, v * k, 1.0))?;
    let b = gauss(&mut rng, v, 1.0);
    let gen = Generator::from_layers(
        MlpSpec::new(vec![k, v], Activation::Tanh)?,
        vec![Layer {
            weight: w.clone(),
            bias: b,
        }],
    )?;
    let z = gauss(&mut rng, k, 1.0);
    let mu = gen.forward(&z)?.mu();
    let mut p = Matrix::identity(v);
    for r in 0..v {
        for c in 0..v {
            p.set(r, c, p.get(r, c) - mu[c]);
        }
    }
    let closed = p.matmul(&w)?;
    let closed_err = max_abs_diff(&gen.jacobian(&z, JacobianTarget::LogMu)?, &closed);
    Ok((
        fd_err <= 1e-5 && closed_err <= 1e-9 && null_err <= 1e-9,
        format!("finite differences {fd_err:.1e}, one-layer closed form {closed_err:.1e}, mu^T J {null_err:.1e}"),
    ))
}

// ---------------------------------------------------------------- 7, 8, 9

const TREND_EPOCHS: usize = 10;
const TREND_M: usize = 50;
const EVAL_M: usize = 100;

struct TrendRun {
    perplexity: f64,
    singular_above_one: usize,
    fits: Vec<DocFit>,
}

fn trend_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        inner_steps: if mode == Mode::Hybrid { TREND_M } else { 0 },
        batch_size: 50,
        epochs: TREND_EPOCHS,
        seed: 1,
        latent_dim: 10,
        generator_hidden: vec![64],
        encoder_hidden: vec![64, 64],
        lr_theta: 3e-3,
        lr_phi: 3e-3,
        ..TrainConfig::default()
    }
}

fn trend_run(mode: Mode, train: &Corpus, test: &Corpus) -> Result<TrendRun> {
    let cfg = trend_config(mode);
    let (model, _) = train_model(&cfg, train, cfg.epochs)?;
    let stats = train.stats();
    let inputs = encoder_inputs(cfg.features, &stats, test.docs())?;
    let local = LocalOptConfig {
        steps: EVAL_M,
        ..cfg.local_opt()
    };
    let fits = fit_documents(&model, test.docs(), &inputs, &local, 7)?;
    let report = perplexity_report(&fits, test.docs())?;
    let spectrum = spectrum_report(&model.generator, 1.0)?;
    Ok(TrendRun {
        perplexity: report.optimized,
        singular_above_one: spectrum.count_above,
        fits,
    })
}

struct Sweep {
    l: usize,
    vae: TrendRun,
    hybrid: TrendRun,
    train: Corpus,
    test: Corpus,
}

impl Sweep {
    fn improvement(&self) -> f64 {
        (self.vae.perplexity - self.hybrid.perplexity) / self.vae.perplexity
    }
}

fn sweep(train: &Corpus, test: &Corpus, l: usize) -> Result<Sweep> {
    let (train_l, kept) = restrict_top_l(train, l)?;
    let test_l = select_features(test, &kept)?;
    let t0 = Instant::now();
    let vae = trend_run(Mode::Vae, &train_l, &test_l)?;
    let hybrid = trend_run(Mode::Hybrid, &train_l, &test_l)?;
    eprintln!(
        "  L = {l}: vae {:.3}, hybrid {:.3}, singular values > 1: {} / {} ({:.0}s)",
        vae.perplexity,
        hybrid.perplexity,
        vae.singular_above_one,
        hybrid.singular_above_one,
        t0.elapsed().as_secs_f64()
    );
    Ok(Sweep {
        l,
        vae,
        hybrid,
        train: train_l,
        test: test_l,
    })
}

fn trend_reproduction(full: &Sweep) -> Outcome {
    let pass = full.hybrid.perplexity <= full.vae.perplexity
        && full.hybrid.singular_above_one >= full.vae.singular_above_one;
    Ok((
        pass,
        format!(
            "perplexity hybrid {:.3} vs vae {:.3}; singular values > 1: hybrid {} vs vae {}",
            full.hybrid.perplexity, full.vae.perplexity, full.hybrid.singular_above_one, full.vae.singular_above_one
        ),
    ))
}

fn sparsity_sweep(sweeps: &[Sweep]) -> Outcome {
    let gains: Vec<(usize, f64)> = sweeps.iter().map(|s| (s.l, s.improvement())).collect();
    let largest_l = gains.iter().max_by_key(|(l, _)| *l).map(|g| g.1).unwrap_or(f64::NAN);
    let nonneg = gains.iter().all(|(_, g)| *g >= 0.0);
    let largest_at_top = gains.iter().all(|(_, g)| *g <= largest_l);
    let detail = gains
        .iter()
        .map(|(l, g)| format!("L={l}: {:+.3}%", 100.0 * g))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((nonneg && largest_at_top, format!("relative improvement {detail}")))
}

fn kl_rare(full: &Sweep) -> Outcome {
    let stats = full.train.stats();
    let report = kl_rare_from_fits(&full.hybrid.fits, full.test.docs(), &stats, DEFAULT_RARE_FRAC)?;
    Ok((
        report.rho > 0.2,
        format!("Spearman rho {:.3} over {} held-out documents", report.rho, report.rows.len()),
    ))
}

// ---------------------------------------------------------------- 10

fn reproducibility(dir: &Path) -> Outcome {
    let syn = SyntheticConfig {
        latent_dim: 4,
        hidden: vec![16],
        vocab: 80,
        mean_length: 15.0,
        seed: 12,
        ..SyntheticConfig::default()
    };
    let data = dir.join("data");
    prepare_synthetic(&syn, 120, 30, &data)?;
    let config = |out: &str, epochs: usize| {
        let mut cfg = RunConfig::default();
        let text = format!(
            "mode = hybrid\nM = 5\nepochs = {epochs}\nbatch_size = 16\nseed = 4\nlatent_dim = 4\n\
             generator_hidden = 16\nencoder_hidden = 16,16\nanneal_updates = 10\n"
        );
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            cfg.set(k.trim(), v.trim()).unwrap();
        }
        cfg.train_data = Some(data.join("train.txt"));
        cfg.valid_data = Some(data.join("test.txt"));
        cfg.eval_inner_steps = 5;
        cfg.out_dir = dir.join(out);
        cfg
    };
    let mut quiet = |_: &str| {};
    run_train(&config("a", 3), None, &mut quiet)?;
    run_train(&config("b", 3), None, &mut quiet)?;
    run_train(&config("c", 1), None, &mut quiet)?;
    let c_last = dir.join("c").join("last.ckpt");
    run_train(&config("c", 3), Some(&c_last), &mut quiet)?;

    let read = |run: &str, file: &str| fs::read(dir.join(run).join(file)).map_err(nfa_core::Error::from);
    let identical = read("a", "metrics.csv")? == read("b", "metrics.csv")?
        && read("a", "validation.csv")? == read("b", "validation.csv")?;
    let a = Checkpoint::load(dir.join("a").join("last.ckpt"))?;
    let c = Checkpoint::load(&c_last)?;
    let resumed = read("a", "metrics.csv")? == read("c", "metrics.csv")?
        && bits(&a.model) == bits(&c.model)
        && a.state == c.state;
    Ok((
        identical && resumed,
        format!(
            "repeated runs {}, resumed run {}",
            if identical { "byte-identical" } else { "differ" },
            if resumed { "matches the uninterrupted run" } else { "differs" }
        ),
    ))
}

// ---------------------------------------------------------------- 11

fn anneal_endpoints() -> Outcome {
    let t = 1000;
    let mut s = AnnealSchedule {
        total_updates: t,
        current: 0,
    };
    let w0 = s.weight();
    s.current = t / 2;
    let wm = s.weight();
    s.current = t;
    let wt = s.weight();
    let pass = w0 == 0.0
        && wm == 0.5
        && wt == 1.0
        && anneal_weight(0, t) == 0.0
        && anneal_weight(t / 2, t) == 0.5
        && anneal_weight(t, t) == 1.0
        && anneal_weight(250, t) == 0.25;
    Ok((pass, format!("weight(0) = {w0}, weight(T/2) = {wm}, weight(T) = {wt}")))
}

// ----------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    let mut report = |id: usize, name: &str, t0: Instant, outcome: Outcome| {
        let secs = t0.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(o) => o,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} ({detail}; {secs:.1}s)",
            if pass { "PASS" } else { "FAIL" }
        );
    };

    let t = Instant::now();
    report(1, "gradient exactness", t, gradient_exactness());
    let t = Instant::now();
    report(2, "closed-form KL", t, closed_form_kl());
    let t = Instant::now();
    report(3, "metric oracles", t, metric_oracles());
    let t = Instant::now();
    report(4, "bound ordering", t, bound_ordering());
    let t = Instant::now();
    report(5, "hybrid M=0 equals vae", t, degeneration());
    let t = Instant::now();
    report(6, "Jacobian correctness", t, jacobian_correctness());

    let t = Instant::now();
    let sweeps = synthetic_split(&SyntheticConfig::default(), 2000, 500).and_then(|(_, train, test)| {
        [2000, 1000, 250]
            .into_iter()
            .map(|l| sweep(&train, &test, l))
            .collect::<Result<Vec<_>>>()
    });
    match &sweeps {
        Ok(s) => {
            report(7, "trend reproduction", t, trend_reproduction(&s[0]));
            report(8, "sparsity sweep", t, sparsity_sweep(s));
            report(9, "KL vs rare words", t, kl_rare(&s[0]));
        }
        Err(e) => {
            for (id, name) in [(7, "trend reproduction"), (8, "sparsity sweep"), (9, "KL vs rare words")] {
                report(id, name, t, Err(nfa_core::Error::InvalidArgument(e.to_string())));
            }
        }
    }

    let t = Instant::now();
    report(10, "reproducibility", t, reproducibility(tmp.path()));
    let t = Instant::now();
    report(11, "anneal schedule", t, anneal_endpoints());

    if failed > 0 {
        println!("{failed} of 11 criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
