//! Held-out bounds, ranking metrics and model diagnostics.

use rayon::prelude::*;

use crate::encoder::{kl_between, Encoder, VariationalParams};
use crate::error::{Error, Result};
use crate::math::{gaussian_sample, singular_values, Rng};
use crate::model::{Generator, JacobianTarget};
use crate::sparse::{rare_word_count, FeatureStats, HeldOutUsers, SparseVector};
use crate::train::{elbo_on, encoder_inputs, optimize_local_psi_with, Features, LocalOptConfig, Nfa};

/// `exp(−mean_i bound_i / N_i)` over the nonempty documents.
pub fn perplexity_bound(bounds: &[f64], docs: &[SparseVector]) -> Result<f64> {
    if bounds.len() != docs.len() {
        return Err(Error::shape(docs.len(), bounds.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (b, d) in bounds.iter().zip(docs) {
        let len = d.total();
        if len > 0.0 {
            sum += b / len;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("perplexity of an all-empty document set".into()));
    }
    Ok((-sum / n as f64).exp())
}

/// Bounds of one document under the encoder output and after refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct DocFit {
    pub psi_x: VariationalParams,
    pub psi_star: VariationalParams,
    pub elbo_x: f64,
    pub elbo_star: f64,
}

/// Evaluation streams live in their own range so they never collide with
/// training noise.
pub fn eval_stream(seed: u64, doc: usize) -> Rng {
    Rng::derive(seed, (1 << 62) | (doc as u64 & 0xFFFF_FFFF))
}

/// Encodes every document, then refines from ψ(x). Both bounds use the same
/// evaluation draws, so `elbo_star >= elbo_x` always holds. Empty documents
/// get zero bounds and are skipped by [`perplexity_bound`].
pub fn fit_documents(
    model: &Nfa,
    docs: &[SparseVector],
    inputs: &[SparseVector],
    local: &LocalOptConfig,
    seed: u64,
) -> Result<Vec<DocFit>> {
    if docs.len() != inputs.len() {
        return Err(Error::shape(docs.len(), inputs.len()));
    }
    if let Some(d) = docs.first() {
        if d.dim() != model.vocab_size() {
            return Err(Error::DimMismatch {
                data: d.dim(),
                model: model.vocab_size(),
            });
        }
    }
    let k = model.latent_dim();
    (0..docs.len())
        .into_par_iter()
        .map(|d| {
            let (psi_x, _) = model.encoder.encode(&inputs[d])?;
            if docs[d].is_empty() {
                return Ok(DocFit {
                    psi_star: psi_x.clone(),
                    psi_x,
                    elbo_x: 0.0,
                    elbo_star: 0.0,
                });
            }
            let mut rng = eval_stream(seed, d);
            let eval_eps = (0..local.eval_samples.max(1))
                .map(|_| gaussian_sample(&mut rng, k))
                .collect::<Result<Vec<_>>>()?;
            let elbo_x = elbo_on(&model.generator, &psi_x, &docs[d], &eval_eps, 1.0)?;
            let fit = optimize_local_psi_with(&model.generator, &docs[d], &psi_x, local, &mut rng, 1.0, &eval_eps)?;
            let elbo_star = fit.best_value().unwrap_or(elbo_x);
            Ok(DocFit {
                psi_x,
                psi_star: fit.psi,
                elbo_x,
                elbo_star,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityReport {
    pub amortized: f64,
    pub optimized: f64,
}

pub fn perplexity_report(fits: &[DocFit], docs: &[SparseVector]) -> Result<PerplexityReport> {
    let x: Vec<f64> = fits.iter().map(|f| f.elbo_x).collect();
    let s: Vec<f64> = fits.iter().map(|f| f.elbo_star).collect();
    Ok(PerplexityReport {
        amortized: perplexity_bound(&x, docs)?,
        optimized: perplexity_bound(&s, docs)?,
    })
}

/// Items ordered by descending score, ties by ascending id, with `exclude`
/// removed.
pub fn rank_by_scores(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut skip = vec![false; scores.len()];
    for &i in exclude {
        if i < skip.len() {
            skip[i] = true;
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Item scores `log μ(z)` at the variational mean of the encoded input.
pub fn item_scores(gen: &Generator, enc: &Encoder, input: &SparseVector) -> Result<Vec<f64>> {
    let (psi, _) = enc.encode(input)?;
    Ok(gen.forward(&psi.mu)?.log_mu)
}

/// Ranking for one user. `input` is the encoder representation of
/// `fold_in`.
pub fn rank_items(
    gen: &Generator,
    enc: &Encoder,
    input: &SparseVector,
    fold_in: &SparseVector,
    exclude_fold_in: bool,
) -> Result<Vec<usize>> {
    let scores = item_scores(gen, enc, input)?;
    let exclude: &[usize] = if exclude_fold_in { fold_in.indices() } else { &[] };
    Ok(rank_by_scores(&scores, exclude))
}

fn hits(ranking: &[usize], targets: &SparseVector, n: usize) -> Result<Vec<bool>> {
    if targets.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(ranking
        .iter()
        .take(n)
        .map(|&i| i < targets.dim() && targets.get(i) > 0.0)
        .collect())
}

/// Hits in the top `n` over `min(n, |targets|)`.
pub fn recall_at_n(ranking: &[usize], targets: &SparseVector, n: usize) -> Result<f64> {
    let h = hits(ranking, targets, n)?;
    let denom = n.min(targets.nnz());
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(h.iter().filter(|&&b| b).count() as f64 / denom as f64)
}

/// DCG with gain `1 / ln(rank + 1)` per hit, normalized by the ideal DCG.
pub fn ndcg_at_n(ranking: &[usize], targets: &SparseVector, n: usize) -> Result<f64> {
    let h = hits(ranking, targets, n)?;
    let dcg: f64 = h
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(v, _)| 1.0 / ((v + 2) as f64).ln())
        .sum();
    let ideal: f64 = (0..n.min(targets.nnz())).map(|v| 1.0 / ((v + 2) as f64).ln()).sum();
    if ideal == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / ideal)
}

/// Mean and standard error (`sd / √n`, sample standard deviation).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub n: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub mean_recall: f64,
    pub stderr_recall: f64,
    pub mean_ndcg: f64,
    pub stderr_ndcg: f64,
}

impl RankingResult {
    pub fn from_values(n: usize, recall: Vec<f64>, ndcg: Vec<f64>) -> Self {
        let (mean_recall, stderr_recall) = mean_stderr(&recall);
        let (mean_ndcg, stderr_ndcg) = mean_stderr(&ndcg);
        Self {
            n,
            recall,
            ndcg,
            mean_recall,
            stderr_recall,
            mean_ndcg,
            stderr_ndcg,
        }
    }
}

/// Recall@N and NDCG@N for every held-out user and every requested `N`.
pub fn evaluate_ranking(
    model: &Nfa,
    users: &HeldOutUsers,
    features: Features,
    stats: &FeatureStats,
    ns: &[usize],
    exclude_fold_in: bool,
) -> Result<Vec<RankingResult>> {
    let inputs = encoder_inputs(features, stats, &users.fold_in)?;
    let rankings = (0..users.len())
        .into_par_iter()
        .map(|u| {
            rank_items(
                &model.generator,
                &model.encoder,
                &inputs[u],
                &users.fold_in[u],
                exclude_fold_in,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ns.iter()
        .map(|&n| {
            let mut recall = Vec::with_capacity(users.len());
            let mut ndcg = Vec::with_capacity(users.len());
            for (r, t) in rankings.iter().zip(&users.targets) {
                recall.push(recall_at_n(r, t, n)?);
                ndcg.push(ndcg_at_n(r, t, n)?);
            }
            Ok(RankingResult::from_values(n, recall, ndcg))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    pub count_above: usize,
}

/// Singular values of the Jacobian of `log μ` at `z = 0`.
pub fn spectrum_report(gen: &Generator, threshold: f64) -> Result<SpectrumReport> {
    let j = gen.jacobian(&vec![0.0; gen.latent_dim()], JacobianTarget::LogMu)?;
    let singular_values = singular_values(&j)?;
    let count_above = singular_values.iter().filter(|&&s| s > threshold).count();
    Ok(SpectrumReport {
        singular_values,
        threshold,
        count_above,
    })
}

/// Ranks starting at 1; tied entries share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation. A constant input gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("rank correlation needs at least two points".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rank correlation input"));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlRareRow {
    pub doc: usize,
    pub kl: f64,
    pub rare_tokens: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlRareReport {
    pub rows: Vec<KlRareRow>,
    pub rho: f64,
}

impl KlRareReport {
    pub fn from_rows(rows: Vec<KlRareRow>) -> Result<Self> {
        let kl: Vec<f64> = rows.iter().map(|r| r.kl).collect();
        let rare: Vec<f64> = rows.iter().map(|r| r.rare_tokens).collect();
        let rho = spearman(&kl, &rare)?;
        Ok(Self { rows, rho })
    }
}

pub const DEFAULT_RARE_FRAC: f64 = 0.05;

/// `KL(ψ(x) ‖ ψ*)` against the number of rare tokens for every nonempty
/// document. `stats` are the training-set statistics that define rarity.
pub fn kl_rare_report(
    model: &Nfa,
    docs: &[SparseVector],
    inputs: &[SparseVector],
    stats: &FeatureStats,
    local: &LocalOptConfig,
    rare_frac: f64,
    seed: u64,
) -> Result<KlRareReport> {
    let fits = fit_documents(model, docs, inputs, local, seed)?;
    kl_rare_from_fits(&fits, docs, stats, rare_frac)
}

/// Same as [`kl_rare_report`] for documents that have already been fitted.
pub fn kl_rare_from_fits(
    fits: &[DocFit],
    docs: &[SparseVector],
    stats: &FeatureStats,
    rare_frac: f64,
) -> Result<KlRareReport> {
    if fits.len() != docs.len() {
        return Err(Error::shape(docs.len(), fits.len()));
    }
    let mut rows = Vec::new();
    for (d, (fit, x)) in fits.iter().zip(docs).enumerate() {
        if x.is_empty() {
            continue;
        }
        rows.push(KlRareRow {
            doc: d,
            kl: kl_between(&fit.psi_x, &fit.psi_star)?,
            rare_tokens: rare_word_count(stats, x, rare_frac),
        });
    }
    KlRareReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Matrix;
    use crate::mlp::{Activation, Layer, MlpSpec};
    use crate::train::TrainConfig;
    use proptest::prelude::*;
    use crate::math::Rng;

    fn targets(dim: usize, items: &[usize]) -> SparseVector {
        SparseVector::from_pairs(dim, items.iter().map(|&i| (i, 1.0))).unwrap()
    }

    fn brute_recall(ranking: &[usize], t: &[usize], n: usize) -> f64 {
        let mut h = 0usize;
        for v in 0..n.min(ranking.len()) {
            if t.contains(&ranking[v]) {
                h += 1;
            }
        }
        h as f64 / n.min(t.len()) as f64
    }

    fn brute_ndcg(ranking: &[usize], t: &[usize], n: usize) -> f64 {
        let mut dcg = 0.0;
        for v in 1..=n.min(ranking.len()) {
            let rel = if t.contains(&ranking[v - 1]) { 1.0 } else { 0.0 };
            dcg += (2f64.powf(rel) - 1.0) / ((v + 1) as f64).ln();
        }
        let mut idcg = 0.0;
        for v in 1..=n.min(t.len()) {
            idcg += 1.0 / ((v + 1) as f64).ln();
        }
        dcg / idcg
    }

    #[test]
    fn perplexity_examples() {
        let v = 37.0f64;
        let docs: Vec<SparseVector> = [3.0, 8.0, 1.0]
            .iter()
            .map(|&n| SparseVector::new(37, vec![0], vec![n]).unwrap())
            .collect();
        let uniform: Vec<f64> = docs.iter().map(|d| d.total() * (1.0 / v).ln()).collect();
        let p = perplexity_bound(&uniform, &docs).unwrap();
        assert!((p - v).abs() / v < 1e-9);

        let one = vec![SparseVector::new(5, vec![1], vec![2.0]).unwrap()];
        let p = perplexity_bound(&[-2.0 * 10f64.ln()], &one).unwrap();
        assert!((p - 10.0).abs() < 1e-12);

        // −(−6/3 − 4/8 − 1/1)/3 = 3.5/3
        let p = perplexity_bound(&[-6.0, -4.0, -1.0], &docs).unwrap();
        assert!((p - (3.5f64 / 3.0).exp()).abs() < 1e-12);

        let empty = vec![SparseVector::empty(5)];
        assert!(perplexity_bound(&[0.0], &empty).is_err());
        let mixed = vec![SparseVector::empty(5), one[0].clone()];
        let p = perplexity_bound(&[123.0, -2.0 * 10f64.ln()], &mixed).unwrap();
        assert!((p - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_by_scores(&[0.5; 6], &[]), vec![0, 1, 2, 3, 4, 5]);
        let mut s = vec![0.1; 10];
        s[7] = 3.0;
        assert_eq!(rank_by_scores(&s, &[])[0], 7);
        assert_eq!(rank_by_scores(&s, &[7, 2]), vec![0, 1, 3, 4, 5, 6, 8, 9]);

        let spec = MlpSpec::new(vec![2, 6], Activation::Tanh).unwrap();
        let gen = Generator::zeros(spec);
        let enc = Encoder::zeros(crate::encoder::EncoderSpec {
            input_dim: 6,
            hidden: vec![3],
            latent_dim: 2,
            activation: Activation::Tanh,
        })
        .unwrap();
        let x = targets(6, &[1, 4]);
        assert_eq!(rank_items(&gen, &enc, &x, &x, true).unwrap(), vec![0, 2, 3, 5]);
        assert_eq!(rank_items(&gen, &enc, &x, &x, false).unwrap(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn ranking_matches_argsort_oracle() {
        let cfg = TrainConfig {
            latent_dim: 3,
            generator_hidden: vec![5],
            encoder_hidden: vec![4],
            ..TrainConfig::default()
        };
        let model = Nfa::new(&cfg, 15).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let x = SparseVector::from_pairs(15, (0..4).map(|_| ((rng.uniform() * 15.0) as usize, 1.0)))
                .unwrap();
            let got = rank_items(&model.generator, &model.encoder, &x, &x, true).unwrap();
            let (psi, _) = model.encoder.encode(&x).unwrap();
            let log_mu = model.generator.forward(&psi.mu).unwrap().log_mu;
            let mut oracle: Vec<(f64, usize)> = (0..15).filter(|i| x.get(*i) == 0.0).map(|i| (log_mu[i], i)).collect();
            // selection sort: highest score first, lower id on ties
            let mut want = Vec::new();
            while !oracle.is_empty() {
                let mut best = 0;
                for j in 1..oracle.len() {
                    let (a, b) = (oracle[j], oracle[best]);
                    if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
                        best = j;
                    }
                }
                want.push(oracle.remove(best).1);
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn metric_examples() {
        let t = targets(10, &[0, 1, 2, 3]);
        let ranking = [0, 9, 2, 8, 1, 3];
        assert!((recall_at_n(&ranking, &t, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_n(&[5, 6, 7], &t, 3).unwrap(), 0.0);
        let small = targets(10, &[4, 5]);
        assert_eq!(recall_at_n(&[5, 4, 0, 1], &small, 3).unwrap(), 1.0);
        assert_eq!(ndcg_at_n(&[5, 4, 0, 1], &small, 3).unwrap(), 1.0);
        assert_eq!(ndcg_at_n(&[0, 1, 2], &small, 3).unwrap(), 0.0);
        let one = targets(10, &[6]);
        let v = ndcg_at_n(&[1, 6], &one, 2).unwrap();
        assert!((v - 2f64.ln() / 3f64.ln()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert!(recall_at_n(&[1], &SparseVector::empty(10), 1).is_err());
        assert!(ndcg_at_n(&[1], &SparseVector::empty(10), 1).is_err());
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = Rng::new(21);
        for _ in 0..1000 {
            let dim = 2 + (rng.uniform() * 30.0) as usize;
            let mut ranking: Vec<usize> = (0..dim).collect();
            use rand::seq::SliceRandom;
            ranking.shuffle(&mut rng);
            let nt = 1 + (rng.uniform() * dim as f64) as usize;
            let nt = nt.min(dim);
            let mut items: Vec<usize> = (0..dim).collect();
            items.shuffle(&mut rng);
            let t: Vec<usize> = items[..nt].to_vec();
            let n = 1 + (rng.uniform() * (dim + 5) as f64) as usize;
            let tv = targets(dim, &t);
            assert_eq!(recall_at_n(&ranking, &tv, n).unwrap(), brute_recall(&ranking, &t, n));
            let a = ndcg_at_n(&ranking, &tv, n).unwrap();
            let b = brute_ndcg(&ranking, &t, n);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn hit_swapped_down_never_helps(dim in 3usize..20, seed in 0u64..1000, n in 1usize..20) {
            use rand::seq::SliceRandom;
            let mut rng = Rng::new(seed);
            let mut ranking: Vec<usize> = (0..dim).collect();
            ranking.shuffle(&mut rng);
            let nt = 1 + seed as usize % (dim - 1);
            let t: Vec<usize> = ranking.clone().into_iter().filter(|_| rng.uniform() < 0.5).take(nt).collect();
            prop_assume!(!t.is_empty());
            let tv = targets(dim, &t);
            // oracle ranking: targets first
            let mut oracle: Vec<usize> = t.clone();
            oracle.extend(ranking.iter().filter(|i| !t.contains(i)));
            prop_assert_eq!(recall_at_n(&oracle, &tv, n).unwrap(), 1.0);
            prop_assert!((ndcg_at_n(&oracle, &tv, n).unwrap() - 1.0).abs() < 1e-12);
            for p in 0..dim - 1 {
                let (a, b) = (ranking[p], ranking[p + 1]);
                if t.contains(&a) && !t.contains(&b) {
                    let mut swapped = ranking.clone();
                    swapped.swap(p, p + 1);
                    prop_assert!(recall_at_n(&swapped, &tv, n).unwrap() <= recall_at_n(&ranking, &tv, n).unwrap());
                    prop_assert!(ndcg_at_n(&swapped, &tv, n).unwrap() <= ndcg_at_n(&ranking, &tv, n).unwrap() + 1e-15);
                }
            }
        }

        #[test]
        fn spearman_range_and_monotone_invariance(xs in prop::collection::vec(-5.0f64..5.0, 3..30), seed in 0u64..100) {
            let mut rng = Rng::new(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.uniform()).collect();
            let r = spearman(&xs, &ys).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            let tx: Vec<f64> = xs.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y.powi(3)).collect();
            prop_assert_eq!(spearman(&tx, &ty).unwrap(), r);
        }
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);

        // ties: brute-force ranks by counting
        let x = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 5.0];
        let y = [2.0, 1.0, 4.0, 4.0, 3.0, 6.0, 7.0];
        let rank = |v: &[f64], i: usize| {
            let less = v.iter().filter(|&&w| w < v[i]).count() as f64;
            let eq = v.iter().filter(|&&w| w == v[i]).count() as f64;
            less + (eq + 1.0) / 2.0
        };
        let rx: Vec<f64> = (0..7).map(|i| rank(&x, i)).collect();
        let ry: Vec<f64> = (0..7).map(|i| rank(&y, i)).collect();
        let m = 4.0;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
        let den = (rx.iter().map(|a| (a - m).powi(2)).sum::<f64>() * ry.iter().map(|b| (b - m).powi(2)).sum::<f64>()).sqrt();
        assert!((spearman(&x, &y).unwrap() - num / den).abs() < 1e-14);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn spectrum_of_zero_and_linear_models() {
        let gen = Generator::zeros(MlpSpec::new(vec![3, 4, 9], Activation::Tanh).unwrap());
        let r = spectrum_report(&gen, 1.0).unwrap();
        assert_eq!(r.singular_values, vec![0.0; 3]);
        assert_eq!(r.count_above, 0);

        let mut rng = Rng::new(2);
        let (k, v) = (3, 7);
        let w = Matrix::from_vec(v, k, (0..v * k).map(|_| 2.0 * rng.standard_normal()).collect()).unwrap();
        let b: Vec<f64> = (0..v).map(|_| rng.standard_normal()).collect();
        let spec = MlpSpec::new(vec![k, v], Activation::Tanh).unwrap();
        let gen = Generator::from_layers(spec, vec![Layer { weight: w.clone(), bias: b.clone() }]).unwrap();
        let mu = crate::math::softmax_stable(&b).unwrap();
        let mut j = Matrix::zeros(v, k);
        for r in 0..v {
            for c in 0..k {
                let centred: f64 = (0..v).map(|s| mu[s] * w.get(s, c)).sum();
                j.set(r, c, w.get(r, c) - centred);
            }
        }
        let want = singular_values(&j).unwrap();
        let got = spectrum_report(&gen, 1.0).unwrap();
        for (a, b) in got.singular_values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(got.singular_values.windows(2).all(|p| p[0] >= p[1]));
        assert_eq!(got.count_above, want.iter().filter(|&&s| s > 1.0).count());
    }

    #[test]
    fn refined_bound_never_below_encoder_bound() {
        let cfg = TrainConfig {
            latent_dim: 3,
            generator_hidden: vec![6],
            encoder_hidden: vec![5],
            inner_steps: 10,
            ..TrainConfig::default()
        };
        let model = Nfa::new(&cfg, 12).unwrap();
        let mut rng = Rng::new(1);
        let docs: Vec<SparseVector> = (0..20)
            .map(|_| model.generator.sample_document(&mut rng, 15).unwrap())
            .chain(std::iter::once(SparseVector::empty(12)))
            .collect();
        let corpus = crate::sparse::Corpus::new(docs.clone(), 12).unwrap();
        let inputs = encoder_inputs(Features::Tfidf, &corpus.stats(), &docs).unwrap();
        let fits = fit_documents(&model, &docs, &inputs, &cfg.local_opt(), 3).unwrap();
        for f in &fits {
            assert!(f.elbo_star >= f.elbo_x);
        }
        let again = fit_documents(&model, &docs, &inputs, &cfg.local_opt(), 3).unwrap();
        assert_eq!(fits, again);
        let rep = perplexity_report(&fits, &docs).unwrap();
        assert!(rep.optimized <= rep.amortized);

        let kr = kl_rare_report(&model, &docs, &inputs, &corpus.stats(), &cfg.local_opt(), 0.05, 3).unwrap();
        assert_eq!(kr.rows.len(), 20);
        assert!(kr.rows.iter().all(|r| r.kl >= 0.0));
    }

    #[test]
    fn mean_stderr_basic() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]), (7.0, 0.0));
    }
}
