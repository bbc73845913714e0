//! Trains `vae` and `hybrid` models on a synthetic corpus and compares
//! held-out perplexity bounds and Jacobian spectra.
//!
//! ```text
//! cargo run --release --example synthetic_trend -- [epochs] [M] [vocab]
//! ```

use std::time::Instant;

use nfa_core::eval::{fit_documents, perplexity_report, spectrum_report};
use nfa_core::synthetic::{synthetic_split, SyntheticConfig};
use nfa_core::train::{encoder_inputs, train_epoch, LocalOptConfig, Mode, Nfa, TrainConfig, TrainState};

fn main() -> nfa_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let epochs = arg(1, 10);
    let m = arg(2, 50);
    let vocab = arg(3, 2000);

    let syn = SyntheticConfig {
        vocab,
        ..SyntheticConfig::default()
    };
    let (_, train, test) = synthetic_split(&syn, 2000, 500)?;
    println!("train tokens {} test tokens {}", train.total_tokens(), test.total_tokens());

    for mode in [Mode::Vae, Mode::Hybrid] {
        let cfg = TrainConfig {
            mode,
            inner_steps: if mode == Mode::Hybrid { m } else { 0 },
            batch_size: 50,
            epochs,
            seed: 1,
            latent_dim: 10,
            generator_hidden: vec![64],
            encoder_hidden: vec![64, 64],
            lr_theta: 3e-3,
            lr_phi: 3e-3,
            ..TrainConfig::default()
        };
        let stats = train.stats();
        let inputs = encoder_inputs(cfg.features, &stats, train.docs())?;
        let mut model = Nfa::new(&cfg, vocab)?;
        let mut state = TrainState::new(&model, &cfg);
        let t0 = Instant::now();
        for _ in 0..epochs {
            let e = train_epoch(&mut model, &train, &inputs, &cfg, &mut state)?;
            println!("{mode} epoch {} elbo {:.3} kl {:.3} ({:.1}s)", e.epoch, e.mean_elbo, e.mean_kl, t0.elapsed().as_secs_f64());
        }
        let local = LocalOptConfig {
            steps: 100,
            ..cfg.local_opt()
        };
        let test_inputs = encoder_inputs(cfg.features, &stats, test.docs())?;
        let fits = fit_documents(&model, test.docs(), &test_inputs, &local, 7)?;
        let p = perplexity_report(&fits, test.docs())?;
        let s = spectrum_report(&model.generator, 1.0)?;
        println!(
            "{mode}: perplexity psi(x) {:.2} psi* {:.2}; singular values > 1: {} {:?}",
            p.amortized,
            p.optimized,
            s.count_above,
            s.singular_values.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}
