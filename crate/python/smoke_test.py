"""Smoke test for the Python bindings.

Build and install first:

    pip install maturin
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import nfa


def main():
    train, test = nfa.Corpus.synthetic(200, 50, vocab=120, latent_dim=4, mean_length=20.0, seed=3)
    assert len(train) == 200 and train.vocab_size == 120

    cfg = nfa.Config(
        mode="hybrid",
        M=5,
        batch_size=20,
        latent_dim=4,
        generator_hidden=[16],
        encoder_hidden=[16, 16],
        seed=1,
    )
    model = nfa.Model(cfg, train.vocab_size)
    for _ in range(3):
        m = model.train_epoch(train)
        print("epoch", m["epoch"], "elbo", round(m["mean_elbo"], 4), "kl", round(m["mean_kl"], 4))
        assert math.isfinite(m["mean_elbo"])
    assert model.epoch == 3

    amortized, optimized = model.perplexity(test, steps=20)
    print("perplexity", round(amortized, 3), round(optimized, 3))
    assert optimized <= amortized

    spectrum = model.spectrum()
    assert len(spectrum) == 4 and spectrum == sorted(spectrum, reverse=True)

    mu, logvar = model.encode(train.doc(0))
    assert len(mu) == 4 and len(logvar) == 4
    top = model.recommend(train.doc(0), n=10)
    assert len(top) == 10 and not set(top) & {i for i, _ in train.doc(0)}

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = nfa.Model.load(path)
        assert again.log_mu([0.0] * 4) == model.log_mu([0.0] * 4)
        assert again.epoch == 3

    assert nfa.kl_to_prior([1.0], [0.0]) == 0.5
    assert abs(nfa.kl_between(([0.0], [0.0]), ([1.0], [math.log(2)])) - 0.5 * math.log(2)) < 1e-12
    assert nfa.recall_at_n([3, 1, 2, 0], [1, 0], 2) == 0.5
    assert nfa.anneal_weight(5, 10) == 0.5
    print("smoke test passed")


if __name__ == "__main__":
    main()
