"""Smoke test for the pyilm extension: build a toy corpus, train iLM and
eLM briefly and compare their perplexities."""

import sys

import pyilm


def main() -> int:
    vocab = pyilm.Vocabulary(16, n_markup=4, seed=0)
    clean = pyilm.gen_clean_corpus(vocab, 64, 8, seed=1)
    noisy = pyilm.wrap_with_markup(pyilm.gen_clean_corpus(vocab, 64, 8, seed=2), vocab, 0.3, seed=3)
    test = pyilm.gen_clean_corpus(vocab, 32, 8, seed=4)
    shape = dict(embed_dim=16, n_layers=1, n_attn_heads=2, ffn_dim=32, max_seq_len=24, seed=5)

    ilm = pyilm.Model(len(vocab), n_heads=2, **shape)
    elm = pyilm.Model(len(vocab), n_heads=1, **shape)
    ilm, ilm_losses = pyilm.train(ilm, [clean, noisy], vocab, 200, learning_rate=3e-3, seed=6)
    elm, elm_losses = pyilm.train(elm, [clean, noisy], vocab, 200, learning_rate=3e-3, seed=6, variant="elm")
    assert ilm_losses[-1] < ilm_losses[0], "iLM loss did not decrease"
    assert elm_losses[-1] < elm_losses[0], "eLM loss did not decrease"

    p_ilm = pyilm.perplexity(ilm, test, vocab, seed=7)
    p_elm = pyilm.perplexity(elm, test, vocab, seed=7)
    print(f"pyilm {pyilm.__version__}: {vocab!r}")
    print(f"clean-test perplexity  iLM {p_ilm:.3f}  eLM {p_elm:.3f}  (uniform {len(vocab)})")
    assert p_ilm < len(vocab) and p_elm < len(vocab)

    lo, hi = pyilm.bootstrap_ci([p_ilm, p_elm, (p_ilm + p_elm) / 2], n_resamples=500)
    print(f"bootstrap interval over the three values: [{lo:.3f}, {hi:.3f}]")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
