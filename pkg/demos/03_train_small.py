"""A small end-to-end run on generated data.

Generates 100 benign and 100 malicious dumps, trains the embedder and the
fused classifier with default settings, then scores the held-out split and
the bundled malicious fixture. Also compares the operand-aware tokens
against opcode names only. Takes under a minute on one core.

    python demos/03_train_small.py
"""

import time

from opshield import Mode, RunConfig, extract_sequence, gen_corpus, predict
from opshield.evaluation import canonical_malicious, extract_corpus, fit_pipeline, opcode_overlap

cfg = RunConfig()
corpus = gen_corpus(seed=42, n_benign=100, n_malicious=100)
print(f"opcode-histogram overlap between classes: {opcode_overlap(corpus):.3f}")

for mode in (Mode.ODT, Mode.OST):
    t0 = time.perf_counter()
    result = fit_pipeline(extract_corpus(corpus, cfg, mode), cfg)
    m = result.test_metrics
    print(f"\n{mode.value}: test accuracy {m.accuracy:.3f}, F1 {m.f1:.3f} ({time.perf_counter() - t0:.0f}s)")
    for row in result.history.epochs:
        print(f"  epoch {row['epoch']}: loss {row['train_loss']:.4f}  val acc {row['val_acc']:.3f}")
    if mode is Mode.ODT:
        model = result.model
        seq = extract_sequence(canonical_malicious(), cfg.rules, cfg.decode, mode)
        prob, label = predict(model, seq.tokens)
        print(f"  bundled fixture: p(webshell) = {prob:.4f} -> {label.name.lower()}")
