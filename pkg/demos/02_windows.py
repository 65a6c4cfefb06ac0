"""Sliding-window attention in numbers.

Shows how a long sequence is cut into overlapping windows, and how the
largest attention score matrix stays at W x W no matter the length.

    python demos/02_windows.py
"""

import numpy as np

from opshield import EncoderConfig, encode, pool_global, window_layout
from opshield.swa import init_params

for L, W, Sr in [(10, 4, 2), (11, 4, 3), (3, 8, 4)]:
    lay = window_layout(L, W, Sr)
    print(f"L={L:<3} W={W} Sr={Sr}: windows {list(lay.spans)}")

cfg = EncoderConfig(vocab_size=50, d_model=32, n_heads=4, n_layers=2, ff_dim=64, W=128, Sr=64, dropout=0.0)
params = init_params(cfg, np.random.default_rng(0))
print(f"\n{'tokens':>7} {'windows':>8} {'max score rows':>15} {'full attention rows':>20}")
for L in (100, 500, 2000):
    stats = {}
    hidden = encode(params, cfg, np.arange(L) % cfg.vocab_size, stats=stats)
    print(f"{L:>7} {len(hidden):>8} {stats['max_score_rows']:>15} {L:>20}")

doc = pool_global(hidden)
print(f"\npooled document vector: shape {doc.shape}, norm {np.linalg.norm(doc):.3f}")
