"""Kernel alignment of one layout under increasing depolarizing noise.

python demos/noise_study.py
"""
import numpy as np

from qfmap.circuit import sample_layout
from qfmap.data import TabularDataset
from qfmap.kernel import gram, kernel_variance, kta
from qfmap.qsim import NoiseSpec

rng = np.random.default_rng(3)
X = rng.uniform(0, 2 * np.pi, (30, 3))
y = (np.sin(X[:, 0]) * np.cos(X[:, 1]) > 0).astype(int)
data = TabularDataset(X, y, 2)
layout = sample_layout(3, 2, 3, rng=rng)

# %% sweep the single-qubit error rate, two-qubit rate fixed at 5x
for p1 in [0.0, 1e-3, 1e-2, 5e-2, 0.1]:
    noise = NoiseSpec(p1, min(1.0, 5 * p1)) if p1 else None
    Q = gram(layout, None, data.features, noise=noise)
    print(f"p1={p1:<6} KTA={kta(Q, data.labels, 2):.4f} KV={kernel_variance(Q):.3e} "
          f"mean off-diag={Q[~np.eye(len(Q), dtype=bool)].mean():.4f}")

# %% full depolarization sends every entry to 2^-N
Q = gram(layout, None, data.features, noise=NoiseSpec(1.0, 1.0))
print("p=1 entries:", np.unique(np.round(Q, 12)))
