"""How off-diagonal kernel variance shrinks as more features are packed into a circuit.

python demos/vanishing_similarity.py
"""
import numpy as np

from qfmap.data import TabularDataset
from qfmap.pipeline import diagnose_kv

rng = np.random.default_rng(0)
data = TabularDataset(rng.uniform(size=(100, 40)), rng.integers(0, 2, 100), 2)

# %% N=8 qubits, growing feature count p, a few depths
rows = diagnose_kv(data, 8, l0s=[1, 3, 5], ps=[8, 16, 24, 40], trials=5, seed=0)
print(f"{'L0':>3} {'p':>3} {'KV mean':>11} {'KV std':>11}")
for r in rows:
    print(f"{r['l0']:>3} {r['p']:>3} {r['kv_mean']:>11.3e} {r['kv_std']:>11.3e}")

# %% deeper circuits with more features concentrate the kernel around its mean
by_p = {p: np.mean([r["kv_mean"] for r in rows if r["p"] == p]) for p in (8, 16, 24, 40)}
print("mean KV by p:", {p: f"{v:.2e}" for p, v in by_p.items()})
