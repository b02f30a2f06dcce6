"""Walk through a small feature-map search on five classes of handwritten digits.

Needs scikit-learn for the digits data (``pip install -e .[test]``).
Run from the repository root:  python demos/toy_search.py
"""
import json
import tempfile
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from qfmap.circuit import enumerate_block_space
from qfmap.data import TabularDataset, apply_selector, mrmr_select, stratified_split
from qfmap.kernel import pearson
from qfmap.pipeline import SearchConfig, evaluate_kernel, heak, run_full_search

# %% data: first 100 digits with label < 5, split 50/50, 4 mRMR features
d = load_digits()
keep = d.target < 5
raw = TabularDataset(d.data[keep][:100].astype(float), d.target[keep][:100], 5)
train, test = stratified_split(raw, 0.5, seed=0)
selector = mrmr_select(train, 4)
train, test = apply_selector(selector, train), apply_selector(selector, test)
print("selected columns:", selector.indices.tolist())

# %% the whole block space at N=4, L0=1 has 72 layouts; is KTA a usable proxy?
scores = [evaluate_kernel(layout, None, train, test) for layout in enumerate_block_space(4, 1, 4)]
kta = np.array([s.kta for s in scores])
acc = np.array([s.train_accuracy for s in scores])
print(f"KTA range {kta.min():.4f}..{kta.max():.4f}")
print(f"PCC(KTA, train accuracy) = {pearson(kta, acc):.3f}")

# %% reference point: the plain hardware-efficient kernel
ref = evaluate_kernel(heak(4, 4), None, train, test)
print(f"HEAK  kta={ref.kta:.4f} train={ref.train_accuracy:.2f} test={ref.test_accuracy:.2f}")

# %% the full search at L0=2 (promotions only matter past the first layer).
# KTA gradients here are ~1e-2, so a larger step than the 0.2 default shows the effect
config = SearchConfig(n_qubits=4, l0=[2], p=4, pool_size=36, scoring_size=72, k=5,
                      num_theta_trials=3, finetune_epochs=15, finetune_lr=5.0, seed=0)
with tempfile.TemporaryDirectory() as tmp:
    result = run_full_search(config, Path(tmp) / "run", train=train, test=test)
    for row in result.report:
        print(row)
    for f in sorted((Path(tmp) / "run" / "finetune").glob("*.json")):
        ft = json.loads(f.read_text())
        print(f"  {ft['candidate_hash']}  unpromoted {ft['base_kta']:.4f} -> best {ft['best_kta']:.4f}")
    print("chosen:", result.chosen["layout_hash"], "test accuracy", result.chosen["test_accuracy"])
