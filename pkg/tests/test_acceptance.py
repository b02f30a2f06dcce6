"""Acceptance checks AC-01 .. AC-12.

Each check prints exactly one ``AC-nn PASS|FAIL`` line (also when pytest
captures output) and then asserts.  Run standalone with
``python tests/test_acceptance.py`` for the bare report.
"""
import csv
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from conftest import toy_splits  # noqa: E402

from qfmap.circuit import enumerate_block_space, promote_gates, sample_layout  # noqa: E402
from qfmap.data import TabularDataset  # noqa: E402
from qfmap.kernel import accuracy, fidelity_gram, fit, overlap_gram, pearson, predict, rbf_gram  # noqa: E402
from qfmap.pipeline import (  # noqa: E402
    SearchConfig,
    diagnose_kv,
    evaluate_kernel,
    kta_gradient,
    kta_of,
    run_full_search,
    train_tek,
)
from qfmap.predictor import PARAM_NAMES, init_model, loss_and_grad  # noqa: E402
from qfmap.qsim import Gate, NoiseSpec, apply_gate, run_layout, run_layout_batch, run_layout_noisy_batch, zero_state  # noqa: E402


def report(n: int, title: str, ok: bool, detail: str, capsys=None) -> None:
    line = f"AC-{n:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)


# -- criteria ------------------------------------------------------------------------

def ac01_simulator_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 4))
        layout = sample_layout(n, int(rng.integers(1, 4)), int(rng.integers(1, 7)), rng=rng)
        if i % 3 == 0 and layout.total_rotations // layout.l0 > 1:
            layout = promote_gates(layout, 1, rng)
        x = rng.uniform(0, 2 * np.pi, layout.p)
        theta = rng.uniform(0, 2 * np.pi, layout.num_params)
        worst = max(worst, np.abs(run_layout(layout, x, theta) - oracles.dense_state(layout, x, theta)).max())
    elapsed = time.perf_counter() - start
    return worst < 1e-10 and elapsed < 10, f"max |amp diff| {worst:.2e} (< 1e-10), {elapsed:.2f}s (< 10s)"


def ac02_single_qubit_law():
    xs = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    states = np.stack([apply_gate(zero_state(1), Gate("RX", (0,), x)) for x in xs])
    err = np.abs(fidelity_gram(states) - np.cos((xs[:, None] - xs[None, :]) / 2) ** 2).max()
    return err < 1e-12, f"max error vs cos^2((xi-xj)/2) {err:.2e} (< 1e-12)"


def ac03_space_count():
    count = len(enumerate_block_space(4, 1, 4))
    return count == 72, f"enumerate_block_space(4,1,4) -> {count} (expected 72)"


def ac04_parameter_identity():
    got = {L: init_model(L, seed=0).num_parameters for L in (1, 4, 8, 16, 40)}
    ok = all(v == 1280 * L + 257 for L, v in got.items())
    return ok, ", ".join(f"L={L}: {v}" for L, v in got.items())


def _mlp_relative_error(rng):
    model = init_model(1, seed=int(rng.integers(2**31)), activation=str(rng.choice(["relu", "tanh"])))
    X = rng.integers(0, 2, (int(rng.integers(2, 9)), 10)).astype(float)
    y = rng.uniform(-5, 5, X.shape[0])
    # errors are relative to the largest gradient entry over all tensors; a tensor
    # whose true gradient is exactly zero (opposite linear-branch residuals) would
    # otherwise divide FD roundoff by itself
    _, grads = loss_and_grad(model, X, y)
    h, err, scale = 1e-6, 0.0, 1e-12
    for name in PARAM_NAMES:
        p = model.params[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = loss_and_grad(model, X, y)
            p[idx] = old - h
            down, _ = loss_and_grad(model, X, y)
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        err = max(err, np.abs(grads[name] - fd).max())
        scale = max(scale, np.abs(grads[name]).max(), np.abs(fd).max())
    return err / scale


def _shift_abs_error(rng):
    n = int(rng.integers(8, 16))
    p = int(rng.integers(1, 4))
    data = TabularDataset(rng.uniform(0, 2 * np.pi, (n, p)), rng.integers(0, 2, n), 2)
    layout = sample_layout(2, int(rng.integers(2, 4)), p, rng=rng)
    layout = promote_gates(layout, int(rng.integers(1, layout.total_rotations // layout.l0)), rng)
    theta = rng.uniform(0, 2 * np.pi, layout.num_params)
    g = kta_gradient(layout, theta, data)
    fd = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        fd[j] = (kta_of(layout, theta + e, data) - kta_of(layout, theta - e, data)) / 2e-6
    return np.abs(g - fd).max()


def ac05_gradients():
    rng = np.random.default_rng(105)
    start = time.perf_counter()
    mlp = max(_mlp_relative_error(rng) for _ in range(20))
    shift = max(_shift_abs_error(rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    ok = mlp < 1e-4 and shift < 1e-6 and elapsed < 120
    return ok, f"MLP rel err {mlp:.2e} (< 1e-4), shift abs err {shift:.2e} (< 1e-6), {elapsed:.1f}s (< 120s)"


def ac06_kta_surrogate():
    start = time.perf_counter()
    train, test = toy_splits(p=4, seed=0)
    scores = [evaluate_kernel(l, None, train, test) for l in enumerate_block_space(4, 1, 4)]
    r = pearson([s.kta for s in scores], [s.train_accuracy for s in scores])
    elapsed = time.perf_counter() - start
    return r > 0.3 and elapsed < 900, f"PCC(KTA, train acc) over 72 kernels = {r:.3f} (> 0.3), {elapsed:.1f}s"


def ac07_vanishing_similarity():
    start = time.perf_counter()
    rng = np.random.default_rng(107)
    data = TabularDataset(rng.uniform(size=(100, 40)), rng.integers(0, 2, 100), 2)
    rows = diagnose_kv(data, 8, [5], [8, 40], trials=5, seed=107)
    kv = {r["p"]: r["kv_mean"] for r in rows}
    elapsed = time.perf_counter() - start
    ok = kv[8] > kv[40] and elapsed < 1200
    return ok, f"mean KV p=8 {kv[8]:.3e} > p=40 {kv[40]:.3e}, {elapsed:.1f}s"


TOY_SEARCH = dict(
    n_qubits=4, l0=[1], p=4, pool_size=36, scoring="exhaustive", k=5, num_theta_trials=5, seed=2024,
)


def toy_search(root: Path):
    train, test = toy_splits(p=4, seed=0)
    start = time.perf_counter()
    result = run_full_search(SearchConfig(**TOY_SEARCH), root, train=train, test=test)
    return result, time.perf_counter() - start


def ac08_stage_improvement(result, elapsed):
    best = [float(r["best_kta_train"]) for r in result.report]
    ok = [r["stage"] for r in result.report] == ["training_pool", "candidate", "finetuned"]
    ok = ok and best[0] <= best[1] <= best[2] and elapsed < 1800
    return ok, "best train KTA " + " <= ".join(f"{b:.4f}" for b in best) + f", {elapsed:.1f}s"


def ac09_noise_limits():
    worst_full, worst_zero = 0.0, 0.0
    rng = np.random.default_rng(109)
    for n in (2, 3):
        layout = sample_layout(n, 2, n, rng=rng)
        X = rng.uniform(0, 2 * np.pi, (8, n))
        full = overlap_gram(run_layout_noisy_batch(layout, X, None, NoiseSpec(1.0, 1.0)))
        worst_full = max(worst_full, np.abs(full - 2.0**-n).max())
        zero = overlap_gram(run_layout_noisy_batch(layout, X, None, NoiseSpec(0.0, 0.0)))
        worst_zero = max(worst_zero, np.abs(zero - fidelity_gram(run_layout_batch(layout, X))).max())
    ok = worst_full < 1e-9 and worst_zero < 1e-9
    return ok, f"p=1 max |Q - 2^-N| {worst_full:.1e}, p=0 max |noisy - pure| {worst_zero:.1e} (< 1e-9)"


def ac10_baselines():
    rng = np.random.default_rng(110)
    X, Y = rng.normal(size=(20, 5)), rng.normal(size=(9, 5))
    rbf_err = np.abs(rbf_gram(X, Y, 0.3) - np.exp(-0.3 * ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1))).max()
    data = TabularDataset(rng.uniform(0, 2 * np.pi, (16, 3)), rng.integers(0, 2, 16), 2)
    layout, gamma, _ = train_tek(data, 3, l0=2, epochs=3, lr=0.0, seed=9)
    unchanged = np.array_equal(gamma, np.random.default_rng(9).uniform(0, 2 * np.pi, layout.num_params))
    layout, gamma, trace = train_tek(data, 3, l0=2, epochs=15, lr=0.2, seed=10)
    final = kta_of(layout, gamma, data)
    monotone = final >= trace[0] - 1e-9
    ok = rbf_err < 1e-12 and unchanged and monotone
    return ok, (
        f"RBF err {rbf_err:.1e} (< 1e-12), lr=0 gamma unchanged={unchanged}, "
        f"TEK best KTA {final:.4f} >= initial {trace[0]:.4f}"
    )


def ac11_determinism(root_a: Path, root_b: Path):
    same_report = (root_a / "report.csv").read_bytes() == (root_b / "report.csv").read_bytes()
    ha = json.loads((root_a / "chosen.json").read_text())["layout_hash"]
    hb = json.loads((root_b / "chosen.json").read_text())["layout_hash"]
    return same_report and ha == hb, f"report.csv identical={same_report}, chosen {ha} vs {hb}"


def ac12_kernel_machine(roots):
    residuals = []
    for root in roots:
        with open(root / "records.csv", newline="") as fh:
            residuals += [float(r["fit_residual"]) for r in csv.DictReader(fh)]
    y = np.array([0, 1, 2, 3, 4, 0, 1, 2])
    machine = fit(np.eye(8), y, 5, lam=1e-9)
    acc = accuracy(predict(machine, np.eye(8)), y)
    worst = max(residuals)
    ok = worst < 1e-8 and acc == 1.0
    return ok, f"max fit residual {worst:.1e} over {len(residuals)} fits (< 1e-8), Q=I train acc {acc:.0%}"


# -- pytest wrappers -------------------------------------------------------------------

@pytest.fixture(scope="module")
def searches(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    first, elapsed = toy_search(base / "a")
    toy_search(base / "b")
    return first, elapsed, base / "a", base / "b"


def _check(n, title, outcome, capsys):
    ok, detail = outcome
    report(n, title, ok, detail, capsys)
    assert ok, detail


def test_ac01_simulator_oracle(capsys):
    _check(1, "simulator oracle equivalence", ac01_simulator_oracle(), capsys)


def test_ac02_single_qubit_fidelity_law(capsys):
    _check(2, "single-qubit fidelity law", ac02_single_qubit_law(), capsys)


def test_ac03_search_space_count(capsys):
    _check(3, "search-space count", ac03_space_count(), capsys)


def test_ac04_predictor_parameter_identity(capsys):
    _check(4, "predictor parameter identity", ac04_parameter_identity(), capsys)


def test_ac05_gradient_checks(capsys):
    _check(5, "gradient checks", ac05_gradients(), capsys)


def test_ac06_kta_surrogate(capsys):
    _check(6, "KTA surrogate correlation", ac06_kta_surrogate(), capsys)


def test_ac07_vanishing_similarity(capsys):
    _check(7, "vanishing-similarity trend", ac07_vanishing_similarity(), capsys)


def test_ac08_stage_improvement(searches, capsys):
    result, elapsed, _, _ = searches
    _check(8, "stage improvement", ac08_stage_improvement(result, elapsed), capsys)


def test_ac09_noise_limits(capsys):
    _check(9, "noise limits", ac09_noise_limits(), capsys)


def test_ac10_baselines(capsys):
    _check(10, "baseline correctness", ac10_baselines(), capsys)


def test_ac11_determinism(searches, capsys):
    _, _, a, b = searches
    _check(11, "determinism", ac11_determinism(a, b), capsys)


def test_ac12_kernel_machine_contract(searches, capsys):
    _, _, a, b = searches
    _check(12, "kernel-machine contract", ac12_kernel_machine([a, b]), capsys)


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        first, elapsed = toy_search(tmp / "a")
        toy_search(tmp / "b")
        checks = [
            (1, "simulator oracle equivalence", ac01_simulator_oracle),
            (2, "single-qubit fidelity law", ac02_single_qubit_law),
            (3, "search-space count", ac03_space_count),
            (4, "predictor parameter identity", ac04_parameter_identity),
            (5, "gradient checks", ac05_gradients),
            (6, "KTA surrogate correlation", ac06_kta_surrogate),
            (7, "vanishing-similarity trend", ac07_vanishing_similarity),
            (8, "stage improvement", lambda: ac08_stage_improvement(first, elapsed)),
            (9, "noise limits", ac09_noise_limits),
            (10, "baseline correctness", ac10_baselines),
            (11, "determinism", lambda: ac11_determinism(tmp / "a", tmp / "b")),
            (12, "kernel-machine contract", lambda: ac12_kernel_machine([tmp / "a", tmp / "b"])),
        ]
        failed = 0
        for n, title, fn in checks:
            ok, detail = fn()
            report(n, title, ok, detail)
            failed += not ok
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
