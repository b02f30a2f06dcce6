"""End-to-end feature-map search and the baseline kernels.

The search runs in stages that each read and write a run directory::

    config.json            echo of the SearchConfig
    selector.json          fitted feature selector (when raw data was given)
    train.csv, test.csv    angle-scaled splits
    pool/                  sampled layouts, labels.csv, predictor_data.csv
    predictor.ckpt         trained predictor
    candidates.csv         top-k layouts with predicted and true KTA
    candidates/            candidate layout files
    finetune/              per-candidate trial traces and best theta
    records.csv            every evaluated kernel, all stages
    report.csv             best metrics per stage
    chosen.json            selected layout and theta
    manifest.json          artifact hashes, stage timings, seed

Running the stage functions one after another with the same config produces
the same artifacts as :func:`run_full_search`.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .circuit import (
    CircuitLayout,
    block_space_size,
    default_strategy,
    enumerate_block_space,
    heak_layout,
    max_promotions,
    num_blocks,
    promote_gates,
    sample_layout,
)
from .data import (
    FeatureSelector,
    TabularDataset,
    apply_selector,
    first_columns,
    load_csv,
    mrmr_select,
    pca_reduce,
    scale_to_angles,
    stratified_split,
)
from .errors import QFMapError
from .kernel import (
    DEFAULT_LAMBDA,
    accuracy,
    fidelity_gram,
    fit,
    kernel_variance,
    kta,
    overlap_gram,
    predict,
    rbf_gram,
    target_matrix,
)
from .predictor import (
    init_model,
    load_checkpoint,
    make_samples,
    save_checkpoint,
    score_layouts,
    train_predictor,
    write_dataset,
)
from .qsim import NoiseSpec, run_layout_batch, run_layout_noisy_batch

log = logging.getLogger(__name__)

STAGES = ("training_pool", "candidate", "finetuned")
_STAGE_SEED = {
    "split": 1,
    "sample_pool": 2,
    "predictor": 3,
    "rank": 4,
    "finetune": 5,
}


def stage_rng(seed: int, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STAGE_SEED[stage], *extra])


@dataclass
class SearchConfig:
    n_qubits: int = 4
    l0: list[int] = field(default_factory=lambda: [1])
    p: int = 4
    strategy: str | None = None
    pool_size: int = 36
    scoring_size: int = 72
    scoring: str = "sample"  # or "exhaustive"
    k: int = 5
    num_theta_trials: int = 5
    finetune_epochs: int = 30
    finetune_lr: float = 0.2
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    noise_p1: float | None = None
    noise_p2: float | None = None
    predictor_epochs: int = 30
    predictor_lr: float = 0.01
    predictor_batch: int = 32
    feature_method: str = "mrmr"  # "mrmr", "pca" or "none"
    train_fraction: float = 0.5
    bins: int = 8
    carry_best: bool = True
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.l0, int):
            self.l0 = [self.l0]
        self.l0 = [int(v) for v in self.l0]
        counts = {
            "n_qubits": self.n_qubits,
            "p": self.p,
            "pool_size": self.pool_size,
            "scoring_size": self.scoring_size,
            "k": self.k,
            "num_theta_trials": self.num_theta_trials,
            "workers": self.workers,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not self.l0 or min(self.l0) < 1:
            raise ValueError(f"l0 must be a non-empty list of positive ints, got {self.l0}")
        if self.scoring not in ("sample", "exhaustive"):
            raise ValueError(f"scoring must be 'sample' or 'exhaustive', got {self.scoring!r}")
        if self.scoring == "exhaustive":
            total = sum(block_space_size(self.n_qubits, l, self.p) for l in set(self.l0))
            self.scoring_size = total
        if self.k > self.scoring_size:
            raise ValueError(f"k={self.k} exceeds scoring_size={self.scoring_size}")
        if self.feature_method not in ("mrmr", "pca", "none"):
            raise ValueError(f"unknown feature_method {self.feature_method!r}")

    @property
    def noise(self) -> NoiseSpec | None:
        if self.noise_p1 is None and self.noise_p2 is None:
            return None
        return NoiseSpec(self.noise_p1 or 0.0, self.noise_p2 or 0.0)

    @property
    def encoding(self) -> str:
        return self.strategy or default_strategy(self.n_qubits, self.p)

    @property
    def max_width(self) -> int:
        """Image width of the deepest layout the configured space can produce."""
        return 2 * num_blocks(self.n_qubits, max(self.l0), self.p)

    @property
    def l_max(self) -> int:
        return self.max_width * self.n_qubits // 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SearchConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class CandidateRecord:
    layout: CircuitLayout
    theta: np.ndarray
    kta_train: float
    train_accuracy: float
    test_accuracy: float
    stage: str
    predicted_kta: float | None = None
    fit_residual: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)


# -- kernels on a layout ----------------------------------------------------------

def _states(layout, theta, X, noise, shifts=None):
    if noise is None:
        return run_layout_batch(layout, X, theta, shifts)
    return run_layout_noisy_batch(layout, X, theta, noise, shifts)


def _gram(a, b=None, noise=None):
    return fidelity_gram(a, b) if noise is None else overlap_gram(a, b)


def kta_of(layout, theta, data: TabularDataset, noise: NoiseSpec | None = None) -> float:
    Q = _gram(_states(layout, theta, data.features, noise), noise=noise)
    return kta(Q, data.labels, data.num_classes)


@dataclass
class KernelScores:
    kta: float
    train_accuracy: float
    test_accuracy: float
    fit_residual: float


def evaluate_kernel(
    layout,
    theta,
    train: TabularDataset,
    test: TabularDataset | None,
    lam: float = DEFAULT_LAMBDA,
    noise: NoiseSpec | None = None,
) -> KernelScores:
    """Train KTA, and train/test accuracy of kernel ridge on this kernel."""
    a = _states(layout, theta, train.features, noise)
    Q = _gram(a, noise=noise)
    machine = fit(Q, train.labels, train.num_classes, lam)
    train_acc = accuracy(predict(machine, Q), train.labels)
    test_acc = float("nan")
    if test is not None and test.n:
        b = _states(layout, theta, test.features, noise)
        test_acc = accuracy(predict(machine, _gram(b, a, noise)), test.labels)
    return KernelScores(
        kta(Q, train.labels, train.num_classes),
        train_acc,
        test_acc,
        float(machine.residuals(Q).max()),
    )


# -- parameter-shift gradient --------------------------------------------------------

_TWO_TERM = ((np.pi / 2, 0.5), (-np.pi / 2, -0.5))
_C_PLUS = (np.sqrt(2) + 1) / (4 * np.sqrt(2))
_C_MINUS = (np.sqrt(2) - 1) / (4 * np.sqrt(2))
# CRZ's generator has eigenvalues {0, +-1/2}, which needs the four-term rule.
_FOUR_TERM = (
    (np.pi / 2, _C_PLUS),
    (-np.pi / 2, -_C_PLUS),
    (3 * np.pi / 2, -_C_MINUS),
    (-3 * np.pi / 2, _C_MINUS),
)


def kta_and_gradient(
    layout: CircuitLayout, theta, data: TabularDataset, noise: NoiseSpec | None = None
) -> tuple[float, np.ndarray]:
    """KTA and its exact gradient in ``theta`` via parameter shifts.

    Each occurrence of a parameter is shifted in the bra-side states only;
    the ket-side contribution is the transpose of the same matrix.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    occurrences = layout.param_gate_indices()
    if not occurrences:
        raise ValueError("layout has no trainable parameters")
    X = data.features
    base = _states(layout, theta, X, noise)
    Q = _gram(base, noise=noise)
    n = Q.shape[0]
    J = target_matrix(data.labels, data.num_classes)
    norm = np.linalg.norm(Q)
    if norm == 0.0:
        raise ZeroDivisionError("KTA undefined for an all-zero Gram matrix")
    align = float(np.sum(J * Q))
    grad = np.zeros(theta.size)
    for j, gates in enumerate(occurrences):
        dQ = np.zeros_like(Q)
        for gi in gates:
            rule = _FOUR_TERM if layout.gates[gi].kind == "CRZ" else _TWO_TERM
            for shift, coef in rule:
                C = _gram(_states(layout, theta, X, noise, {gi: shift}), base, noise)
                dQ += coef * (C + C.T)
        grad[j] = np.sum(J * dQ) / (n * norm) - align * np.sum(Q * dQ) / (n * norm**3)
    return align / (n * norm), grad


def kta_gradient(layout, theta, data: TabularDataset, noise: NoiseSpec | None = None) -> np.ndarray:
    return kta_and_gradient(layout, theta, data, noise)[1]


def ascend_kta(
    layout,
    theta0,
    data: TabularDataset,
    epochs: int,
    lr: float,
    noise: NoiseSpec | None = None,
) -> tuple[np.ndarray, float, list[float]]:
    """Gradient ascent on KTA keeping the best iterate (initial point included)."""
    theta = np.array(theta0, dtype=float)
    trace = []
    best_theta, best = theta.copy(), -np.inf
    for _ in range(epochs):
        value, grad = kta_and_gradient(layout, theta, data, noise)
        trace.append(value)
        if value > best:
            best, best_theta = value, theta.copy()
        if lr == 0.0:
            continue
        theta = theta + lr * grad
    value = kta_of(layout, theta, data, noise)
    trace.append(value)
    if value > best:
        best, best_theta = value, theta.copy()
    return best_theta, best, trace


# -- search stages (in-memory) ------------------------------------------------------

def sample_pool(config: SearchConfig, size: int, rng: np.random.Generator) -> list[CircuitLayout]:
    pool = []
    for _ in range(size):
        l0 = int(rng.choice(config.l0))
        pool.append(sample_layout(config.n_qubits, l0, config.p, config.encoding, rng))
    return pool


def scoring_pool(config: SearchConfig, rng: np.random.Generator) -> list[CircuitLayout]:
    if config.scoring == "exhaustive":
        out = []
        for l0 in sorted(set(config.l0)):
            out.extend(enumerate_block_space(config.n_qubits, l0, config.p, config.encoding, rng))
        return out
    return sample_pool(config, config.scoring_size, rng)


@dataclass
class LabeledPool:
    layouts: list[CircuitLayout]
    ktas: list[float]
    dropped: int = 0

    def samples(self, max_width: int):
        return make_samples(self.layouts, self.ktas, max_width)


def _label_one(args):
    layout, data, noise = args
    try:
        return kta_of(layout, None, data, noise)
    except (QFMapError, ArithmeticError, ValueError) as exc:
        log.warning("dropping layout %s: %s", layout.hash, exc)
        return None


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def label_pool(
    layouts: Sequence[CircuitLayout],
    data_train: TabularDataset,
    noise: NoiseSpec | None = None,
    workers: int = 1,
) -> LabeledPool:
    """KTA of every layout with no trainable parameters; failures are dropped."""
    cache: dict[str, float | None] = {}
    todo = []
    for layout in layouts:
        if layout.hash not in cache:
            cache[layout.hash] = None
            todo.append(layout)
    for layout, value in zip(todo, _pmap(_label_one, [(l, data_train, noise) for l in todo], workers)):
        cache[layout.hash] = value
    kept, ktas, dropped = [], [], 0
    for layout in layouts:
        value = cache[layout.hash]
        if value is None:
            dropped += 1
            continue
        kept.append(layout)
        ktas.append(value)
    if dropped:
        log.info("label_pool dropped %d of %d layouts", dropped, len(layouts))
    return LabeledPool(kept, ktas, dropped)


def rank_and_select(model, pool: Sequence[CircuitLayout], k: int, max_width: int):
    """Top ``k`` layouts by predicted KTA as ``(layout, score)`` pairs.

    Equal scores are ordered by layout hash.
    """
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool size {len(pool)}")
    scores = score_layouts(model, list(pool), max_width)
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].hash))
    return [(pool[i], float(scores[i])) for i in order[:k]]


def draw_promotion_trials(total_rotations: int, upper: int, count: int, rng) -> list[tuple[int, ...]]:
    """Positions of gates to promote, one tuple per trial, shared by all candidates."""
    trials = []
    for _ in range(count):
        m = int(rng.integers(1, upper + 1))
        trials.append(tuple(sorted(int(x) for x in rng.choice(total_rotations, size=m, replace=False))))
    return trials


def initial_theta(layout: CircuitLayout, positions: Sequence[int], X: np.ndarray) -> np.ndarray:
    """Training mean of each replaced feature (constant slots keep their value)."""
    theta = []
    for pos in sorted(positions):
        b = layout.bindings[layout.rotation_binding_index[pos]]
        theta.append(float(X[:, b.value].mean()) if b.kind == "feature" else float(b.value))
    return np.array(theta)


@dataclass
class FinetuneResult:
    layout: CircuitLayout
    theta: np.ndarray
    kta: float
    base_kta: float
    trials: list[dict]


def finetune(
    layout: CircuitLayout,
    data_train: TabularDataset,
    trials: Sequence[Sequence[int]],
    epochs: int = 30,
    lr: float = 0.2,
    noise: NoiseSpec | None = None,
) -> FinetuneResult:
    """Try each promotion pattern and keep the best layout/theta by train KTA.

    The unpromoted layout is the starting point, so the result never has a
    lower train KTA than the candidate itself.
    """
    base = kta_of(layout, None, data_train, noise)
    best = FinetuneResult(layout, np.zeros(0), base, base, [])
    for t, positions in enumerate(trials):
        promoted = promote_gates(layout, len(positions), positions)
        theta0 = initial_theta(layout, positions, data_train.features)
        theta, value, trace = ascend_kta(promoted, theta0, data_train, epochs, lr, noise)
        best.trials.append(
            {
                "trial": t,
                "positions": list(positions),
                "theta_init": theta0.tolist(),
                "theta_best": theta.tolist(),
                "kta_init": trace[0],
                "kta_best": value,
                "trace": trace,
            }
        )
        if value > best.kta:
            best.layout, best.theta, best.kta = promoted, theta, value
    return best


def _finetune_one(args):
    return finetune(*args)


# -- baselines -------------------------------------------------------------------

def heak(n_qubits: int, p: int, l0: int = 1) -> CircuitLayout:
    return heak_layout(n_qubits, p, l0)


def train_tek(
    data_train: TabularDataset,
    n_qubits: int,
    l0: int = 1,
    epochs: int = 30,
    lr: float = 0.2,
    seed=None,
    noise: NoiseSpec | None = None,
):
    """HEA kernel with a trainable RY + CRZ-ring module after every block.

    Returns ``(layout, gamma, trace)`` where ``gamma`` is the best iterate of
    gradient ascent on KTA (equivalently descent on -KTA).
    """
    layout = heak_layout(n_qubits, data_train.d, l0, trainable_modules=True)
    rng = np.random.default_rng(seed)
    gamma0 = rng.uniform(0.0, 2 * np.pi, size=layout.num_params)
    gamma, _, trace = ascend_kta(layout, gamma0, data_train, epochs, lr, noise)
    return layout, gamma, trace


def rbfk_scores(train: TabularDataset, test: TabularDataset, gammas, lam=DEFAULT_LAMBDA):
    rows = []
    for g in gammas:
        K = rbf_gram(train.features, None, g)
        machine = fit(K, train.labels, train.num_classes, lam)
        rows.append(
            {
                "gamma": g,
                "kta": kta(K, train.labels, train.num_classes),
                "train_accuracy": accuracy(predict(machine, K), train.labels),
                "test_accuracy": accuracy(
                    predict(machine, rbf_gram(test.features, train.features, g)), test.labels
                ),
            }
        )
    return rows


# -- vanishing-similarity diagnostic -----------------------------------------------

def diagnose_kv(
    data: TabularDataset,
    n_qubits: int,
    l0s: Sequence[int],
    ps: Sequence[int],
    trials: int = 5,
    seed=0,
    strategy: str | None = None,
) -> list[dict]:
    """Mean off-diagonal kernel variance of random layouts per (L0, p) cell.

    The first ``p`` columns of ``data`` are used (pass a ranked dataset) and
    scaled to angles in ``[0, 2*pi)``.
    """
    rows = []
    for l0 in l0s:
        for p in ps:
            X = scale_to_angles(first_columns(data, p).features)
            rng = np.random.default_rng([int(seed), int(l0), int(p)])
            enc = strategy or default_strategy(n_qubits, p)
            kvs = []
            for _ in range(trials):
                layout = sample_layout(n_qubits, l0, p, enc, rng)
                kvs.append(kernel_variance(fidelity_gram(run_layout_batch(layout, X))))
            rows.append(
                {
                    "l0": int(l0),
                    "p": int(p),
                    "trials": int(trials),
                    "kv_mean": float(np.mean(kvs)),
                    "kv_std": float(np.std(kvs)),
                }
            )
    return rows


def write_rows(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# -- run directory ------------------------------------------------------------------

class StageError(QFMapError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDirectory:
    """Paths and manifest bookkeeping of one search run."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def config_path(self) -> Path:
        return self.path("config.json")

    def config(self) -> SearchConfig:
        return SearchConfig.load(self.config_path)

    def write_config(self, config: SearchConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        config.save(self.config_path)

    def datasets(self) -> tuple[TabularDataset, TabularDataset]:
        meta = json.loads(self.path("data.json").read_text())
        R = int(meta["num_classes"])
        return (
            load_csv(self.path("train.csv"), "label", R),
            load_csv(self.path("test.csv"), "label", R),
        )

    def manifest(self) -> dict:
        path = self.path("manifest.json")
        if path.exists():
            return json.loads(path.read_text())
        return {"tool_version": __version__, "stages": {}}

    def record_stage(self, stage: str, artifacts: Sequence[Path], seconds: float) -> None:
        manifest = self.manifest()
        config = json.loads(self.config_path.read_text())
        manifest["config"] = config
        manifest["seed"] = config["seed"]
        manifest["stages"][stage] = {
            "seconds": round(seconds, 3),
            "artifacts": {
                str(Path(a).relative_to(self.root)): sha256_file(a) for a in sorted(artifacts)
            },
        }
        digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode())
        for name in sorted(manifest["stages"]):
            for rel, h in sorted(manifest["stages"][name]["artifacts"].items()):
                digest.update(f"{rel}={h}\n".encode())
        manifest["run_hash"] = digest.hexdigest()
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _layout_file(directory: Path, index: int, layout: CircuitLayout) -> Path:
    return directory / f"{index:05d}_{layout.hash}.json"


def _read_layout_dir(directory: Path) -> list[CircuitLayout]:
    return [CircuitLayout.from_json(p.read_text()) for p in sorted(directory.glob("*.json"))]


def _fresh_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} already exists (use force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _fresh_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} already exists (use force to overwrite)")


def _timed(run: RunDirectory, stage: str, fn):
    start = time.perf_counter()
    try:
        artifacts = fn()
    except (FileExistsError, StageError):
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    run.record_stage(stage, artifacts, time.perf_counter() - start)
    return artifacts


def stage_select_features(
    run: RunDirectory, config: SearchConfig, dataset: TabularDataset, force: bool = False
) -> list[Path]:
    """Split raw data, fit the selector on the train split, write scaled splits."""

    def body():
        _fresh_file(run.path("train.csv"), force)
        train_raw, test_raw = stratified_split(
            dataset, config.train_fraction, stage_rng(config.seed, "split").integers(2**32)
        )
        if config.feature_method == "mrmr":
            selector = mrmr_select(train_raw, config.p, config.bins)
        elif config.feature_method == "pca":
            selector = pca_reduce(train_raw, config.p)
        else:
            if dataset.d != config.p:
                raise ValueError(f"feature_method 'none' needs d == p, got d={dataset.d}")
            selector = FeatureSelector(
                "mrmr", dataset.d, dataset.d, train_raw.features.min(axis=0),
                train_raw.features.max(axis=0), indices=np.arange(dataset.d),
            )
        selector.save(run.path("selector.json"))
        apply_selector(selector, train_raw).to_csv(run.path("train.csv"))
        apply_selector(selector, test_raw).to_csv(run.path("test.csv"))
        run.path("data.json").write_text(json.dumps({"num_classes": dataset.num_classes}) + "\n")
        return [run.path(f) for f in ("selector.json", "train.csv", "test.csv", "data.json")]

    return _timed(run, "select_features", body)


def use_prepared_data(run: RunDirectory, train: TabularDataset, test: TabularDataset) -> None:
    """Install already angle-scaled splits into the run directory."""

    def body():
        train.to_csv(run.path("train.csv"))
        test.to_csv(run.path("test.csv"))
        run.path("data.json").write_text(json.dumps({"num_classes": train.num_classes}) + "\n")
        return [run.path(f) for f in ("train.csv", "test.csv", "data.json")]

    _timed(run, "prepare_data", body)


def stage_sample_pool(run: RunDirectory, force: bool = False) -> list[Path]:
    config = run.config()

    def body():
        out = run.path("pool")
        _fresh_dir(out, force)
        pool = sample_pool(config, config.pool_size, stage_rng(config.seed, "sample_pool"))
        return [_write_layout(out, i, l) for i, l in enumerate(pool)]

    return _timed(run, "sample_pool", body)


def _write_layout(directory: Path, index: int, layout: CircuitLayout) -> Path:
    path = _layout_file(directory, index, layout)
    path.write_text(layout.to_json() + "\n")
    return path


def stage_label_pool(run: RunDirectory, force: bool = False) -> list[Path]:
    config = run.config()

    def body():
        _fresh_file(run.path("pool", "labels.csv"), force)
        layouts = _read_layout_dir(run.path("pool"))
        train, _ = run.datasets()
        labeled = label_pool(layouts, train, config.noise, config.workers)
        rows = [
            {"layout_hash": l.hash, "l0": l.l0, "kta": k, "target": 10.0 * k}
            for l, k in zip(labeled.layouts, labeled.ktas)
        ]
        write_rows(run.path("pool", "labels.csv"), rows)
        write_dataset(
            run.path("pool", "predictor_data.csv"),
            [l.hash for l in labeled.layouts],
            labeled.samples(config.max_width),
        )
        return [run.path("pool", "labels.csv"), run.path("pool", "predictor_data.csv")]

    return _timed(run, "label_pool", body)


def _read_labels(run: RunDirectory) -> dict[str, float]:
    with open(run.path("pool", "labels.csv"), newline="") as fh:
        return {r["layout_hash"]: float(r["kta"]) for r in csv.DictReader(fh)}


def _labeled_from_run(run: RunDirectory) -> LabeledPool:
    labels = _read_labels(run)
    layouts = [l for l in _read_layout_dir(run.path("pool")) if l.hash in labels]
    return LabeledPool(layouts, [labels[l.hash] for l in layouts])


def stage_train_predictor(run: RunDirectory, force: bool = False) -> list[Path]:
    config = run.config()

    def body():
        _fresh_file(run.path("predictor.ckpt"), force)
        labeled = _labeled_from_run(run)
        rng = stage_rng(config.seed, "predictor")
        model = init_model(config.l_max, int(rng.integers(2**32)))
        model = train_predictor(
            model,
            labeled.samples(config.max_width),
            config.predictor_epochs,
            config.predictor_lr,
            config.predictor_batch,
            int(rng.integers(2**32)),
        )
        save_checkpoint(model, run.path("predictor.ckpt"), max_width=config.max_width)
        return [run.path("predictor.ckpt")]

    return _timed(run, "train_predictor", body)


def stage_rank(run: RunDirectory, force: bool = False) -> list[Path]:
    config = run.config()

    def body():
        out = run.path("candidates")
        _fresh_file(run.path("candidates.csv"), force)
        _fresh_dir(out, force)
        model, header = load_checkpoint(run.path("predictor.ckpt"))
        pool = scoring_pool(config, stage_rng(config.seed, "rank"))
        chosen = rank_and_select(model, pool, config.k, header["max_width"])
        if config.carry_best:
            chosen = _carry_best(chosen, _labeled_from_run(run), model, header["max_width"])
        train, _ = run.datasets()
        rows, paths = [], []
        for rank, (layout, score) in enumerate(chosen):
            rows.append(
                {
                    "rank": rank,
                    "layout_hash": layout.hash,
                    "predicted_kta": score,
                    "true_kta": kta_of(layout, None, train, config.noise),
                }
            )
            paths.append(_write_layout(out, rank, layout))
        write_rows(run.path("candidates.csv"), rows)
        return [run.path("candidates.csv"), *paths]

    return _timed(run, "rank", body)


def _carry_best(chosen, labeled: LabeledPool, model, max_width):
    """Keep the best labeled layout among the candidates (replaces the last slot)."""
    if not labeled.layouts:
        return chosen
    best = max(range(len(labeled.layouts)), key=lambda i: (labeled.ktas[i], labeled.layouts[i].hash))
    layout = labeled.layouts[best]
    if any(l.hash == layout.hash for l, _ in chosen):
        return chosen
    score = float(score_layouts(model, [layout], max_width)[0])
    return chosen[:-1] + [(layout, score)]


def stage_finetune(run: RunDirectory, force: bool = False) -> list[Path]:
    config = run.config()

    def body():
        out = run.path("finetune")
        _fresh_dir(out, force)
        candidates = _read_layout_dir(run.path("candidates"))
        train, _ = run.datasets()
        upper = min(max_promotions(l) for l in candidates)
        paths = []
        if upper < 1:
            log.info("fine-tune skipped: at most %d gate(s) can be promoted", upper)
            trials = []
        else:
            total = min(l.total_rotations for l in candidates)
            trials = draw_promotion_trials(
                total, upper, config.num_theta_trials, stage_rng(config.seed, "finetune")
            )
        jobs = [
            (l, train, trials, config.finetune_epochs, config.finetune_lr, config.noise)
            for l in candidates
        ]
        for rank, (layout, res) in enumerate(zip(candidates, _pmap(_finetune_one, jobs, config.workers))):
            path = out / f"{rank:05d}_{layout.hash}.json"
            payload = {
                "candidate_hash": layout.hash,
                "base_kta": res.base_kta,
                "best_kta": res.kta,
                "best_layout": res.layout.to_dict(),
                "best_theta": res.theta.tolist(),
                "trials": res.trials,
            }
            path.write_text(json.dumps(payload, indent=1) + "\n")
            paths.append(path)
        return paths

    return _timed(run, "finetune", body)


def _record_rows(records: Sequence[CandidateRecord]) -> list[dict]:
    return [
        {
            "stage": r.stage,
            "layout_hash": r.layout.hash,
            "num_params": int(r.theta.size),
            "kta_train": r.kta_train,
            "predicted_kta": "" if r.predicted_kta is None else r.predicted_kta,
            "train_accuracy": r.train_accuracy,
            "test_accuracy": r.test_accuracy,
            "fit_residual": r.fit_residual,
        }
        for r in records
    ]


def stage_table(records: Sequence[CandidateRecord]) -> list[dict]:
    """Best metrics per stage, one row per stage in pipeline order."""
    rows = []
    for stage in STAGES:
        rs = [r for r in records if r.stage == stage]
        if not rs:
            continue
        rows.append(
            {
                "stage": stage,
                "num_kernels": len(rs),
                "best_kta_train": max(r.kta_train for r in rs),
                "best_train_accuracy": max(r.train_accuracy for r in rs),
                "best_test_accuracy": max(r.test_accuracy for r in rs),
            }
        )
    return rows


def choose(records: Sequence[CandidateRecord]) -> CandidateRecord:
    """Fine-tuned kernel with the highest test accuracy (then train KTA, then hash)."""
    pool = [r for r in records if r.stage == "finetuned"] or list(records)
    return max(pool, key=lambda r: (r.test_accuracy, r.kta_train, _neg_hash(r.layout.hash)))


def _neg_hash(h: str) -> tuple:
    return tuple(-ord(c) for c in h)


def _evaluate_record(layout, theta, stage, train, test, config, predicted=None) -> CandidateRecord:
    s = evaluate_kernel(layout, theta, train, test, config.lam, config.noise)
    return CandidateRecord(
        layout, theta, s.kta, s.train_accuracy, s.test_accuracy, stage, predicted, s.fit_residual
    )


def stage_evaluate(run: RunDirectory, force: bool = False) -> list[Path]:
    config = run.config()

    def body():
        _fresh_file(run.path("report.csv"), force)
        train, test = run.datasets()
        records = []
        for layout in _labeled_from_run(run).layouts:
            records.append(_evaluate_record(layout, None, "training_pool", train, test, config))
        with open(run.path("candidates.csv"), newline="") as fh:
            predicted = {r["layout_hash"]: float(r["predicted_kta"]) for r in csv.DictReader(fh)}
        for layout in _read_layout_dir(run.path("candidates")):
            records.append(
                _evaluate_record(layout, None, "candidate", train, test, config, predicted[layout.hash])
            )
        for path in sorted(run.path("finetune").glob("*.json")):
            payload = json.loads(path.read_text())
            layout = CircuitLayout.from_dict(payload["best_layout"])
            theta = np.asarray(payload["best_theta"], dtype=float)
            records.append(
                _evaluate_record(
                    layout, theta, "finetuned", train, test, config, predicted[payload["candidate_hash"]]
                )
            )
        write_rows(run.path("records.csv"), _record_rows(records))
        write_rows(run.path("report.csv"), stage_table(records))
        best = choose(records)
        chosen = {
            "layout_hash": best.layout.hash,
            "layout": best.layout.to_dict(),
            "theta": best.theta.tolist(),
            "kta_train": best.kta_train,
            "train_accuracy": best.train_accuracy,
            "test_accuracy": best.test_accuracy,
        }
        run.path("chosen.json").write_text(json.dumps(chosen, indent=2) + "\n")
        return [run.path(f) for f in ("records.csv", "report.csv", "chosen.json")]

    return _timed(run, "evaluate", body)


def read_records(run: RunDirectory) -> list[dict]:
    with open(run.path("records.csv"), newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class SearchResult:
    records: list[dict]
    report: list[dict]
    chosen: dict
    run_dir: Path


def run_full_search(
    config: SearchConfig,
    run_dir,
    dataset: TabularDataset | None = None,
    train: TabularDataset | None = None,
    test: TabularDataset | None = None,
    force: bool = False,
) -> SearchResult:
    """All stages in order.  Pass either raw ``dataset`` or prepared ``train``/``test``."""
    run = RunDirectory(run_dir)
    if run.root.exists() and any(run.root.iterdir()):
        if not force:
            raise FileExistsError(f"{run.root} is not empty (use force to overwrite)")
        shutil.rmtree(run.root)
    run.write_config(config)
    if dataset is not None:
        stage_select_features(run, config, dataset, force)
    elif train is not None and test is not None:
        use_prepared_data(run, train, test)
    else:
        raise ValueError("pass a raw dataset or both train and test splits")
    stage_sample_pool(run, force)
    stage_label_pool(run, force)
    stage_train_predictor(run, force)
    stage_rank(run, force)
    stage_finetune(run, force)
    stage_evaluate(run, force)
    with open(run.path("report.csv"), newline="") as fh:
        report = list(csv.DictReader(fh))
    return SearchResult(
        read_records(run), report, json.loads(run.path("chosen.json").read_text()), run.root
    )
