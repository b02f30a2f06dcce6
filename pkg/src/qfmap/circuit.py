"""Circuit layouts for hardware-efficient encoding circuits.

A layout is a stack of ``B`` blocks on ``N`` qubits.  Each block applies one
rotation per qubit (axis ``even_axis`` on even qubits, ``odd_axis`` on odd
qubits) followed by CNOTs on the nearest-neighbour pairs ``(i, i+1)`` whose
mask entry is set, applied in ascending ``i``.  Every rotation carries a
binding that says where its angle comes from: a selected feature, an entry of
the trainable vector ``theta``, or a fixed constant.

Layouts are immutable; all transformations return new layouts.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, StrategyError

AXES = ("X", "Y", "Z")
STRATEGIES = ("sequential", "chain", "random", "elementwise", "modular", "random_fill")
ENUMERATION_LIMIT = 10**6

# rotation X/Y/Z, CNOT control, CNOT target
IMAGE_CHANNELS = 5
_CHANNEL = {"RX": 0, "RY": 1, "RZ": 2}


@dataclass(frozen=True)
class Binding:
    """Angle source of one parameterized gate.

    ``kind`` is ``"feature"`` (``value`` = feature index), ``"param"``
    (``value`` = index into theta) or ``"const"`` (``value`` = angle).
    For promoted parameters ``origin`` keeps the feature index the parameter
    replaced, so it can be initialised from that feature's mean.
    """

    kind: str
    value: float
    origin: int | None = None

    def __post_init__(self):
        if self.kind not in ("feature", "param", "const"):
            raise ValueError(f"unknown binding kind {self.kind!r}")
        if self.kind == "const":
            object.__setattr__(self, "value", float(self.value))
        else:
            object.__setattr__(self, "value", int(self.value))


@dataclass(frozen=True)
class GateSlot:
    kind: str
    qubits: tuple[int, ...]
    binding: Binding | None = None


@dataclass(frozen=True)
class BlockSpec:
    even_axis: str
    odd_axis: str
    mask: tuple[bool, ...]

    def __post_init__(self):
        if self.even_axis not in AXES or self.odd_axis not in AXES:
            raise ValueError(f"axes must be in {AXES}")
        object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))


@dataclass(frozen=True)
class CircuitLayout:
    """HEA layout, optionally with a trainable module after every block.

    ``bindings`` is aligned with the parameterized gates of :attr:`gates`
    in circuit order.  With ``trainable_modules`` each block is followed by
    ``RY`` on every qubit and a ring of ``CRZ(i, (i+1) mod N)`` gates.
    """

    n: int
    l0: int
    p: int
    blocks: tuple[BlockSpec, ...]
    bindings: tuple[Binding, ...] = ()
    trainable_modules: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "bindings", tuple(self.bindings))
        for block in self.blocks:
            if len(block.mask) != self.n - 1:
                raise ValueError(
                    f"block mask has length {len(block.mask)}, expected {self.n - 1}"
                )
        if self.bindings and len(self.bindings) != self.num_parametric:
            raise ValueError(
                f"{len(self.bindings)} bindings for {self.num_parametric} parameterized gates"
            )

    # -- structure -------------------------------------------------------
    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def total_rotations(self) -> int:
        """Number of encoding rotations ``L`` (excludes trainable modules)."""
        return self.n * self.num_blocks

    @property
    def num_parametric(self) -> int:
        per_block = self.n + (2 * self.n if self.trainable_modules else 0)
        return per_block * self.num_blocks

    @cached_property
    def rotation_binding_index(self) -> tuple[int, ...]:
        """Binding index of each encoding rotation, in rotation order."""
        stride = 3 * self.n if self.trainable_modules else self.n
        return tuple(b * stride + q for b in range(self.num_blocks) for q in range(self.n))

    @cached_property
    def gates(self) -> tuple[GateSlot, ...]:
        out = []
        k = 0

        def bound():
            nonlocal k
            b = self.bindings[k] if self.bindings else None
            k += 1
            return b

        for block in self.blocks:
            for q in range(self.n):
                axis = block.even_axis if q % 2 == 0 else block.odd_axis
                out.append(GateSlot("R" + axis, (q,), bound()))
            for i, on in enumerate(block.mask):
                if on:
                    out.append(GateSlot("CNOT", (i, i + 1)))
            if self.trainable_modules:
                for q in range(self.n):
                    out.append(GateSlot("RY", (q,), bound()))
                for q in range(self.n):
                    out.append(GateSlot("CRZ", (q, (q + 1) % self.n), bound()))
        return tuple(out)

    @property
    def num_params(self) -> int:
        idx = [b.value for b in self.bindings if b.kind == "param"]
        return max(idx) + 1 if idx else 0

    def param_origins(self) -> list[int | None]:
        """Feature index each parameter replaced (``None`` when unknown)."""
        origins: list[int | None] = [None] * self.num_params
        for b in self.bindings:
            if b.kind == "param":
                origins[b.value] = b.origin
        return origins

    def param_gate_indices(self) -> list[list[int]]:
        """Flattened gate indices at which each parameter occurs."""
        occ: list[list[int]] = [[] for _ in range(self.num_params)]
        for gi, slot in enumerate(self.gates):
            if slot.binding is not None and slot.binding.kind == "param":
                occ[slot.binding.value].append(gi)
        return occ

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        gate_index = [gi for gi, s in enumerate(self.gates) if s.kind in ("RX", "RY", "RZ", "CRZ")]
        bindings = []
        for gi, b in zip(gate_index, self.bindings):
            entry = {"gate_index": gi, "kind": b.kind, "value": b.value}
            if b.origin is not None:
                entry["origin"] = b.origin
            bindings.append(entry)
        out = {
            "n": self.n,
            "l0": self.l0,
            "p": self.p,
            "blocks": [
                {"even_axis": b.even_axis, "odd_axis": b.odd_axis, "mask": list(b.mask)}
                for b in self.blocks
            ],
            "bindings": bindings,
        }
        if self.trainable_modules:
            out["trainable_modules"] = True
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CircuitLayout":
        blocks = tuple(
            BlockSpec(b["even_axis"], b["odd_axis"], tuple(b["mask"])) for b in d["blocks"]
        )
        entries = sorted(d.get("bindings", []), key=lambda e: e["gate_index"])
        bindings = tuple(Binding(e["kind"], e["value"], e.get("origin")) for e in entries)
        return cls(
            int(d["n"]),
            int(d["l0"]),
            int(d["p"]),
            blocks,
            bindings,
            bool(d.get("trainable_modules", False)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CircuitLayout":
        return cls.from_dict(json.loads(text))

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def serialize(layout: CircuitLayout) -> str:
    return layout.to_json()


def deserialize(text: str) -> CircuitLayout:
    return CircuitLayout.from_json(text)


def num_blocks(n: int, l0: int, p: int) -> int:
    return l0 * math.ceil(p / n)


def block_space_size(n: int, l0: int, p: int) -> int:
    per_block = 3 * 3 * 2 ** (n - 1)
    return per_block ** num_blocks(n, l0, p)


def default_strategy(n: int, p: int) -> str:
    if p > n:
        return "sequential"
    if p == n:
        return "elementwise"
    return "modular"


def _check_args(n, l0, p):
    if n < 2:
        raise ValueError(f"need at least 2 qubits, got {n}")
    if l0 < 1 or p < 1:
        raise ValueError(f"l0 and p must be >= 1, got l0={l0}, p={p}")


def _random_block(n: int, rng: np.random.Generator) -> BlockSpec:
    even, odd = rng.integers(3, size=2)
    mask = rng.integers(2, size=n - 1).astype(bool)
    return BlockSpec(AXES[even], AXES[odd], tuple(mask))


def sample_layout(
    n: int,
    l0: int,
    p: int,
    strategy: str | None = None,
    rng: np.random.Generator | int | None = None,
) -> CircuitLayout:
    """Draw one layout uniformly from the block space and bind features."""
    _check_args(n, l0, p)
    rng = np.random.default_rng(rng)
    strategy = strategy or default_strategy(n, p)
    blocks = tuple(_random_block(n, rng) for _ in range(num_blocks(n, l0, p)))
    return assign_features(CircuitLayout(n, l0, p, blocks), strategy, p, rng)


def enumerate_block_space(
    n: int,
    l0: int,
    p: int,
    strategy: str | None = None,
    rng: np.random.Generator | int | None = None,
    limit: int = ENUMERATION_LIMIT,
) -> list[CircuitLayout]:
    """Every layout of the block space, in lexicographic block order."""
    _check_args(n, l0, p)
    count = block_space_size(n, l0, p)
    if count > limit:
        raise CapacityError(f"block space has {count} layouts, limit is {limit}")
    strategy = strategy or default_strategy(n, p)
    rng = np.random.default_rng(rng)
    single = [
        BlockSpec(a, b, mask)
        for a in AXES
        for b in AXES
        for mask in itertools.product((False, True), repeat=n - 1)
    ]
    return [
        assign_features(CircuitLayout(n, l0, p, combo), strategy, p, rng)
        for combo in itertools.product(single, repeat=num_blocks(n, l0, p))
    ]


def _check_strategy(strategy: str, n: int, p: int) -> None:
    allowed = {
        "sequential": p > n,
        "chain": p > n,
        "random": p >= n,
        "elementwise": p == n,
        "modular": p < n,
        "random_fill": p < n,
    }
    if strategy not in allowed:
        raise StrategyError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if not allowed[strategy]:
        raise StrategyError(f"strategy {strategy!r} not valid for p={p}, N={n}")


def _rotation_bindings(strategy, n, p, n_blocks, rng) -> list[Binding]:
    group = math.ceil(p / n)
    out = []
    if strategy == "random":
        # one layer's worth of slots, every feature used once before any repeats
        slots = group * n
        order = list(rng.permutation(p))
        if slots > p:
            order += list(rng.choice(p, size=slots - p, replace=False))
        layer = [Binding("feature", int(f)) for f in order]
        for b in range(n_blocks):
            out.extend(layer[(b % group) * n : (b % group + 1) * n])
        return out
    for b in range(n_blocks):
        col = b % group
        for q in range(n):
            if strategy == "sequential":
                out.append(Binding("feature", (col * n + q) % p))
            elif strategy == "chain":
                qq = q if col % 2 == 0 else n - 1 - q
                out.append(Binding("feature", (col * n + qq) % p))
            elif strategy == "elementwise":
                out.append(Binding("feature", q))
            elif strategy == "modular":
                out.append(Binding("feature", q % p))
            else:  # random_fill
                if q < p:
                    out.append(Binding("feature", q))
                else:
                    out.append(Binding("const", float(rng.uniform(0.0, 2 * np.pi))))
    return out


def assign_features(
    layout: CircuitLayout,
    strategy: str,
    p: int | None = None,
    rng: np.random.Generator | int | None = None,
) -> CircuitLayout:
    """Bind every encoding rotation of ``layout`` to a feature.

    Trainable-module gates (if any) receive consecutive parameter slots.
    """
    p = layout.p if p is None else p
    _check_strategy(strategy, layout.n, p)
    rng = np.random.default_rng(rng)
    rot = _rotation_bindings(strategy, layout.n, p, layout.num_blocks, rng)
    if not layout.trainable_modules:
        return replace(layout, p=p, bindings=tuple(rot))
    bindings = []
    j = 0
    for b in range(layout.num_blocks):
        bindings.extend(rot[b * layout.n : (b + 1) * layout.n])
        for _ in range(2 * layout.n):
            bindings.append(Binding("param", j))
            j += 1
    return replace(layout, p=p, bindings=tuple(bindings))


def max_promotions(layout: CircuitLayout) -> int:
    return layout.total_rotations // layout.l0 - 1


def promote_gates(
    layout: CircuitLayout,
    m: int,
    positions: Sequence[int] | np.random.Generator | int | None = None,
) -> CircuitLayout:
    """Turn ``m`` encoding rotations into trainable parameters.

    ``positions`` are rotation indices (block-major, then qubit).  When a
    generator or seed is passed instead, ``m`` distinct positions are drawn.
    New parameters are numbered after any existing ones, in position order.
    """
    upper = max_promotions(layout)
    if not 1 <= m <= upper:
        raise ValueError(f"m={m} outside [1, {upper}]")
    total = layout.total_rotations
    if positions is None or isinstance(positions, (np.random.Generator, int, np.integer)):
        rng = np.random.default_rng(positions)
        positions = rng.choice(total, size=m, replace=False)
    positions = [int(x) for x in positions]
    if len(set(positions)) != len(positions):
        raise ValueError(f"duplicate positions in {positions}")
    if len(positions) != m:
        raise ValueError(f"expected {m} positions, got {len(positions)}")
    if any(not 0 <= x < total for x in positions):
        raise IndexError(f"positions must lie in [0, {total})")
    bindings = list(layout.bindings)
    j = layout.num_params
    for pos in sorted(positions):
        bi = layout.rotation_binding_index[pos]
        old = bindings[bi]
        origin = old.value if old.kind == "feature" else old.origin
        bindings[bi] = Binding("param", j, origin)
        j += 1
    return replace(layout, bindings=tuple(bindings))


def bind_params(layout: CircuitLayout, theta) -> CircuitLayout:
    """Replace every parameter slot by a constant taken from ``theta``."""
    theta = np.asarray(theta, dtype=float)
    bindings = tuple(
        Binding("const", float(theta[b.value])) if b.kind == "param" else b
        for b in layout.bindings
    )
    return replace(layout, bindings=bindings)


def image_width(layout: CircuitLayout) -> int:
    return 2 * layout.num_blocks


def encode_image(layout: CircuitLayout, max_width: int | None = None) -> np.ndarray:
    """Binary image of shape ``(5, N, max_width)``.

    Column ``2b`` holds block ``b``'s rotations and column ``2b+1`` its CNOTs;
    columns past the circuit are zero padding.
    """
    if layout.trainable_modules:
        raise ValueError("image encoding is defined for plain HEA layouts only")
    width = image_width(layout)
    max_width = width if max_width is None else int(max_width)
    if width > max_width:
        raise CapacityError(f"layout width {width} exceeds max_width {max_width}")
    img = np.zeros((IMAGE_CHANNELS, layout.n, max_width), dtype=np.uint8)
    for b, block in enumerate(layout.blocks):
        for q in range(layout.n):
            axis = block.even_axis if q % 2 == 0 else block.odd_axis
            img[_CHANNEL["R" + axis], q, 2 * b] = 1
        for i, on in enumerate(block.mask):
            if on:
                img[3, i, 2 * b + 1] = 1
                img[4, i + 1, 2 * b + 1] = 1
    return img


def pool_max_width(layouts: Iterable[CircuitLayout]) -> int:
    return max(image_width(l) for l in layouts)


def heak_layout(n: int, p: int, l0: int = 1, trainable_modules: bool = False) -> CircuitLayout:
    """Fixed HEA kernel: RX rotations, full CNOT chain, sequential features."""
    blocks = tuple(
        BlockSpec("X", "X", (True,) * (n - 1)) for _ in range(num_blocks(n, l0, p))
    )
    layout = CircuitLayout(n, l0, p, blocks, trainable_modules=trainable_modules)
    return assign_features(layout, default_strategy(n, p), p)
