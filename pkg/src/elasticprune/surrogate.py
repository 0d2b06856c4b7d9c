"""Table-driven perplexity oracle.

The surrogate log-perplexity of a pruned configuration is

    base_log_ppl + sum(unary[i, b] for pruned i) + sum(pair[i, j, b] for pruned pairs)

where ``b`` is the sequence-length bucket of the request. Pair terms couple
blocks so that the cost of removing a block depends on what is already gone,
which is what makes one-shot scoring and greedy sequential scoring disagree.
"""

from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from . import kernels
from .memory import BlockId, BlockKind, DimensionError, ModelSpec

DEFAULT_BUCKETS = (512, 2048)


class SurrogateConfigError(ValueError):
    pass


@runtime_checkable
class PerplexityOracle(Protocol):
    n_blocks: int

    def evaluate(self, mask, seq_len: int) -> float: ...


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    base_log_ppl: float
    unary: np.ndarray  # (n_blocks, n_buckets)
    pair_index: np.ndarray  # (n_pairs, 2), i < j, sorted
    pair_cost: np.ndarray  # (n_pairs, n_buckets)
    buckets: tuple = DEFAULT_BUCKETS
    _unary_by_bucket: np.ndarray = field(init=False, repr=False)
    _pair_by_bucket: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        unary = np.asarray(self.unary, dtype=np.float64)
        pairs = np.asarray(self.pair_index, dtype=np.int64).reshape(-1, 2)
        buckets = tuple(int(b) for b in self.buckets)
        n_buckets = len(buckets) + 1
        pcost = np.asarray(self.pair_cost, dtype=np.float64)
        if pcost.size == 0:
            pcost = pcost.reshape(0, n_buckets)
        if list(buckets) != sorted(set(buckets)) or (buckets and buckets[0] < 1):
            raise SurrogateConfigError(f"bucket thresholds must be strictly increasing: {buckets}")
        if unary.ndim != 2 or unary.shape[1] != n_buckets:
            raise SurrogateConfigError(
                f"unary table must be (n_blocks, {n_buckets}), got {unary.shape}"
            )
        if pcost.shape != (len(pairs), n_buckets):
            raise SurrogateConfigError(f"pair cost table must be ({len(pairs)}, {n_buckets})")
        if not np.all(np.isfinite(unary)) or not np.all(np.isfinite(pcost)):
            raise SurrogateConfigError("costs must be finite")
        bad = np.argwhere(unary < 0)
        if bad.size:
            i, b = bad[0]
            raise SurrogateConfigError(
                f"unary cost for block {BlockId.from_index(i)} bucket {b} is negative: {unary[i, b]}"
            )
        n = unary.shape[0]
        seen = set()
        for k, (i, j) in enumerate(pairs.tolist()):
            if not (0 <= i < j < n):
                raise SurrogateConfigError(f"pair {k} ({i}, {j}) is not a canonical in-range pair")
            if (i, j) in seen:
                raise SurrogateConfigError(
                    f"duplicate pair {BlockId.from_index(i)} / {BlockId.from_index(j)}"
                )
            seen.add((i, j))
        if np.any(pcost < 0):
            k, b = np.argwhere(pcost < 0)[0]
            i, j = pairs[k]
            raise SurrogateConfigError(
                f"pair cost {BlockId.from_index(i)} / {BlockId.from_index(j)} bucket {b} is negative"
            )
        order = np.lexsort((pairs[:, 1], pairs[:, 0])) if len(pairs) else np.arange(0)
        pairs, pcost = pairs[order], pcost[order]
        setattr_ = object.__setattr__
        setattr_(self, "base_log_ppl", float(self.base_log_ppl))
        setattr_(self, "unary", _frozen(unary, np.float64))
        setattr_(self, "pair_index", _frozen(pairs, np.int64))
        setattr_(self, "pair_cost", _frozen(pcost, np.float64))
        setattr_(self, "buckets", buckets)
        setattr_(self, "_unary_by_bucket", _frozen(unary.T, np.float64))
        setattr_(self, "_pair_by_bucket", _frozen(pcost.T, np.float64))
        setattr_(self, "_pair_a", _frozen(pairs[:, 0], np.int64))
        setattr_(self, "_pair_b", _frozen(pairs[:, 1], np.int64))

    @property
    def n_blocks(self) -> int:
        return self.unary.shape[0]

    @property
    def n_buckets(self) -> int:
        return len(self.buckets) + 1

    def bucket_of(self, seq_len: int) -> int:
        """Bucket index; thresholds are inclusive upper bounds (512 -> short)."""
        return bisect.bisect_left(self.buckets, int(seq_len))

    def representative_seq_lens(self) -> list[int]:
        """One sequence length inside each bucket, used to build importance tables."""
        if not self.buckets:
            return [1]
        return list(self.buckets) + [2 * self.buckets[-1]]

    def _pruned(self, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_blocks,):
            raise DimensionError(f"mask has shape {mask.shape}, surrogate has {self.n_blocks} blocks")
        return ~mask

    def log_ppl(self, mask, seq_len: int) -> float:
        if seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {seq_len}")
        b = self.bucket_of(seq_len)
        return kernels.surrogate_log_ppl(
            self.base_log_ppl,
            self._unary_by_bucket[b],
            self._pair_a,
            self._pair_b,
            self._pair_by_bucket[b],
            self._pruned(mask),
        )

    def evaluate(self, mask, seq_len: int) -> float:
        return math.exp(self.log_ppl(mask, seq_len))

    def is_additive(self) -> bool:
        return not np.any(self.pair_cost > 0)

    def dumps(self, header: str = "") -> str:
        lines = [f"# {ln}" if ln else "#" for ln in header.splitlines()]
        lines.append(f"blocks {self.n_blocks}")
        lines.append("buckets " + " ".join(str(b) for b in self.buckets))
        lines.append(f"base_log_ppl {self.base_log_ppl!r}")
        for i in range(self.n_blocks):
            blk = BlockId.from_index(i)
            for b in range(self.n_buckets):
                lines.append(f"unary {blk.layer} {blk.kind.name} {b} {float(self.unary[i, b])!r}")
        for k, (i, j) in enumerate(self.pair_index.tolist()):
            bi, bj = BlockId.from_index(i), BlockId.from_index(j)
            for b in range(self.n_buckets):
                lines.append(
                    f"pair {bi.layer} {bi.kind.name} {bj.layer} {bj.kind.name} {b} "
                    f"{float(self.pair_cost[k, b])!r}"
                )
        return "\n".join(lines) + "\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


# --- file format -----------------------------------------------------------


def _parse_block(layer, kind, n_blocks, lineno):
    try:
        blk = BlockId(int(layer), BlockKind[kind.upper()])
    except (ValueError, KeyError):
        raise SurrogateConfigError(f"line {lineno}: bad block '{layer} {kind}'") from None
    if not 0 <= blk.index < n_blocks:
        raise SurrogateConfigError(f"line {lineno}: unknown block {blk} for {n_blocks}-block model")
    return blk.index


def parse_surrogate(text: str, source: str = "<string>") -> SurrogateModel:
    n_blocks = None
    buckets = DEFAULT_BUCKETS
    base = None
    unary_rows = {}
    pair_rows = {}

    def fail(lineno, msg):
        raise SurrogateConfigError(f"{source}:{lineno}: {msg}")

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0]
        try:
            if key == "blocks":
                n_blocks = int(tok[1])
            elif key == "buckets":
                buckets = tuple(int(t) for t in tok[1:])
            elif key == "base_log_ppl":
                base = float(tok[1])
            elif key == "unary":
                if n_blocks is None:
                    fail(lineno, "'blocks' header must precede cost rows")
                if len(tok) != 5:
                    fail(lineno, "expected 'unary layer kind bucket cost'")
                i = _parse_block(tok[1], tok[2], n_blocks, lineno)
                slot = (i, int(tok[3]))
                if slot in unary_rows:
                    fail(lineno, f"duplicate unary row for block {BlockId.from_index(i)} bucket {slot[1]}")
                unary_rows[slot] = float(tok[4])
            elif key == "pair":
                if n_blocks is None:
                    fail(lineno, "'blocks' header must precede cost rows")
                if len(tok) != 7:
                    fail(lineno, "expected 'pair layerA kindA layerB kindB bucket cost'")
                i = _parse_block(tok[1], tok[2], n_blocks, lineno)
                j = _parse_block(tok[3], tok[4], n_blocks, lineno)
                if i == j:
                    fail(lineno, "a pair needs two distinct blocks")
                slot = (min(i, j), max(i, j), int(tok[5]))
                if slot in pair_rows:
                    fail(lineno, "duplicate pair row")
                pair_rows[slot] = float(tok[6])
            else:
                fail(lineno, f"unknown record type {key!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, SurrogateConfigError):
                raise
            fail(lineno, f"cannot parse {raw.strip()!r}")

    if n_blocks is None or base is None:
        raise SurrogateConfigError(f"{source}: missing 'blocks' or 'base_log_ppl' header")
    n_buckets = len(buckets) + 1
    unary = np.zeros((n_blocks, n_buckets))
    for (i, b), cost in unary_rows.items():
        if not 0 <= b < n_buckets:
            raise SurrogateConfigError(f"{source}: bucket {b} out of range")
        unary[i, b] = cost
    missing = [(i, b) for i in range(n_blocks) for b in range(n_buckets) if (i, b) not in unary_rows]
    if missing:
        i, b = missing[0]
        raise SurrogateConfigError(
            f"{source}: no unary cost for block {BlockId.from_index(i)} bucket {b}"
        )
    keys = sorted({(i, j) for i, j, _ in pair_rows})
    pcost = np.zeros((len(keys), n_buckets))
    for k, (i, j) in enumerate(keys):
        for b in range(n_buckets):
            pcost[k, b] = pair_rows.get((i, j, b), 0.0)
    if any(not 0 <= b < n_buckets for _, _, b in pair_rows):
        raise SurrogateConfigError(f"{source}: pair bucket out of range")
    try:
        return SurrogateModel(base, unary, np.array(keys, dtype=np.int64).reshape(-1, 2), pcost, buckets)
    except SurrogateConfigError as exc:
        raise SurrogateConfigError(f"{source}: {exc}") from None


BUNDLED_SURROGATES = ("default-64block",)


def load_surrogate(path) -> SurrogateModel:
    if str(path) in BUNDLED_SURROGATES:
        ref = resources.files("elasticprune.data").joinpath(f"{path}.surrogate")
        return parse_surrogate(ref.read_text(), source=str(path))
    path = Path(path)
    return parse_surrogate(path.read_text(), source=str(path))


def save_surrogate(model: SurrogateModel, path, header: str = "") -> None:
    Path(path).write_text(model.dumps(header))


# --- generator -------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateParams:
    """Knobs for :func:`gen_surrogate`. All values are synthetic."""

    base_ppl: float = 6.0
    mha_scale: float = 0.03
    ffn_scale: float = 0.05
    edge_boost: float = 3.0  # extra cost multiplier at the first/last layers
    edge_width: float = 1.5  # decay length (layers) of the edge boost
    noise_sigma: float = 0.5  # log-normal spread of unary costs
    mha_bucket_growth: float = 1.6  # MHA cost multiplier per longer bucket
    pair_fraction: float = 0.3
    pair_scale: float = 0.08
    buckets: tuple = DEFAULT_BUCKETS

    def __post_init__(self):
        if not 0.0 <= self.pair_fraction <= 1.0:
            raise ValueError("pair_fraction must be in [0, 1]")
        for name in ("base_ppl", "mha_scale", "ffn_scale", "edge_width", "mha_bucket_growth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("edge_boost", "noise_sigma", "pair_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def pair_candidates(n_layers: int) -> list[tuple[int, int]]:
    """Block pairs eligible for coupling: same layer, or adjacent layers."""
    out = []
    for layer in range(n_layers):
        m, f = 2 * layer, 2 * layer + 1
        out.append((m, f))
        if layer + 1 < n_layers:
            m2, f2 = m + 2, f + 2
            out += [(m, m2), (m, f2), (f, m2), (f, f2)]
    return sorted(out)


def gen_surrogate(spec: ModelSpec, seed: int, params: SurrogateParams | None = None) -> SurrogateModel:
    """Random surrogate with layer-heterogeneous, length-dependent block costs."""
    params = params or SurrogateParams()
    rng = np.random.default_rng(seed)
    n = spec.n_layers
    n_buckets = len(params.buckets) + 1
    layers = np.arange(n)
    profile = 1.0 + params.edge_boost * (
        np.exp(-layers / params.edge_width) + np.exp(-(n - 1 - layers) / params.edge_width)
    )
    unary = np.empty((2 * n, n_buckets))
    noise = rng.lognormal(0.0, params.noise_sigma, size=(2 * n, n_buckets))
    growth = params.mha_bucket_growth ** np.arange(n_buckets)
    unary[0::2] = params.mha_scale * profile[:, None] * growth[None, :] * noise[0::2]
    unary[1::2] = params.ffn_scale * profile[:, None] * noise[1::2]

    cands = pair_candidates(n)
    k = int(round(params.pair_fraction * len(cands)))
    chosen = sorted(rng.choice(len(cands), size=k, replace=False).tolist()) if k else []
    pairs = np.array([cands[c] for c in chosen], dtype=np.int64).reshape(-1, 2)
    pcost = params.pair_scale * rng.lognormal(0.0, params.noise_sigma, size=(len(pairs), 1))
    pcost = pcost * rng.uniform(0.8, 1.25, size=(len(pairs), n_buckets))
    return SurrogateModel(math.log(params.base_ppl), unary, pairs, pcost, params.buckets)
