"""Greedy sequential importance scoring.

``gsi_run`` removes, one block at a time, the block whose removal gives the
lowest perplexity on the current (already pruned) model and re-scores all
survivors after every removal. ``one_shot_rank`` is the static baseline that
scores every block against the intact model once.

Importance tables are built offline per sequence-length bucket and cached to
CSV; the pruning environment only reads the cache.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import BlockId, BlockKind, ModelSpec, Request, block_memory_bytes, full_mask

IMPORTANCE_FLOOR = 1e-9
CACHE_VERSION = 1


class DegenerateConfigError(ValueError):
    pass


class CoverageError(ValueError):
    pass


class StaleCacheError(ValueError):
    pass


@dataclass(frozen=True)
class GsiConfig:
    target_prune_ratio: float
    seq_len: int

    def __post_init__(self):
        if not 0.0 <= self.target_prune_ratio <= 1.0:
            raise ValueError(f"target_prune_ratio must be in [0, 1], got {self.target_prune_ratio}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")


@dataclass
class GsiTrace:
    start_ppl: float
    removed: list = field(default_factory=list)
    ppl_after: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.removed) != len(self.ppl_after):
            raise ValueError("removed and ppl_after must have equal length")


def _prune_ratio(spec, pruned_bytes):
    return pruned_bytes / spec.prunable_param_bytes


def gsi_run(oracle, spec: ModelSpec, cfg: GsiConfig) -> GsiTrace:
    if spec.n_blocks != oracle.n_blocks:
        raise ValueError(f"oracle has {oracle.n_blocks} blocks, spec {spec.n_blocks}")
    if cfg.target_prune_ratio > 0 and spec.prunable_param_bytes == 0:
        raise DegenerateConfigError(f"{spec.name}: no prunable parameters, prune ratio is undefined")
    mask = full_mask(spec)
    trace = GsiTrace(start_ppl=float(oracle.evaluate(mask, cfg.seq_len)))
    pruned_bytes = 0
    while cfg.target_prune_ratio > 0 and _prune_ratio(spec, pruned_bytes) < cfg.target_prune_ratio:
        candidates = np.flatnonzero(mask)
        if candidates.size == 0:
            break
        best, best_ppl = -1, math.inf
        for i in candidates:
            mask[i] = False
            ppl = float(oracle.evaluate(mask, cfg.seq_len))
            mask[i] = True
            # strict '<' keeps the lowest canonical index on ties
            if ppl < best_ppl or best < 0:
                best, best_ppl = int(i), ppl
        mask[best] = False
        pruned_bytes += spec.block_param_bytes(best)
        trace.removed.append(BlockId.from_index(best))
        trace.ppl_after.append(best_ppl)
    return trace


def one_shot_rank(oracle, spec: ModelSpec | None, seq_len: int) -> list[BlockId]:
    """Blocks by ascending single-removal perplexity against the intact model."""
    n = oracle.n_blocks
    if spec is not None and spec.n_blocks != n:
        raise ValueError(f"oracle has {n} blocks, spec {spec.n_blocks}")
    mask = np.ones(n, dtype=bool)
    scores = np.empty(n)
    for i in range(n):
        mask[i] = False
        scores[i] = oracle.evaluate(mask, seq_len)
        mask[i] = True
    order = np.argsort(scores, kind="stable")
    return [BlockId.from_index(i) for i in order]


def importance_from_trace(trace: GsiTrace, n_blocks: int) -> np.ndarray:
    """Per-block share of the sequential log-perplexity increase."""
    seen = sorted(b.index for b in trace.removed)
    if seen != list(range(n_blocks)):
        raise CoverageError(f"trace removes {len(set(seen))} of {n_blocks} blocks; build tables with ratio 1")
    i_ppl = np.empty(n_blocks)
    prev = math.log(trace.start_ppl)
    for blk, ppl in zip(trace.removed, trace.ppl_after):
        cur = math.log(ppl)
        i_ppl[blk.index] = max(cur - prev, IMPORTANCE_FLOOR)
        prev = cur
    return i_ppl / i_ppl.sum()


def memory_importance(spec: ModelSpec, req: Request, block: BlockId) -> int:
    return block_memory_bytes(spec, req, block.index)


def memory_importance_vector(spec: ModelSpec, req: Request) -> np.ndarray:
    return np.array([block_memory_bytes(spec, req, i) for i in range(spec.n_blocks)], dtype=np.int64)


# --- tables ----------------------------------------------------------------


@dataclass
class ImportanceTable:
    """Per-bucket importance and pruning orders for one (model, oracle) pair."""

    i_ppl: np.ndarray  # (n_blocks, n_buckets), columns sum to 1
    gsi_order: np.ndarray  # (n_buckets, n_blocks) block indices in removal order
    oneshot_order: np.ndarray  # (n_buckets, n_blocks)
    buckets: tuple
    checksum: str = ""
    model_name: str = ""

    @property
    def n_blocks(self) -> int:
        return self.i_ppl.shape[0]

    def bucket_of(self, seq_len: int) -> int:
        return bisect.bisect_left(self.buckets, int(seq_len))

    def column(self, seq_len: int) -> np.ndarray:
        return self.i_ppl[:, self.bucket_of(seq_len)]


def build_importance_table(oracle, spec: ModelSpec, seq_lens=None) -> ImportanceTable:
    """Run full-depth GSI and one-shot ranking once per bucket."""
    buckets = tuple(getattr(oracle, "buckets", ()))
    if seq_lens is None:
        seq_lens = oracle.representative_seq_lens()
    if len(seq_lens) != len(buckets) + 1:
        raise ValueError(f"need one sequence length per bucket ({len(buckets) + 1})")
    cols, gsi_orders, os_orders = [], [], []
    for seq_len in seq_lens:
        trace = gsi_run(oracle, spec, GsiConfig(1.0, seq_len))
        cols.append(importance_from_trace(trace, spec.n_blocks))
        gsi_orders.append([b.index for b in trace.removed])
        os_orders.append([b.index for b in one_shot_rank(oracle, spec, seq_len)])
    checksum = oracle.checksum() if hasattr(oracle, "checksum") else ""
    return ImportanceTable(
        i_ppl=np.column_stack(cols),
        gsi_order=np.array(gsi_orders, dtype=np.int64),
        oneshot_order=np.array(os_orders, dtype=np.int64),
        buckets=buckets,
        checksum=checksum,
        model_name=spec.name,
    )


def dumps_importance(table: ImportanceTable) -> str:
    buf = io.StringIO()
    buf.write(f"# elasticprune importance cache v{CACHE_VERSION}\n")
    buf.write(f"# surrogate_sha256={table.checksum}\n")
    buf.write(f"# model={table.model_name}\n")
    buf.write(f"# buckets={','.join(str(b) for b in table.buckets)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "bucket", "i_ppl", "gsi_step", "oneshot_rank"])
    n_buckets = len(table.buckets) + 1
    gsi_step = np.empty((n_buckets, table.n_blocks), dtype=np.int64)
    os_rank = np.empty_like(gsi_step)
    for b in range(n_buckets):
        gsi_step[b, table.gsi_order[b]] = np.arange(table.n_blocks)
        os_rank[b, table.oneshot_order[b]] = np.arange(table.n_blocks)
    for i in range(table.n_blocks):
        blk = BlockId.from_index(i)
        for b in range(n_buckets):
            w.writerow([blk.layer, blk.kind.name, b, repr(float(table.i_ppl[i, b])), gsi_step[b, i], os_rank[b, i]])
    return buf.getvalue()


def save_importance(table: ImportanceTable, path) -> None:
    Path(path).write_text(dumps_importance(table))


def load_importance(path, expected_checksum: str | None = None) -> ImportanceTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"importance cache {path} not found; run 'elasticprune gsi-build' first")
    meta = {}
    body = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                meta[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    checksum = meta.get("surrogate_sha256", "")
    if expected_checksum is not None and checksum != expected_checksum:
        raise StaleCacheError(
            f"{path} was built for surrogate {checksum[:12]}..., current is {expected_checksum[:12]}...; "
            "rerun 'elasticprune gsi-build'"
        )
    buckets = tuple(int(b) for b in meta.get("buckets", "").split(",") if b)
    rows = list(csv.DictReader(body))
    n_buckets = len(buckets) + 1
    n_blocks = len(rows) // n_buckets
    if n_blocks * n_buckets != len(rows) or n_blocks == 0:
        raise ValueError(f"{path}: expected {n_buckets} rows per block, got {len(rows)} rows")
    i_ppl = np.zeros((n_blocks, n_buckets))
    gsi_order = np.zeros((n_buckets, n_blocks), dtype=np.int64)
    os_order = np.zeros_like(gsi_order)
    for r in rows:
        i = BlockId(int(r["layer"]), BlockKind[r["kind"]]).index
        b = int(r["bucket"])
        i_ppl[i, b] = float(r["i_ppl"])
        gsi_order[b, int(r["gsi_step"])] = i
        os_order[b, int(r["oneshot_rank"])] = i
    return ImportanceTable(i_ppl, gsi_order, os_order, buckets, checksum, meta.get("model", ""))
