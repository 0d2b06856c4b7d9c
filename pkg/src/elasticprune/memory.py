"""Byte-exact accounting of parameter memory and KV-cache memory.

A model is a stack of ``n_layers`` decoder layers, each holding one MHA block
and one FFN block. Blocks are addressed in canonical order
``(layer asc, MHA before FFN)`` so block ``i`` lives in layer ``i // 2`` and is
an FFN block iff ``i`` is odd. A retention mask is a boolean vector over that
order (``True`` = retained).

All byte quantities are Python integers. Results above ``INT64_MAX`` raise
``OverflowError`` so they stay representable in CSV consumers and checkpoints.
"""

from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

INT64_MAX = 2**63 - 1
GIB = 2**30
GB = 10**9
_VALID_ELEMENT_BYTES = (1, 2, 4, 8)


class DimensionError(ValueError):
    """A retention mask does not match the model it is applied to."""


class BlockKind(enum.IntEnum):
    MHA = 0
    FFN = 1


class BlockId(NamedTuple):
    layer: int
    kind: BlockKind

    @property
    def index(self) -> int:
        return 2 * self.layer + int(self.kind)

    @classmethod
    def from_index(cls, index: int) -> "BlockId":
        return cls(int(index) // 2, BlockKind(int(index) % 2))

    def __str__(self):
        return f"{self.layer}:{self.kind.name}"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_layers: int
    n_heads: int
    d_head: int
    bytes_per_element: int
    mha_params: int
    ffn_params: int
    other_params: int
    overhead_bytes: int = 0

    def __post_init__(self):
        for field in ("n_layers", "n_heads", "d_head"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.bytes_per_element not in _VALID_ELEMENT_BYTES:
            raise ValueError(
                f"bytes_per_element must be one of {_VALID_ELEMENT_BYTES}, "
                f"got {self.bytes_per_element}"
            )
        for field in ("mha_params", "ffn_params", "other_params", "overhead_bytes"):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be >= 0, got {getattr(self, field)}")

    @property
    def n_blocks(self) -> int:
        return 2 * self.n_layers

    @property
    def total_params(self) -> int:
        return self.other_params + self.n_layers * (self.mha_params + self.ffn_params)

    @property
    def prunable_param_bytes(self) -> int:
        return self.n_layers * (self.mha_params + self.ffn_params) * self.bytes_per_element

    def block_param_bytes(self, index: int) -> int:
        params = self.ffn_params if index % 2 else self.mha_params
        return params * self.bytes_per_element

    def kv_bytes_per_token_per_layer(self) -> int:
        # K and V for one attention layer
        return 2 * self.n_heads * self.d_head * self.bytes_per_element


class Request(NamedTuple):
    batch_size: int
    seq_len: int


def check_request(req: Request) -> None:
    if req.batch_size < 1 or req.seq_len < 1:
        raise ValueError(f"batch_size and seq_len must be >= 1, got {tuple(req)}")


def block_ids(spec: ModelSpec) -> list[BlockId]:
    return [BlockId.from_index(i) for i in range(spec.n_blocks)]


def full_mask(spec: ModelSpec) -> np.ndarray:
    return np.ones(spec.n_blocks, dtype=bool)


def empty_mask(spec: ModelSpec) -> np.ndarray:
    return np.zeros(spec.n_blocks, dtype=bool)


def mask_from_pruned(spec: ModelSpec, pruned) -> np.ndarray:
    mask = full_mask(spec)
    for b in pruned:
        mask[b.index if isinstance(b, BlockId) else int(b)] = False
    return mask


def _check_mask(spec: ModelSpec, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (spec.n_blocks,):
        raise DimensionError(
            f"mask has shape {mask.shape}, model {spec.name!r} has {spec.n_blocks} blocks"
        )
    return mask


def _checked(value: int, what: str) -> int:
    if value > INT64_MAX:
        raise OverflowError(f"{what} = {value} bytes exceeds int64 range")
    return value


def retained_counts(spec: ModelSpec, mask) -> tuple[int, int]:
    """(retained MHA blocks, retained FFN blocks)."""
    mask = _check_mask(spec, mask)
    return int(mask[0::2].sum()), int(mask[1::2].sum())


def kv_bytes_per_token(spec: ModelSpec, mask) -> int:
    n_mha, _ = retained_counts(spec, mask)
    return _checked(n_mha * spec.kv_bytes_per_token_per_layer(), "kv_bytes_per_token")


def kv_bytes_total(spec: ModelSpec, mask, req: Request) -> int:
    check_request(req)
    per_token = kv_bytes_per_token(spec, mask)
    return _checked(per_token * int(req.batch_size) * int(req.seq_len), "kv_bytes_total")


def param_bytes(spec: ModelSpec, mask) -> int:
    n_mha, n_ffn = retained_counts(spec, mask)
    params = spec.other_params + n_mha * spec.mha_params + n_ffn * spec.ffn_params
    return _checked(params * spec.bytes_per_element, "param_bytes")


def peak_memory(spec: ModelSpec, mask, req: Request) -> int:
    total = param_bytes(spec, mask) + kv_bytes_total(spec, mask, req) + spec.overhead_bytes
    return _checked(total, "peak_memory")


def block_memory_bytes(spec: ModelSpec, req: Request, index: int) -> int:
    """Bytes freed by pruning block ``index``: its parameters plus, for MHA, its KV slice."""
    nbytes = spec.block_param_bytes(index)
    if index % 2 == 0:
        nbytes += spec.kv_bytes_per_token_per_layer() * int(req.batch_size) * int(req.seq_len)
    return _checked(nbytes, "block memory")


def fixed_bytes(spec: ModelSpec) -> int:
    """Bytes no pruning can remove."""
    return spec.other_params * spec.bytes_per_element + spec.overhead_bytes


def format_bytes(nbytes: int) -> str:
    return f"{nbytes / GIB:.3f} GiB ({nbytes / GB:.3f} GB)"


# --- config files -------------------------------------------------------

_INT_FIELDS = (
    "n_layers",
    "n_heads",
    "d_head",
    "bytes_per_element",
    "mha_params",
    "ffn_params",
    "other_params",
    "overhead_bytes",
)

BUNDLED_SPECS = ("llama2-7b-like", "toy-4x2")


def parse_spec(text: str, source: str = "<string>") -> ModelSpec:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text, source=source)
    if "model" not in cp:
        raise ValueError(f"{source}: missing [model] section")
    sec = cp["model"]
    kwargs = {"name": sec.get("name", Path(source).stem)}
    for field in _INT_FIELDS:
        if field not in sec:
            if field == "overhead_bytes":
                continue
            raise ValueError(f"{source}: missing key {field!r}")
        try:
            kwargs[field] = int(sec[field].replace("_", ""))
        except ValueError:
            raise ValueError(f"{source}: {field} must be an integer, got {sec[field]!r}") from None
    return ModelSpec(**kwargs)


def load_spec(name_or_path) -> ModelSpec:
    """Load a bundled spec by name or a spec file by path."""
    if str(name_or_path) in BUNDLED_SPECS:
        ref = resources.files("elasticprune.data").joinpath(f"{name_or_path}.ini")
        return parse_spec(ref.read_text(), source=str(name_or_path))
    path = Path(name_or_path)
    return parse_spec(path.read_text(), source=str(path))


def dump_spec(spec: ModelSpec) -> str:
    lines = ["[model]", f"name = {spec.name}"]
    lines += [f"{field} = {getattr(spec, field)}" for field in _INT_FIELDS]
    return "\n".join(lines) + "\n"
