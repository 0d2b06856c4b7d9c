"""Synthetic request/budget traces and their JSON-lines file format.

Sequence lengths come from a two-mode log-normal mixture whose long-mode
weight changes with the phase of a simulated day. Batch sizes follow a
geometric law truncated to ``[1, max_batch]``. The available-memory fraction
is a bounded random walk with a sinusoidal drift; every step moves it by at
most ``budget_step``.

File format: one JSON object per line, ``{"t", "batch", "seq_len", "budget_frac"}``.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class TraceRecord:
    t: int
    batch_size: int
    seq_len: int
    budget_fraction: float

    def to_json(self) -> str:
        return json.dumps(
            {"t": self.t, "batch": self.batch_size, "seq_len": self.seq_len, "budget_frac": self.budget_fraction}
        )


@dataclass(frozen=True)
class TraceGenConfig:
    seed: int = 0
    count: int = 1000
    # length mixture (natural-log medians and spreads)
    short_log_mean: float = math.log(200.0)
    short_log_sd: float = 0.45
    long_log_mean: float = math.log(2800.0)
    long_log_sd: float = 0.3
    long_weights: tuple = (0.15, 0.5, 0.35)  # long-mode weight in each phase of a day
    records_per_day: int = 240
    min_seq: int = 16
    max_seq: int = 4096
    # batch law
    batch_p: float = 0.3
    max_batch: int = 16
    # available-memory walk
    budget_min: float = 0.5
    budget_max: float = 1.0
    budget_start: float = 0.75
    budget_step: float = 0.05
    diurnal_amplitude: float = 0.15

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not self.long_weights or any(not 0.0 <= w <= 1.0 for w in self.long_weights):
            raise ValueError("long_weights must be probabilities")
        if self.records_per_day < len(self.long_weights):
            raise ValueError("records_per_day must be >= number of phases")
        if not 1 <= self.min_seq <= self.max_seq:
            raise ValueError("need 1 <= min_seq <= max_seq")
        if not 0.0 < self.batch_p <= 1.0 or self.max_batch < 1:
            raise ValueError("need 0 < batch_p <= 1 and max_batch >= 1")
        if not 0.0 < self.budget_min <= self.budget_max <= 1.0:
            raise ValueError("budget walk bounds must satisfy 0 < min <= max <= 1")
        if not self.budget_min <= self.budget_start <= self.budget_max:
            raise ValueError("budget_start must lie within the walk bounds")
        if self.budget_step < 0 or self.diurnal_amplitude < 0:
            raise ValueError("budget_step and diurnal_amplitude must be >= 0")
        if self.short_log_sd < 0 or self.long_log_sd < 0:
            raise ValueError("log spreads must be >= 0")

    def phase_of(self, t: int) -> int:
        per_phase = self.records_per_day / len(self.long_weights)
        return int((t % self.records_per_day) // per_phase)


def generate(cfg: TraceGenConfig) -> Iterator[TraceRecord]:
    rng = np.random.default_rng(cfg.seed)
    ks = np.arange(1, cfg.max_batch + 1)
    batch_pmf = cfg.batch_p * (1.0 - cfg.batch_p) ** (ks - 1)
    batch_pmf /= batch_pmf.sum()
    omega = 2.0 * math.pi / cfg.records_per_day
    budget = cfg.budget_start
    for t in range(cfg.count):
        if t > 0:
            drift = cfg.diurnal_amplitude * omega * math.cos(omega * t)
            delta = drift + rng.uniform(-cfg.budget_step, cfg.budget_step)
            delta = min(max(delta, -cfg.budget_step), cfg.budget_step)
            budget = min(max(budget + delta, cfg.budget_min), cfg.budget_max)
        long_mode = rng.random() < cfg.long_weights[cfg.phase_of(t)]
        mu, sd = (cfg.long_log_mean, cfg.long_log_sd) if long_mode else (cfg.short_log_mean, cfg.short_log_sd)
        seq_len = int(round(math.exp(rng.normal(mu, sd))))
        seq_len = min(max(seq_len, cfg.min_seq), cfg.max_seq)
        batch = int(rng.choice(ks, p=batch_pmf))
        yield TraceRecord(t, batch, seq_len, float(budget))


def _validate(rec: dict, lineno: int) -> TraceRecord:
    missing = {"t", "batch", "seq_len", "budget_frac"} - rec.keys()
    if missing:
        raise TraceFormatError(lineno, f"missing keys {sorted(missing)}")
    for key in ("t", "batch", "seq_len"):
        if not isinstance(rec[key], int) or isinstance(rec[key], bool):
            raise TraceFormatError(lineno, f"{key} must be an integer, got {rec[key]!r}")
    if rec["t"] < 0:
        raise TraceFormatError(lineno, "t must be >= 0")
    if rec["batch"] < 1 or rec["seq_len"] < 1:
        raise TraceFormatError(lineno, "batch and seq_len must be >= 1")
    frac = rec["budget_frac"]
    if not isinstance(frac, (int, float)) or isinstance(frac, bool) or not 0.0 < frac <= 1.0:
        raise TraceFormatError(lineno, f"budget_frac must be in (0, 1], got {frac!r}")
    return TraceRecord(rec["t"], rec["batch"], rec["seq_len"], float(frac))


def parse_lines(lines: Iterable[str]) -> Iterator[TraceRecord]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise TraceFormatError(lineno, "expected a JSON object")
        yield _validate(rec, lineno)


def load(path) -> Iterator[TraceRecord]:
    with open(path) as fh:
        yield from parse_lines(fh)


def write(records: Iterable[TraceRecord], fh) -> int:
    n = 0
    for rec in records:
        fh.write(rec.to_json() + "\n")
        n += 1
    return n


def load_gen_config(path, **overrides) -> TraceGenConfig:
    """Read a ``[trace]`` INI section; keys match :class:`TraceGenConfig` fields."""
    kwargs = {}
    if path is not None:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not cp.read(path):
            raise FileNotFoundError(path)
        if cp.has_section("trace"):
            kwargs = _coerce(dict(cp["trace"]))
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TraceGenConfig(**kwargs)


def _coerce(raw: dict) -> dict:
    types = {f.name: f.type for f in fields(TraceGenConfig)}
    out = {}
    for key, val in raw.items():
        if key not in types:
            raise ValueError(f"unknown trace option {key!r}")
        kind = types[key]
        if kind == "int":
            out[key] = int(val)
        elif kind == "float":
            out[key] = float(val)
        else:
            out[key] = tuple(float(v) for v in val.replace(",", " ").split())
    return out
