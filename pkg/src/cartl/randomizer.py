"""Covariate-adaptive treatment assignment.

Assignments are functions of the stratum labels and a seed only; outcomes and
covariates never enter. Each stratum draws from its own substream keyed by the
stratum id, so the arms given to stratum ``k`` do not depend on how units of
other strata are interleaved with it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _rng
from .errors import ConfigError

PROCEDURES = ("stratified-block", "stratified-biased-coin", "simple")


@dataclass(frozen=True)
class AllocationSpec:
    """Per-stratum allocation ratios and block sizes.

    ``ratios[k-1]`` holds the positive integer ratio of arms ``0..A`` in
    stratum ``k``; ``block_size[k-1]`` must be a multiple of its sum for the
    stratified-block procedure.
    """

    ratios: tuple
    block_size: tuple
    procedure: str = "stratified-block"
    bias: float = 2.0 / 3.0

    def __post_init__(self):
        ratios = tuple(tuple(int(v) for v in r) for r in self.ratios)
        if not ratios:
            raise ConfigError("ratios must list at least one stratum")
        n_arms = len(ratios[0])
        if n_arms < 2:
            raise ConfigError("need at least two arms")
        for r in ratios:
            if len(r) != n_arms:
                raise ConfigError("every stratum must list the same number of arms")
            if min(r) <= 0:
                raise ConfigError(f"ratio entries must be positive, got {list(r)}")
        bs = self.block_size
        if np.isscalar(bs):
            bs = (bs,) * len(ratios)
        bs = tuple(int(b) for b in bs)
        if len(bs) != len(ratios):
            raise ConfigError("block_size must be a scalar or one entry per stratum")
        if self.procedure not in PROCEDURES:
            raise ConfigError(f"unknown procedure {self.procedure!r}; expected one of {PROCEDURES}")
        if self.procedure == "stratified-block":
            for r, b in zip(ratios, bs):
                if b <= 0 or b % sum(r):
                    raise ConfigError(f"block size {b} is not a positive multiple of ratio sum {sum(r)}")
        if self.procedure == "stratified-biased-coin" and not 0.5 < float(self.bias) <= 1.0:
            raise ConfigError(f"bias must lie in (0.5, 1], got {self.bias}")
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "block_size", bs)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def n_strata(self) -> int:
        return len(self.ratios)

    @property
    def n_arms(self) -> int:
        """Number of treatment arms A (control excluded)."""
        return len(self.ratios[0]) - 1

    def pi(self, k: int) -> np.ndarray:
        r = np.asarray(self.ratios[k - 1], dtype=float)
        return r / r.sum()

    @classmethod
    def uniform(cls, n_strata=2, n_arms=2, block_size=6, procedure="stratified-block", bias=2 / 3):
        return cls(ratios=((1,) * (n_arms + 1),) * n_strata, block_size=block_size,
                   procedure=procedure, bias=bias)

    @classmethod
    def from_dict(cls, cfg: dict, n_strata: int = None) -> "AllocationSpec":
        unknown = set(cfg) - {"procedure", "ratios", "block_size", "bias"}
        if unknown:
            raise ConfigError(f"unknown allocation keys: {sorted(unknown)}")
        if "ratios" not in cfg:
            raise ConfigError("allocation spec requires 'ratios'")
        ratios = cfg["ratios"]
        if ratios and np.isscalar(ratios[0]):
            ratios = [ratios] * (n_strata or 1)
        return cls(ratios=ratios, block_size=cfg.get("block_size", sum(ratios[0])),
                   procedure=cfg.get("procedure", "stratified-block"),
                   bias=cfg.get("bias", 2.0 / 3.0))

    def to_dict(self) -> dict:
        return {"procedure": self.procedure, "ratios": [list(r) for r in self.ratios],
                "block_size": list(self.block_size), "bias": self.bias}


def _check_strata(strata, spec):
    strata = np.asarray(strata, dtype=np.int64).reshape(-1)
    if strata.size and (strata.min() < 1 or strata.max() > spec.n_strata):
        raise ConfigError(f"stratum labels must lie in 1..{spec.n_strata}")
    return strata


def _permuted_blocks(m, ratio, block_size, rng):
    base = np.repeat(np.arange(len(ratio)), np.asarray(ratio) * (block_size // sum(ratio)))
    n_blocks = -(-m // block_size)
    out = np.empty(n_blocks * block_size, dtype=np.int64)
    for b in range(n_blocks):
        out[b * block_size:(b + 1) * block_size] = rng.permutation(base)
    # last block truncated: a prefix of a fresh permutation
    return out[:m]


def stratified_block_assign(strata, spec: AllocationSpec, seed) -> np.ndarray:
    """Permuted-block randomization within each stratum, in order of arrival."""
    if spec.procedure != "stratified-block":
        raise ConfigError(f"spec procedure is {spec.procedure!r}, not 'stratified-block'")
    strata = _check_strata(strata, spec)
    arms = np.empty(strata.size, dtype=np.int64)
    for k in range(1, spec.n_strata + 1):
        rows = np.flatnonzero(strata == k)
        if rows.size == 0:
            continue
        rng = _rng.generator(seed, "stratum", k)
        arms[rows] = _permuted_blocks(rows.size, spec.ratios[k - 1], spec.block_size[k - 1], rng)
    return arms


def biased_coin_probs(counts, pi, bias) -> np.ndarray:
    """Assignment probabilities for the next unit given current arm counts.

    With deficits ``d_a = m * pi_a - counts_a``: if all deficits vanish the
    unit is drawn from ``pi``; otherwise the under-represented arms
    (``d_a > 0``) jointly receive probability ``bias``, split in proportion to
    their deficits, and the remaining arms share ``1 - bias`` in proportion to
    ``pi``. For two arms this is Efron's biased coin.
    """
    counts = np.asarray(counts, dtype=float)
    pi = np.asarray(pi, dtype=float)
    m = counts.sum()
    d = m * pi - counts
    under = d > 1e-9
    if not under.any():
        return pi.copy()
    probs = np.zeros_like(pi)
    probs[under] = bias * d[under] / d[under].sum()
    rest = ~under
    probs[rest] = (1.0 - bias) * pi[rest] / pi[rest].sum()
    return probs


def biased_coin_assign(strata, spec: AllocationSpec, bias: float = None, seed=0) -> np.ndarray:
    """Sequential stratified biased-coin assignment (multi-arm Efron rule)."""
    if spec.procedure != "stratified-biased-coin":
        raise ConfigError(f"spec procedure is {spec.procedure!r}, not 'stratified-biased-coin'")
    bias = spec.bias if bias is None else float(bias)
    if not 0.5 < bias <= 1.0:
        raise ConfigError(f"bias must lie in (0.5, 1], got {bias}")
    strata = _check_strata(strata, spec)
    arms = np.empty(strata.size, dtype=np.int64)
    for k in range(1, spec.n_strata + 1):
        rows = np.flatnonzero(strata == k)
        if rows.size == 0:
            continue
        rng = _rng.generator(seed, "stratum", k)
        pi = spec.pi(k)
        counts = np.zeros(pi.size)
        u = rng.random(rows.size)
        for i, row in enumerate(rows):
            cdf = np.cumsum(biased_coin_probs(counts, pi, bias))
            a = min(int(np.searchsorted(cdf, u[i] * cdf[-1], side="right")), pi.size - 1)
            arms[row] = a
            counts[a] += 1
    return arms


def simple_assign(n: int, probs: Sequence[float], seed) -> np.ndarray:
    """I.i.d. categorical assignment."""
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0):
        raise ConfigError("probabilities must be non-negative")
    if not np.isclose(probs.sum(), 1.0, rtol=0, atol=1e-12):
        raise ConfigError(f"probabilities sum to {probs.sum()}, not 1")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    rng = _rng.generator(seed, "simple")
    return rng.choice(probs.size, size=int(n), p=probs).astype(np.int64)


def assign(strata, spec: AllocationSpec, seed) -> np.ndarray:
    """Dispatch on ``spec.procedure``.

    Simple randomization ignores the strata and draws from stratum 1's ratios.
    """
    if spec.procedure == "stratified-block":
        return stratified_block_assign(strata, spec, seed)
    if spec.procedure == "stratified-biased-coin":
        return biased_coin_assign(strata, spec, seed=seed)
    return simple_assign(len(strata), spec.pi(1), seed)


def allocation_report(arms, strata, spec: AllocationSpec) -> np.ndarray:
    """Table ``|n_ka / n_k - pi_ka|`` with shape (K, A+1); NaN rows for empty strata."""
    arms = np.asarray(arms, dtype=np.int64)
    strata = np.asarray(strata, dtype=np.int64)
    out = np.full((spec.n_strata, spec.n_arms + 1), np.nan)
    for k in range(1, spec.n_strata + 1):
        sel = strata == k
        m = sel.sum()
        if m == 0:
            continue
        frac = np.bincount(arms[sel], minlength=spec.n_arms + 1) / m
        out[k - 1] = np.abs(frac - spec.pi(k))
    return out
