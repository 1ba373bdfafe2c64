"""Synthetic target/source trials for the two outcome models and three cases.

Both models have three arms and covariates ``X = (X1, X2..Xs, padding)``:
``X1`` in {1, 2} with probabilities 0.4 / 0.6 defines the two strata,
``X2..Xs`` are Unif[-2, 2] (model 1) or Beta(2, 2) (model 2), and the
``p - s`` padding columns are independent N(0, 2).

Model 1: ``g_a(X) = b1 X1 + sum_j bj X1 Xj`` for every arm.
Model 2: ``g_0 = g_2 = b1 X1 + sum_j bj X1 (Xj - 0.5)`` and
``g_1 = b1 X1 + sum_j bj X1 (Xj^2 - 0.3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from .errors import ConfigError
from .randomizer import AllocationSpec, assign
from .trial_data import TrialDataset

DEFAULT_MU = (0.0, 1.0, 2.0)
N_ARMS = 2
X1_LEVELS = (1.0, 2.0)
X1_PROBS = (0.4, 0.6)
PAD_VARIANCE = 2.0
BETA22_MEAN = 0.5
BETA22_SECOND_MOMENT = 0.3

# (source model, target model) per case
CASE_MODELS = {1: (1, 1), 2: (2, 1), 3: (1, 2)}


def sparsity(n: int, r: float) -> int:
    """``ceil(n**r)``, guarded against round-off at exact integer powers."""
    v = float(n) ** float(r)
    s = math.ceil(v)
    if s - 1 >= 1 and math.isclose(v, s - 1, rel_tol=1e-12, abs_tol=0.0):
        s -= 1
    return max(int(s), 1)


@dataclass(frozen=True)
class ModelSpec:
    model: int
    s: int
    p: int
    mu: tuple = DEFAULT_MU
    beta: tuple = None
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.model not in (1, 2):
            raise ConfigError(f"model must be 1 or 2, got {self.model}")
        if self.s < 1 or self.p < self.s:
            raise ConfigError(f"need 1 <= s <= p, got s={self.s}, p={self.p}")
        if len(self.mu) != N_ARMS + 1:
            raise ConfigError(f"mu needs {N_ARMS + 1} entries")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be non-negative")
        beta = self.beta if self.beta is not None else build_coefficients(self.s, 0.0, "target")
        beta = tuple(float(b) for b in beta)
        if len(beta) != self.s:
            raise ConfigError(f"beta has {len(beta)} entries, expected s={self.s}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))


@dataclass(frozen=True)
class CaseSpec:
    """One simulated design: sizes, sparsity, source bias scale and allocation.

    Exactly one of ``r`` (``s = ceil(n**r)``) or ``s`` is used; ``s`` wins
    when given.
    """

    case: int = 1
    n: int = 300
    n_src: int = 1200
    p: int = 100
    r: float = 0.1
    s: int = None
    h: float = 0.2
    mu: tuple = DEFAULT_MU
    noise_sd: float = 1.0
    allocation: AllocationSpec = field(default_factory=AllocationSpec.uniform)
    source_allocation: AllocationSpec = None

    def __post_init__(self):
        if self.case not in CASE_MODELS:
            raise ConfigError(f"case must be 1, 2 or 3, got {self.case}")
        if self.n < 1 or self.n_src < 0:
            raise ConfigError("n must be >= 1 and n_src >= 0")
        if self.h < 0:
            raise ConfigError("h must be non-negative")
        s = self.s if self.s is not None else sparsity(self.n, self.r)
        if s < 1 or s > self.p:
            raise ConfigError(f"sparsity s={s} must lie in 1..p={self.p}")
        object.__setattr__(self, "s", int(s))
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        for alloc in (self.allocation, self.source_allocation):
            if alloc is not None and (alloc.n_strata != 2 or alloc.n_arms != N_ARMS):
                raise ConfigError("allocation must describe 2 strata and 3 arms")

    @property
    def source_alloc(self) -> AllocationSpec:
        return self.source_allocation or self.allocation

    def target_model(self) -> ModelSpec:
        return ModelSpec(CASE_MODELS[self.case][1], self.s, self.p, self.mu,
                         build_coefficients(self.s, self.h, "target"), self.noise_sd)

    def source_model(self) -> ModelSpec:
        return ModelSpec(CASE_MODELS[self.case][0], self.s, self.p, self.mu,
                         build_coefficients(self.s, self.h, "source"), self.noise_sd)

    def to_dict(self) -> dict:
        out = {"case": self.case, "n": self.n, "n_src": self.n_src, "p": self.p, "r": self.r,
               "s": self.s, "h": self.h, "mu": list(self.mu), "noise_sd": self.noise_sd,
               "allocation": self.allocation.to_dict()}
        if self.source_allocation is not None:
            out["source_allocation"] = self.source_allocation.to_dict()
        return out

    def with_(self, **kw) -> "CaseSpec":
        if "r" in kw and "s" not in kw:
            kw["s"] = None
        return replace(self, **kw)


def build_coefficients(s: int, h: float, role: str) -> np.ndarray:
    """Target: all 2. Source: ``2 + h j / s`` for ``j = 1..s``."""
    if s < 1 or h < 0:
        raise ConfigError("need s >= 1 and h >= 0")
    if role == "target":
        return np.full(s, 2.0)
    if role == "source":
        return 2.0 + h * np.arange(1, s + 1) / s
    raise ConfigError(f"role must be 'target' or 'source', got {role!r}")


def _beta22(rng, size):
    g1 = rng.standard_gamma(2.0, size)
    g2 = rng.standard_gamma(2.0, size)
    return g1 / (g1 + g2)


def gen_covariates(n: int, model: int, s: int, p: int, rng: np.random.Generator):
    """Return ``(X, strata)``; the stratum is the level index of ``X1``."""
    if p < s or s < 1:
        raise ConfigError(f"need 1 <= s <= p, got s={s}, p={p}")
    x = np.empty((n, p))
    strata = np.where(rng.random(n) < X1_PROBS[0], 1, 2).astype(np.int64)
    x[:, 0] = np.asarray(X1_LEVELS)[strata - 1]
    if s > 1:
        if model == 1:
            x[:, 1:s] = rng.uniform(-2.0, 2.0, size=(n, s - 1))
        elif model == 2:
            x[:, 1:s] = _beta22(rng, (n, s - 1))
        else:
            raise ConfigError(f"unknown model {model}")
    if p > s:
        x[:, s:] = rng.normal(0.0, math.sqrt(PAD_VARIANCE), size=(n, p - s))
    return x, strata


def outcome_means(x: np.ndarray, model: int, beta) -> np.ndarray:
    """Noise-free ``g_a(X)``, shape (n, 3)."""
    beta = np.asarray(beta, dtype=float)
    s = beta.size
    x1 = x[:, 0]
    act = x[:, 1:s]
    base = beta[0] * x1
    if model == 1:
        g = base + x1 * (act @ beta[1:])
        return np.column_stack([g, g, g])
    g0 = base + x1 * ((act - BETA22_MEAN) @ beta[1:])
    g1 = base + x1 * ((act ** 2 - BETA22_SECOND_MOMENT) @ beta[1:])
    return np.column_stack([g0, g1, g0])


def gen_potential_outcomes(x, model: int, beta, mu, rng: np.random.Generator, noise_sd: float = 1.0):
    """Matrix of ``Y_i(a) = mu_a + g_a(X_i) + noise``; noise is independent per unit and arm."""
    g = outcome_means(x, model, beta)
    noise = rng.standard_normal(g.shape)
    return np.asarray(mu, dtype=float)[None, :] + g + noise_sd * noise


def expected_effect(model: int, beta) -> np.ndarray:
    """Closed-form ``E[g_a(X) - g_0(X)]`` for ``a = 1..A``.

    Uses ``E X1 = 1.6`` (independent of the active columns), ``E Xj = 0`` for
    Unif[-2, 2] and ``E Xj = 0.5, E Xj^2 = 0.3`` for Beta(2, 2).
    """
    beta = np.asarray(beta, dtype=float)
    ex1 = float(np.dot(X1_LEVELS, X1_PROBS))
    if model == 1:
        return np.zeros(N_ARMS)
    tail = beta[1:].sum()
    e_lin = BETA22_MEAN - 0.5            # E(Xj - 0.5)
    e_quad = BETA22_SECOND_MOMENT - 0.3  # E(Xj^2 - 0.3)
    d1 = ex1 * tail * (e_quad - e_lin)
    return np.array([d1, 0.0])


def true_tau(model: int, mu, beta, s: int = None) -> np.ndarray:
    """Population effect ``mu_a - mu_0 + E[g_a - g_0]``, length A."""
    mu = np.asarray(mu, dtype=float)
    return mu[1:] - mu[0] + expected_effect(model, beta)


def mc_effect_check(model: int, beta, n_draws: int, rng: np.random.Generator, chunk: int = 1_000_000):
    """Monte Carlo mean and standard error of ``g_a - g_0`` (shape (A,) each).

    Independent of ``expected_effect``: draws covariates with ``gen_covariates``
    and evaluates ``outcome_means`` directly.
    """
    beta = np.asarray(beta, dtype=float)
    s = beta.size
    total = np.zeros(N_ARMS)
    total_sq = np.zeros(N_ARMS)
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        x, _ = gen_covariates(m, model, s, s, rng)
        g = outcome_means(x, model, beta)
        diff = g[:, 1:] - g[:, [0]]
        total += diff.sum(axis=0)
        total_sq += (diff ** 2).sum(axis=0)
        done += m
    mean = total / n_draws
    var = np.maximum(total_sq / n_draws - mean ** 2, 0.0) * n_draws / max(n_draws - 1, 1)
    return mean, np.sqrt(var / n_draws)


def make_trial(n: int, spec: ModelSpec, alloc: AllocationSpec, seed, return_potential=False):
    """Draw one trial: covariates, arms, then observed ``Y_i = Y_i(A_i)``."""
    x, strata = gen_covariates(n, spec.model, spec.s, spec.p, _rng.generator(seed, "covariates"))
    arms = assign(strata, alloc, _rng.substream(seed, "assignment"))
    po = gen_potential_outcomes(x, spec.model, spec.beta, spec.mu, _rng.generator(seed, "noise"),
                                spec.noise_sd)
    y = po[np.arange(n), arms]
    d = TrialDataset(y, arms, strata, x, n_arms=N_ARMS, n_strata=2)
    return (d, po) if return_potential else d


def make_case(spec: CaseSpec, seed):
    """Independent target and source trials plus the target's true effect.

    Returns ``(target, source, tau)``; ``source`` is None when ``n_src == 0``.
    """
    tgt_model = spec.target_model()
    target = make_trial(spec.n, tgt_model, spec.allocation, _rng.substream(seed, "target"))
    source = None
    if spec.n_src > 0:
        source = make_trial(spec.n_src, spec.source_model(), spec.source_alloc,
                            _rng.substream(seed, "source"))
    return target, source, true_tau(tgt_model.model, tgt_model.mu, tgt_model.beta, tgt_model.s)
