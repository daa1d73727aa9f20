"""Noisy-classifier data model: one Dirichlet law per annobit state.

The category channel emits a 5-vector (four categories plus "No Object")
whose conditional law given the true category set is a Dirichlet, one
per subset of categories (16 laws).  The scale channel emits a 4-vector
over the anchor scale classes with one Dirichlet per quantized state
(7 laws); the table channel is a 2-simplex analogue.  The module also
implements MLE fitting, entropies, simulated classifier execution, and
the standalone (model-free) detection scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp, polygamma

from .annocell import SCALE_ANCHORS, ScaleQuantization
from .errors import DegenerateData, NoConverge
from .scenegen import N_CATEGORIES

# Gap threshold and cap of the standalone category decision.
SCORE_GAP = 0.3
TOP_K = 3
NO_OBJECT = N_CATEGORIES  # index of the "No Object" coordinate

SCALE_ACCEPT_C = math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class DirichletParams:
    concentration: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "concentration", np.asarray(self.concentration, dtype=float)
        )
        if np.any(self.concentration <= 0):
            raise ValueError("concentrations must be positive")

    @property
    def dim(self) -> int:
        return len(self.concentration)

    def mean(self) -> np.ndarray:
        a = self.concentration
        return a / a.sum()


def dirichlet_sample(p: DirichletParams, rng) -> np.ndarray:
    return rng.dirichlet(p.concentration)


def dirichlet_logpdf(x: np.ndarray, p: DirichletParams) -> float:
    a = p.concentration
    x = np.asarray(x, dtype=float)
    norm = gammaln(a.sum()) - gammaln(a).sum()
    return float(norm + np.sum((a - 1.0) * np.log(np.clip(x, 1e-300, None))))


def dirichlet_logpdf_many(x: np.ndarray, params: list[DirichletParams]) -> np.ndarray:
    """Log densities of samples (n, d) under each component: (n, k)."""
    a = np.stack([p.concentration for p in params])  # (k, d)
    norms = gammaln(a.sum(axis=1)) - gammaln(a).sum(axis=1)
    logx = np.log(np.clip(np.atleast_2d(x), 1e-300, None))
    return logx @ (a - 1.0).T + norms[None, :]


def dirichlet_entropy(p: DirichletParams) -> float:
    """Closed-form differential entropy in nats."""
    a = p.concentration
    a0 = a.sum()
    k = len(a)
    log_b = gammaln(a).sum() - gammaln(a0)
    return float(log_b + (a0 - k) * digamma(a0) - np.sum((a - 1.0) * digamma(a)))


def _inverse_digamma(y: np.ndarray) -> np.ndarray:
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(5):
        x = x - (digamma(x) - y) / polygamma(1, x)
    return x


def dirichlet_mle(
    samples: np.ndarray,
    max_iter: int = 1000,
    tol: float = 1e-8,
    clamp: float = 1e-6,
) -> DirichletParams:
    """Maximum-likelihood concentrations by the digamma fixed-point
    iteration; the per-iteration log likelihood never decreases."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise DegenerateData("need at least two simplex samples")
    x = np.clip(x, clamp, None)
    x = x / x.sum(axis=1, keepdims=True)
    if np.any(np.all(samples <= 0, axis=0)):
        raise DegenerateData("a component is identically zero")
    mean_log = np.log(x).mean(axis=0)
    m = x.mean(axis=0)
    v = x[:, 0].var()
    if v <= 0:
        s0 = float(len(m))
    else:
        s0 = max((m[0] * (1 - m[0])) / v - 1.0, 1e-2)
    a = m * s0
    for _ in range(max_iter):
        a_new = _inverse_digamma(digamma(a.sum()) + mean_log)
        if np.max(np.abs(a_new - a)) < tol:
            return DirichletParams(a_new)
        a = a_new
    raise NoConverge(f"Dirichlet MLE did not converge in {max_iter} iterations")


def dirichlet_loglik(samples: np.ndarray, p: DirichletParams) -> float:
    x = np.clip(np.asarray(samples, dtype=float), 1e-300, None)
    a = p.concentration
    n = len(x)
    return float(
        n * (gammaln(a.sum()) - gammaln(a).sum())
        + np.sum((a - 1.0) * np.log(x).sum(axis=0))
    )


def mixture_entropy_samples(
    weights: np.ndarray,
    components: list[DirichletParams],
    n_samples: int,
    rng,
) -> np.ndarray:
    """Per-draw values of -log m(x) for x drawn from the mixture; their
    mean estimates the mixture entropy."""
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ValueError("weights must sum to 1")
    counts = rng.multinomial(n_samples, weights)
    draws = []
    for k, n_k in enumerate(counts):
        if n_k > 0:
            draws.append(rng.dirichlet(components[k].concentration, size=int(n_k)))
    x = np.concatenate(draws, axis=0)
    comp_ll = dirichlet_logpdf_many(x, components)
    log_w = np.log(np.clip(weights, 1e-300, None))
    return -logsumexp(comp_ll + log_w[None, :], axis=1)


def mixture_entropy_mc(
    weights: np.ndarray,
    components: list[DirichletParams],
    n_samples: int,
    rng,
) -> float:
    """Monte-Carlo estimate of the mixture's differential entropy."""
    return float(mixture_entropy_samples(weights, components, n_samples, rng).mean())


# ---------------------------------------------------------------------------
# Channel bank
# ---------------------------------------------------------------------------


@dataclass
class ChannelBank:
    """Complete conditional observation model: one Dirichlet per annobit
    state for the category (16), scale (7) and table (2) channels.

    Scale observations on empty cells (state 0) fall back to the uniform
    law on the simplex so that posterior evaluation never fails.
    """

    cat: dict[int, DirichletParams]
    scale: dict[int, DirichletParams]
    table: dict[int, DirichletParams]
    quant: ScaleQuantization = field(default_factory=ScaleQuantization)

    def __post_init__(self):
        if sorted(self.cat) != list(range(2**N_CATEGORIES)):
            raise ValueError("category channel needs one law per subset")
        if sorted(self.scale) != list(range(1, self.quant.n_classes + 1)):
            raise ValueError("scale channel needs one law per quantized state")
        if sorted(self.table) != [0, 1]:
            raise ValueError("table channel needs laws for both states")
        self._scale_absent = DirichletParams(np.ones(len(SCALE_ANCHORS)))

    def cat_components(self) -> list[DirichletParams]:
        return [self.cat[y] for y in range(2**N_CATEGORIES)]

    def scale_law(self, y: int) -> DirichletParams:
        return self._scale_absent if y == 0 else self.scale[y]

    def cat_entropy_table(self) -> np.ndarray:
        return np.array([dirichlet_entropy(self.cat[y]) for y in range(2**N_CATEGORIES)])


def default_channel_bank(
    present: float = 20.0,
    absent: float = 2.0,
    scale_present: float = 15.0,
    scale_absent: float = 2.0,
) -> ChannelBank:
    """Synthetic stand-in for classifier channels fitted on real CNN
    outputs: mass concentrates on the coordinates of present states."""
    cat = {}
    for y in range(2**N_CATEGORIES):
        conc = np.full(N_CATEGORIES + 1, absent)
        if y == 0:
            conc[NO_OBJECT] = present
        else:
            for c in range(N_CATEGORIES):
                if y >> c & 1:
                    conc[c] = present
        cat[y] = DirichletParams(conc)
    scale = {}
    n_anchor = len(SCALE_ANCHORS)
    for y in range(1, 2 * n_anchor):
        conc = np.full(n_anchor, scale_absent)
        if y % 2 == 1:  # anchor state
            conc[(y - 1) // 2] = scale_present
        else:  # midpoint state: mass split across the two neighbors
            conc[y // 2 - 1] = scale_present / 2.0 + scale_absent
            conc[y // 2] = scale_present / 2.0 + scale_absent
        scale[y] = DirichletParams(conc)
    table = {
        0: DirichletParams(np.array([scale_absent, scale_present])),
        1: DirichletParams(np.array([scale_present, scale_absent])),
    }
    return ChannelBank(cat, scale, table)


def simulate_classifier(y: int, bank: ChannelBank, rng, kind: str = "cat") -> np.ndarray:
    """Draw one classifier output given the true annobit state."""
    if kind == "cat":
        return dirichlet_sample(bank.cat[y], rng)
    if kind == "scale":
        return dirichlet_sample(bank.scale_law(y), rng)
    if kind == "table":
        return dirichlet_sample(bank.table[y], rng)
    raise ValueError(f"unknown channel kind {kind!r}")


# ---------------------------------------------------------------------------
# Standalone classifier scoring
# ---------------------------------------------------------------------------


def standalone_category_decision(x: np.ndarray) -> list[int]:
    """Indices selected by the ranked score-gap rule: keep adding
    categories until a consecutive gap exceeds 0.3 or three are chosen.
    """
    order = np.argsort(-np.asarray(x))
    chosen = [int(order[0])]
    for k in range(1, len(order)):
        if len(chosen) >= TOP_K:
            break
        if x[order[k - 1]] - x[order[k]] > SCORE_GAP:
            break
        chosen.append(int(order[k]))
    return chosen


def standalone_scale_decision(x: np.ndarray) -> tuple[float, float, float, bool]:
    """(SR_hat, sigma_hat, scale score, accept flag) from a scale output.

    SR_hat is the weighted average of the top-two anchor scales; the
    acceptance condition is SR_hat >= 0.5 - c * sigma_hat with
    c = sqrt(2 log 2).
    """
    x = np.asarray(x, dtype=float)
    # Score ties go to the larger anchor, so a point mass pairs with its
    # neighboring scale class.
    order = np.lexsort((-np.arange(len(x)), -x))
    anchors = np.array(SCALE_ANCHORS)
    w, w2 = float(x[order[0]]), float(x[order[1]])
    s, s2 = float(anchors[order[0]]), float(anchors[order[1]])
    total = w + w2
    if total <= 0:
        return 0.0, 0.0, 0.0, False
    sr = (w * s + w2 * s2) / total
    sigma = math.sqrt((w * w + w2 * w2) / total**3) * abs(s - s2)
    if sigma == 0.0:
        accept = sr >= 0.5
        return sr, sigma, 1.0 if accept else 0.0, accept
    accept = sr >= 0.5 - SCALE_ACCEPT_C * sigma
    score = math.exp(-max(0.0, 0.5 - sr) ** 2 / (2.0 * sigma * sigma))
    return sr, sigma, score, accept


def mixed_score(category: int, x_cat: np.ndarray, x_sc: np.ndarray) -> tuple[float, bool]:
    """Category-scale product score and the positive-detection flag."""
    _, _, s_scale, _ = standalone_scale_decision(x_sc)
    s_c = float(x_cat[category])
    score = s_c * s_scale
    positive = (
        s_scale >= 0.5
        and category in standalone_category_decision(x_cat)
        and category != NO_OBJECT
    )
    return score, positive


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def bank_to_dict(bank: ChannelBank) -> dict:
    return {
        "cat": {str(y): p.concentration.tolist() for y, p in bank.cat.items()},
        "scale": {str(y): p.concentration.tolist() for y, p in bank.scale.items()},
        "table": {str(y): p.concentration.tolist() for y, p in bank.table.items()},
    }


def bank_from_dict(d: dict) -> ChannelBank:
    return ChannelBank(
        cat={int(y): DirichletParams(np.array(v)) for y, v in d["cat"].items()},
        scale={int(y): DirichletParams(np.array(v)) for y, v in d["scale"].items()},
        table={int(y): DirichletParams(np.array(v)) for y, v in d["table"].items()},
    )


def save_bank(bank: ChannelBank, path) -> None:
    with open(path, "w") as fh:
        json.dump(bank_to_dict(bank), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bank(path) -> ChannelBank:
    with open(path) as fh:
        return bank_from_dict(json.load(fh))
