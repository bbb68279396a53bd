"""Normal and uncertainty-aware triplet losses with analytic gradients.

All losses work on per-part embeddings of shape ``(N, S, E)`` and on triplet
index arrays of shape ``(M, 3)``.  Each triplet contributes, per part,

    [ Q(a, p) - Q(a, n) + margin ]_+

where ``Q`` is the squared Euclidean distance for the normal loss, and that
distance divided by the summed pairwise variances for the uncertainty-aware
loss.  Results are averaged over triplets and then over parts.

Two variance readings are available.  ``"scalar"`` (default) reduces every
``sigma`` to one number per entry and part, ``s = mean(sigma**2)``, and
divides the whole squared distance by ``s_a + s_x``.  ``"elementwise"``
divides channel by channel by ``sigma_a**2 + sigma_x**2``.  Denominators are
floored at ``DEN_FLOOR``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import Rng
from .errors import NumericError, ShapeError

DEN_FLOOR = 1e-6
SIGMA_MODES = ("scalar", "elementwise")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    sigma_mode: str = "scalar"

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")


@dataclass
class LossBreakdown:
    """Loss terms of one evaluation; ``None`` marks a term that was not defined."""

    L_tv: float | None
    L_tc: float | None
    L_tv_e: float | None
    L_tc_e: float | None
    total: float
    per_part: dict[str, np.ndarray] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def terms(self) -> dict[str, float | None]:
        return {"L_tv": self.L_tv, "L_tc": self.L_tc, "L_tv_e": self.L_tv_e, "L_tc_e": self.L_tc_e}


@dataclass
class TermResult:
    value: float
    per_part: np.ndarray
    g_x: np.ndarray | None = None
    g_sigma: np.ndarray | None = None
    hinge: np.ndarray | None = None  # (S, M) pre-hinge values
    den_margin: np.ndarray | None = None  # denominator minus floor, for the used pairs


def _check_inputs(triplets: np.ndarray, x: np.ndarray, sigma: np.ndarray | None) -> np.ndarray:
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if x.ndim != 3:
        raise ShapeError(f"embeddings must be (N, S, E), got {x.shape}")
    if sigma is not None:
        if sigma.shape != x.shape:
            raise ShapeError(f"sigma {sigma.shape} does not match embeddings {x.shape}")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
    if triplets.size and (triplets.min() < 0 or triplets.max() >= x.shape[0]):
        raise ShapeError("triplet index out of range")
    if not np.all(np.isfinite(x)) or (sigma is not None and not np.all(np.isfinite(sigma))):
        raise NumericError("non-finite embeddings or sigma")
    return triplets


def triplet_term(triplets, x: np.ndarray, sigma: np.ndarray | None, margin: float,
                 sigma_mode: str = "scalar", *, grad: bool = False, s: np.ndarray | None = None) -> TermResult:
    """Value (and optionally gradients) of one triplet loss term.

    ``sigma=None`` and ``s=None`` gives the normal triplet loss.  ``s`` may be
    passed instead of ``sigma`` to fix the scalar per-entry variance directly
    (shape ``(N, S)``); no sigma gradient is produced then.
    """
    x = np.asarray(x, dtype=np.float64)
    triplets = _check_inputs(triplets, x, sigma)
    N, S, E = x.shape
    if triplets.shape[0] == 0:
        return TermResult(0.0, np.zeros(S), np.zeros_like(x) if grad else None,
                          None if sigma is None or not grad else np.zeros_like(sigma))
    a, p, n = triplets.T
    xs = x.transpose(1, 0, 2)  # (S, N, E)
    diff = xs[:, :, None, :] - xs[:, None, :, :]  # (S, N, N, E)
    sq = diff * diff

    if sigma is None and s is None:
        mode = "normal"
        Q = sq.sum(axis=-1)
    elif sigma_mode == "elementwise" and sigma is not None:
        mode = "elementwise"
        var = (sigma * sigma).transpose(1, 0, 2)
        den_raw = var[:, :, None, :] + var[:, None, :, :]
        den = np.maximum(den_raw, DEN_FLOOR)
        Q = (sq / den).sum(axis=-1)
    else:
        mode = "scalar"
        if s is None:
            s = (sigma * sigma).mean(axis=-1)  # (N, S)
        st = np.asarray(s, dtype=np.float64).T  # (S, N)
        den_raw = st[:, :, None] + st[:, None, :]
        den = np.maximum(den_raw, DEN_FLOOR)
        D = sq.sum(axis=-1)
        Q = D / den

    hinge = Q[:, a, p] - Q[:, a, n] + margin  # (S, M)
    active = hinge > 0
    M = triplets.shape[0]
    per_part = np.where(active, hinge, 0.0).sum(axis=1) / M
    value = float(per_part.mean())
    if not math.isfinite(value):
        raise NumericError("non-finite triplet loss")
    result = TermResult(value, per_part, hinge=hinge)
    if mode != "normal":
        result.den_margin = np.concatenate([(den_raw[:, a, p] - DEN_FLOOR).ravel(),
                                            (den_raw[:, a, n] - DEN_FLOOR).ravel()])
    if not grad:
        return result

    # dL/dQ accumulated over triplets, fixed-order summation via bincount
    coef = active / (S * M)
    base = (np.arange(S) * N * N)[:, None]
    idx = np.concatenate([(base + a * N + p).ravel(), (base + a * N + n).ravel()])
    w = np.concatenate([coef.ravel(), -coef.ravel()])
    gQ = np.bincount(idx, weights=w, minlength=S * N * N).reshape(S, N, N)

    if mode == "normal":
        G = gQ + gQ.transpose(0, 2, 1)
        g_x = 2.0 * np.einsum("sij,sije->sie", G, diff)
        result.g_x = g_x.transpose(1, 0, 2)
        return result

    floored = den_raw <= DEN_FLOOR
    if mode == "scalar":
        gD = gQ / den
        G = gD + gD.transpose(0, 2, 1)
        g_x = 2.0 * np.einsum("sij,sije->sie", G, diff)
        g_den = np.where(floored, 0.0, -gQ * D / (den * den))
        g_s = (g_den.sum(axis=2) + g_den.sum(axis=1)).T  # (N, S)
        result.g_x = g_x.transpose(1, 0, 2)
        if sigma is not None:
            result.g_sigma = g_s[:, :, None] * 2.0 * sigma / E
        return result

    G = gQ + gQ.transpose(0, 2, 1)
    g_x = 2.0 * np.einsum("sij,sije->sie", G, diff / den)
    g_den = np.where(floored, 0.0, -gQ[..., None] * sq / (den * den))
    g_var = (g_den.sum(axis=2) + g_den.sum(axis=1)).transpose(1, 0, 2)
    result.g_x = g_x.transpose(1, 0, 2)
    result.g_sigma = g_var * 2.0 * sigma
    return result


def triplet_loss_normal(T, embeddings, cfg: LossConfig | float = 0.2) -> float:
    """Mean-over-parts batch triplet loss on squared Euclidean distances.

    An empty triplet set returns 0.0; callers that need to know use
    :func:`total_loss`, which flags skipped terms.
    """
    margin = cfg.margin if isinstance(cfg, LossConfig) else float(cfg)
    return triplet_term(T, np.asarray(embeddings, dtype=np.float64), None, margin).value


def triplet_loss_uncertainty(T, mu, sigma, cfg: LossConfig | float = 0.2) -> float:
    cfg = cfg if isinstance(cfg, LossConfig) else LossConfig(margin=float(cfg))
    sigma = np.asarray(sigma, dtype=np.float64)
    return triplet_term(T, np.asarray(mu, dtype=np.float64), sigma, cfg.margin, cfg.sigma_mode).value


def _average_defined(values: list[float | None]) -> float:
    defined = [v for v in values if v is not None]
    return float(sum(defined) / len(defined)) if defined else 0.0


def _mean_or_none(res: TermResult | None) -> float | None:
    return None if res is None else res.value


def identity_only_terms(T_v, T_c, mu_v, mu_c, cfg: LossConfig, *, grad: bool = False):
    """Normal-triplet objective used before the uncertainty branch exists:
    mean of the loss on ``T_v`` behind CVM and on ``T_c`` behind CCM."""
    T_v = np.asarray(T_v).reshape(-1, 3)
    T_c = np.asarray(T_c).reshape(-1, 3)
    flags = []
    tv = triplet_term(T_v, mu_v, None, cfg.margin, grad=grad) if len(T_v) else None
    tc = triplet_term(T_c, mu_c, None, cfg.margin, grad=grad) if len(T_c) else None
    if tv is None:
        flags.append("T_v empty: L_tv skipped")
    if tc is None:
        flags.append("T_c empty: L_tc skipped")
    vals = [_mean_or_none(tv), _mean_or_none(tc)]
    breakdown = LossBreakdown(vals[0], vals[1], None, None, _average_defined(vals), flags=flags)
    for name, r in (("L_tv", tv), ("L_tc", tc)):
        if r is not None:
            breakdown.per_part[name] = r.per_part
    n_defined = sum(v is not None for v in vals)
    return breakdown, (tv, tc), n_defined


def draw_noise(mu_v: np.ndarray, mu_c: np.ndarray, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterisation noise for one loss evaluation (one draw per part per entry)."""
    return rng.standard_normal(mu_v.shape), rng.standard_normal(mu_c.shape)


def full_terms(T_v, T_c, mu_v, mu_c, sigma_v, sigma_c, eps_v, eps_c, cfg: LossConfig, *, grad: bool = False):
    """The four uncertainty-aware terms for fixed noise ``eps_v``/``eps_c``."""
    T_v = np.asarray(T_v).reshape(-1, 3)
    T_c = np.asarray(T_c).reshape(-1, 3)
    e_v = mu_v + eps_v * sigma_v
    e_c = mu_c + eps_c * sigma_c
    mode = cfg.sigma_mode
    flags = []
    tv = tve = tc = tce = None
    if len(T_v):
        tv = triplet_term(T_v, mu_v, sigma_v, cfg.margin, mode, grad=grad)
        tve = triplet_term(T_v, e_v, sigma_v, cfg.margin, mode, grad=grad)
    else:
        flags.append("T_v empty: L_tv and L_tv_e skipped")
    if len(T_c):
        tc = triplet_term(T_c, mu_c, sigma_c, cfg.margin, mode, grad=grad)
        tce = triplet_term(T_c, e_c, sigma_c, cfg.margin, mode, grad=grad)
    else:
        flags.append("T_c empty: L_tc and L_tc_e skipped")
    vals = [_mean_or_none(r) for r in (tv, tc, tve, tce)]
    breakdown = LossBreakdown(vals[0], vals[1], vals[2], vals[3], _average_defined(vals), flags=flags)
    for name, r in zip(("L_tv", "L_tc", "L_tv_e", "L_tc_e"), (tv, tc, tve, tce)):
        if r is not None:
            breakdown.per_part[name] = r.per_part
    return breakdown, (tv, tc, tve, tce), e_v, e_c


def total_loss(T_v, T_c, emb, cfg: LossConfig, rng: Rng | None = None) -> LossBreakdown:
    """Average of the four uncertainty-aware terms (mean and sampled embeddings).

    If ``emb.e_v``/``emb.e_c`` are already set they are used as the sampled
    embeddings; otherwise fresh noise is drawn from ``rng``.
    """
    if emb.sigma_v is None or emb.sigma_c is None:
        raise ValueError("total_loss needs sigma_v and sigma_c")
    if emb.e_v is not None and emb.e_c is not None:
        T_v = np.asarray(T_v).reshape(-1, 3)
        T_c = np.asarray(T_c).reshape(-1, 3)
        mode = cfg.sigma_mode
        terms = [
            triplet_term(T_v, emb.mu_v, emb.sigma_v, cfg.margin, mode) if len(T_v) else None,
            triplet_term(T_c, emb.mu_c, emb.sigma_c, cfg.margin, mode) if len(T_c) else None,
            triplet_term(T_v, emb.e_v, emb.sigma_v, cfg.margin, mode) if len(T_v) else None,
            triplet_term(T_c, emb.e_c, emb.sigma_c, cfg.margin, mode) if len(T_c) else None,
        ]
        vals = [_mean_or_none(r) for r in terms]
        flags = [] if len(T_v) else ["T_v empty: L_tv and L_tv_e skipped"]
        if not len(T_c):
            flags.append("T_c empty: L_tc and L_tc_e skipped")
        return LossBreakdown(*vals, total=_average_defined(vals), flags=flags)
    if rng is None:
        raise ValueError("total_loss needs an rng when no sampled embeddings are given")
    eps_v, eps_c = draw_noise(emb.mu_v, emb.mu_c, rng)
    breakdown, _, e_v, e_c = full_terms(T_v, T_c, emb.mu_v, emb.mu_c, emb.sigma_v, emb.sigma_c,
                                        eps_v, eps_c, cfg)
    emb.e_v, emb.e_c = e_v, e_c
    return breakdown


OBJECTIVES = ("identity_only", "full", "baseline")


@dataclass
class Evaluation:
    """Everything one objective evaluation produced."""

    breakdown: LossBreakdown
    grads: object | None  # ModelParams
    cache: object  # model.ForwardCache
    terms: tuple
    eps: tuple[np.ndarray, np.ndarray] | None


def evaluate_objective(frames, triplets, params, model_config, cfg: LossConfig, *,
                       objective: str = "full", rng: Rng | None = None,
                       eps: tuple[np.ndarray, np.ndarray] | None = None, grad: bool = True) -> Evaluation:
    """Forward pass, loss and (optionally) backward pass for one batch.

    ``objective``:
      * ``"identity_only"``: mean of normal losses on T_v (behind CVM) and T_c (behind CCM)
      * ``"full"``: mean of the four uncertainty-aware terms
      * ``"baseline"``: single normal loss on T_c over the final embedding
    Noise for ``"full"`` is taken from ``eps`` if given, else drawn from ``rng``
    and treated as a constant in the backward pass.
    """
    from . import model as mdl

    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    full = objective == "full"
    cache = mdl.forward(frames, params, model_config, uncertainty=full)
    T_v, T_c = triplets.T_v, triplets.T_c
    grads = None
    if objective == "identity_only":
        breakdown, terms, n_def = identity_only_terms(T_v, T_c, cache.mu_v, cache.mu_c, cfg, grad=grad)
        if grad:
            scale = 1.0 / max(n_def, 1)
            tv, tc = terms
            grads = mdl.backward(cache, params, model_config,
                                 g_mu_v=None if tv is None else scale * tv.g_x,
                                 g_mu_c=None if tc is None else scale * tc.g_x)
    elif objective == "baseline":
        T_c = np.asarray(T_c).reshape(-1, 3)
        tc = triplet_term(T_c, cache.mu_c, None, cfg.margin, grad=grad) if len(T_c) else None
        value = 0.0 if tc is None else tc.value
        breakdown = LossBreakdown(None, None if tc is None else value, None, None, value,
                                  flags=[] if tc is not None else ["T_c empty: L_tc skipped"])
        terms = (None, tc)
        if grad and tc is not None:
            grads = mdl.backward(cache, params, model_config, g_mu_c=tc.g_x)
        elif grad:
            grads = params.zeros_like()
    else:
        if eps is None:
            if rng is None:
                raise ValueError("the full objective needs rng or eps")
            eps = draw_noise(cache.mu_v, cache.mu_c, rng)
        eps_v, eps_c = eps
        breakdown, terms, _, _ = full_terms(T_v, T_c, cache.mu_v, cache.mu_c, cache.sigma_v, cache.sigma_c,
                                            eps_v, eps_c, cfg, grad=grad)
        if grad:
            tv, tc, tve, tce = terms
            n_def = sum(t is not None for t in terms)
            scale = 1.0 / max(n_def, 1)
            g_mu_v = np.zeros_like(cache.mu_v)
            g_mu_c = np.zeros_like(cache.mu_c)
            g_sv = np.zeros_like(cache.sigma_v)
            g_sc = np.zeros_like(cache.sigma_c)
            if tv is not None:
                g_mu_v += tv.g_x + tve.g_x
                g_sv += tv.g_sigma + tve.g_sigma + tve.g_x * eps_v
            if tc is not None:
                g_mu_c += tc.g_x + tce.g_x
                g_sc += tc.g_sigma + tce.g_sigma + tce.g_x * eps_c
            grads = mdl.backward(cache, params, model_config, g_mu_v=scale * g_mu_v, g_mu_c=scale * g_mu_c,
                                 g_sigma_v=scale * g_sv, g_sigma_c=scale * g_sc)
    if not math.isfinite(breakdown.total):
        raise NumericError("non-finite loss")
    if grads is not None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
    return Evaluation(breakdown, grads, cache, terms, eps)


def loss_gradients(frames, triplets, params, model_config, cfg: LossConfig, rng: Rng | None = None, *,
                   objective: str = "full", eps=None):
    """Analytic gradient of the objective w.r.t. every parameter (a ``ModelParams``)."""
    return evaluate_objective(frames, triplets, params, model_config, cfg, objective=objective,
                              rng=rng, eps=eps).grads
