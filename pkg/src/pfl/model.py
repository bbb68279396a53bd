"""Two-branch progressive embedding network with a hand-written backward pass.

Shapes used below (N = sequences in a batch, T = frames, S = parts):

    frames      (N, T, frame_dim)
    f           (N, feature_dim)          set-pooled backbone feature
    parts       (N, S, part_dim)          horizontal slices of ``f``
    mu / sigma  (N, S, embed_dim)

Per-part mapping weights are stacked along a leading part axis, e.g.
``id_cvm_w`` has shape ``(S, embed_dim, part_dim)``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .core_math import Rng, sigmoid
from .errors import CheckpointError, ConfigError, InputError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1

IDENTITY_PARAMS = ("backbone_w", "backbone_b", "id_cvm_w", "id_cvm_b", "id_ccm_w", "id_ccm_b")
UNCERTAINTY_PARAMS = (
    "head_a_w", "head_a_b", "head_b_w", "head_b_b",
    "un_cvm_w", "un_cvm_b", "un_ccm_w", "un_ccm_b",
)

# Incremented on every uncertainty-branch evaluation; lets tests assert that
# inference never touches that branch.
uncertainty_evaluations = 0


@dataclass(frozen=True)
class ModelConfig:
    frame_dim: int = 32
    feature_dim: int = 64
    parts: int = 8
    embed_dim: int = 16
    head_dim: int = 64
    two_stage: bool = True
    # initial sigma of the uncertainty branch; sqrt(0.5) makes every
    # uncertainty-aware denominator start at exactly 1
    sigma_init: float = float(np.sqrt(0.5))

    def __post_init__(self):
        for name in ("frame_dim", "feature_dim", "parts", "embed_dim", "head_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.feature_dim % self.parts:
            raise ShapeError(f"feature_dim {self.feature_dim} not divisible by parts {self.parts}")

    @property
    def part_dim(self) -> int:
        return self.feature_dim // self.parts

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class ModelParams:
    backbone_w: np.ndarray
    backbone_b: np.ndarray
    id_cvm_w: np.ndarray
    id_cvm_b: np.ndarray
    id_ccm_w: np.ndarray
    id_ccm_b: np.ndarray
    head_a_w: np.ndarray
    head_a_b: np.ndarray
    head_b_w: np.ndarray
    head_b_b: np.ndarray
    un_cvm_w: np.ndarray
    un_cvm_b: np.ndarray
    un_ccm_w: np.ndarray
    un_ccm_b: np.ndarray

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for fld in fields(self):
            yield fld.name, getattr(self, fld.name)

    def names(self) -> list[str]:
        return [fld.name for fld in fields(self)]

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.items()})

    def flatten(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([getattr(self, n).ravel() for n in names])

    def with_flat(self, flat: np.ndarray, names: Sequence[str] | None = None) -> "ModelParams":
        names = self.names() if names is None else names
        out = self.copy()
        pos = 0
        for n in names:
            arr = getattr(out, n)
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        return out

    def check(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        for name, arr in self.items():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} has non-finite entries")


def param_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    S, E, P, F, H = c.parts, c.embed_dim, c.part_dim, c.feature_dim, c.head_dim
    return {
        "backbone_w": (F, c.frame_dim), "backbone_b": (F,),
        "id_cvm_w": (S, E, P), "id_cvm_b": (S, E),
        "id_ccm_w": (S, E, E), "id_ccm_b": (S, E),
        "head_a_w": (H, F), "head_a_b": (H,),
        "head_b_w": (F, H), "head_b_b": (F,),
        "un_cvm_w": (S, E, P), "un_cvm_b": (S, E),
        "un_ccm_w": (S, E, E), "un_ccm_b": (S, E),
    }


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, CCM weights scaled by 0.1.

    The uncertainty CVM bias is the one exception: it is set to
    ``config.sigma_init`` so the variance features start strictly positive.
    """
    shapes = param_shapes(config)
    out = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            out[name] = np.zeros(shape)
            continue
        fan_in = shape[-1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        if "ccm" in name:
            w *= 0.1
        out[name] = w
    out["un_cvm_b"] = np.full(shapes["un_cvm_b"], config.sigma_init)
    return ModelParams(**out)


@dataclass
class ProgressiveEmbedding:
    """Per-part outputs for a batch of sequences, each ``(N, S, embed_dim)``."""

    mu_v: np.ndarray
    mu_c: np.ndarray
    sigma_v: np.ndarray | None = None
    sigma_c: np.ndarray | None = None
    e_v: np.ndarray | None = None
    e_c: np.ndarray | None = None


@dataclass
class ForwardCache:
    frames: np.ndarray
    argmax: np.ndarray
    pooled: np.ndarray
    f: np.ndarray
    parts: np.ndarray
    mu_v: np.ndarray
    mu_c: np.ndarray
    head_pre: np.ndarray | None = None
    head_sig: np.ndarray | None = None
    head_out_pre: np.ndarray | None = None
    un_parts: np.ndarray | None = None
    sigma_v_pre: np.ndarray | None = None
    sigma_v: np.ndarray | None = None
    sigma_c_pre: np.ndarray | None = None
    sigma_c: np.ndarray | None = None
    runner_up_gap: np.ndarray | None = field(default=None, repr=False)


def stack_frames(sequences: Sequence[np.ndarray]) -> np.ndarray:
    """Stack variable-length frame sets into ``(N, T_max, D)``.

    Short sequences are padded by repeating their first frame, which leaves
    the max-pooled feature unchanged.
    """
    if len(sequences) == 0:
        raise InputError("no sequences given")
    seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
    for s in seqs:
        if s.ndim != 2 or s.shape[0] == 0:
            raise InputError("every sequence needs at least one frame (shape (T, frame_dim))")
    t_max = max(s.shape[0] for s in seqs)
    if all(s.shape[0] == t_max for s in seqs):
        return np.stack(seqs)
    out = np.empty((len(seqs), t_max, seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        out[i, s.shape[0]:] = s[0]
    return out


def _as_batch(frames) -> np.ndarray:
    arr = frames if isinstance(frames, np.ndarray) else stack_frames(frames)
    if arr.ndim != 3 or arr.shape[1] == 0:
        raise InputError(f"expected frames of shape (N, T, frame_dim), got {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def _rowwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` summed in a fixed order over the shared axis.

    BLAS picks its blocking from the array shapes, so the same row can round
    differently in batches of different sizes; this keeps every output row a
    function of its own input row only.
    """
    out = x[..., 0, None] * w[:, 0]
    for k in range(1, x.shape[-1]):
        out += x[..., k, None] * w[:, k]
    return out


def _backbone(frames: np.ndarray, params: ModelParams):
    z = _rowwise(frames, params.backbone_w) + params.backbone_b  # (N, T, F)
    idx = np.argmax(z, axis=1)
    pooled = np.take_along_axis(z, idx[:, None, :], axis=1)[:, 0, :]
    return z, idx, pooled


def backbone_forward(frames, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Set-pooled feature of one sequence (``(T, frame_dim)``) or a batch."""
    if len(frames) == 0:
        raise InputError("empty frame list")
    single = np.ndim(frames[0]) == 1
    if single:
        frames = np.asarray(frames, dtype=np.float64)[None]
    else:
        frames = _as_batch(frames)
    if frames.shape[-1] != config.frame_dim:
        raise ShapeError(f"frame_dim {frames.shape[-1]} != config.frame_dim {config.frame_dim}")
    _, _, pooled = _backbone(frames, params)
    f = np.maximum(pooled, 0.0)
    return f[0] if single else f


def hpp_slice(f: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Split features into ``config.parts`` contiguous horizontal strips."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != config.feature_dim or f.shape[-1] % config.parts:
        raise ShapeError(f"cannot slice feature of width {f.shape[-1]} into {config.parts} parts")
    return f.reshape(f.shape[:-1] + (config.parts, config.part_dim))


def _part_affine(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    # (N, S, P) -> (N, S, E), fixed summation order as in _rowwise
    out = x[..., 0, None] * w[:, :, 0]
    for k in range(1, x.shape[-1]):
        out += x[..., k, None] * w[:, :, k]
    return out + b


def identity_branch(f: np.ndarray, params: ModelParams, config: ModelConfig):
    """Return ``(mu_v, mu_c)``; batched if ``f`` is 2-D."""
    single = np.ndim(f) == 1
    x = hpp_slice(np.atleast_2d(f), config)
    mu_v = _part_affine(params.id_cvm_w, params.id_cvm_b, x)
    if config.two_stage:
        mu_c = mu_v + _part_affine(params.id_ccm_w, params.id_ccm_b, mu_v)
    else:
        mu_c = mu_v
    return (mu_v[0], mu_c[0]) if single else (mu_v, mu_c)


def _uncertainty(f: np.ndarray, params: ModelParams, config: ModelConfig):
    global uncertainty_evaluations
    uncertainty_evaluations += 1
    head_pre = _rowwise(f, params.head_a_w) + params.head_a_b
    head_sig = sigmoid(head_pre)
    head_out_pre = _rowwise(head_sig, params.head_b_w) + params.head_b_b
    un_parts = hpp_slice(np.maximum(head_out_pre, 0.0), config)
    sv_pre = _part_affine(params.un_cvm_w, params.un_cvm_b, un_parts)
    sv = np.maximum(sv_pre, 0.0)
    sc_pre = sv + _part_affine(params.un_ccm_w, params.un_ccm_b, sv)
    sc = np.maximum(sc_pre, 0.0)
    return head_pre, head_sig, head_out_pre, un_parts, sv_pre, sv, sc_pre, sc


def uncertainty_branch(f: np.ndarray, params: ModelParams, config: ModelConfig):
    """Return non-negative ``(sigma_v, sigma_c)``; batched if ``f`` is 2-D."""
    single = np.ndim(f) == 1
    out = _uncertainty(np.atleast_2d(np.asarray(f, dtype=np.float64)), params, config)
    sv, sc = out[5], out[7]
    return (sv[0], sc[0]) if single else (sv, sc)


def reparam_sample(mu: np.ndarray, sigma: np.ndarray, rng: Rng) -> np.ndarray:
    """Draw ``mu + eps * sigma`` with fresh ``eps ~ N(0, I)``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ShapeError(f"mu {mu.shape} and sigma {sigma.shape} differ")
    if np.any(sigma < 0):
        raise InputError("sigma must be non-negative")
    eps = rng.standard_normal(mu.shape)
    return mu + eps * sigma


def forward(frames, params: ModelParams, config: ModelConfig, *, uncertainty: bool = True) -> ForwardCache:
    """Batched forward pass keeping every intermediate needed by :func:`backward`."""
    frames = _as_batch(frames)
    if frames.shape[-1] != config.frame_dim:
        raise ShapeError(f"frame_dim {frames.shape[-1]} != config.frame_dim {config.frame_dim}")
    z, idx, pooled = _backbone(frames, params)
    if z.shape[1] > 1:
        top2 = np.partition(z, -2, axis=1)[:, -2, :]
        gap = pooled - top2
    else:
        gap = np.full_like(pooled, np.inf)
    f = np.maximum(pooled, 0.0)
    parts = hpp_slice(f, config)
    mu_v, mu_c = identity_branch(f, params, config)
    cache = ForwardCache(frames=frames, argmax=idx, pooled=pooled, f=f, parts=parts,
                         mu_v=mu_v, mu_c=mu_c, runner_up_gap=gap)
    if uncertainty:
        (cache.head_pre, cache.head_sig, cache.head_out_pre, cache.un_parts,
         cache.sigma_v_pre, cache.sigma_v, cache.sigma_c_pre, cache.sigma_c) = _uncertainty(f, params, config)
    return cache


def kink_distances(cache: ForwardCache) -> list[np.ndarray]:
    """Distances of every piecewise-linear pre-activation from its kink."""
    out = [cache.pooled, cache.runner_up_gap]
    for name in ("head_out_pre", "sigma_v_pre", "sigma_c_pre"):
        arr = getattr(cache, name)
        if arr is not None:
            out.append(arr)
    return out


def activation_pattern(cache: ForwardCache) -> list[np.ndarray]:
    """Discrete state of every kink (ReLU signs and max-pool winners)."""
    pattern = [cache.argmax, cache.pooled > 0]
    for name in ("head_out_pre", "sigma_v_pre", "sigma_c_pre"):
        arr = getattr(cache, name)
        if arr is not None:
            pattern.append(arr > 0)
    return pattern


def backward(cache: ForwardCache, params: ModelParams, config: ModelConfig,
             g_mu_v=None, g_mu_c=None, g_sigma_v=None, g_sigma_c=None) -> ModelParams:
    """Gradients of a scalar loss given its gradients w.r.t. the branch outputs.

    ReLU and max-pool use the zero subgradient at ties/kinks.
    """
    grads = params.zeros_like()
    N = cache.f.shape[0]
    g_f = np.zeros_like(cache.f)

    g_mu_v = np.zeros_like(cache.mu_v) if g_mu_v is None else g_mu_v.copy()
    if g_mu_c is not None:
        if config.two_stage:
            grads.id_ccm_w = np.einsum("nse,nsq->seq", g_mu_c, cache.mu_v)
            grads.id_ccm_b = g_mu_c.sum(axis=0)
            g_mu_v += g_mu_c + np.einsum("seq,nse->nsq", params.id_ccm_w, g_mu_c)
        else:
            g_mu_v += g_mu_c
    grads.id_cvm_w = np.einsum("nse,nsp->sep", g_mu_v, cache.parts)
    grads.id_cvm_b = g_mu_v.sum(axis=0)
    g_f += np.einsum("sep,nse->nsp", params.id_cvm_w, g_mu_v).reshape(N, -1)

    if g_sigma_v is not None or g_sigma_c is not None:
        if cache.sigma_v is None:
            raise InputError("forward pass ran without the uncertainty branch")
        g_sv = np.zeros_like(cache.sigma_v) if g_sigma_v is None else g_sigma_v.copy()
        if g_sigma_c is not None:
            g_sc_pre = g_sigma_c * (cache.sigma_c_pre > 0)
            grads.un_ccm_w = np.einsum("nse,nsq->seq", g_sc_pre, cache.sigma_v)
            grads.un_ccm_b = g_sc_pre.sum(axis=0)
            g_sv += g_sc_pre + np.einsum("seq,nse->nsq", params.un_ccm_w, g_sc_pre)
        g_sv_pre = g_sv * (cache.sigma_v_pre > 0)
        grads.un_cvm_w = np.einsum("nse,nsp->sep", g_sv_pre, cache.un_parts)
        grads.un_cvm_b = g_sv_pre.sum(axis=0)
        g_h = np.einsum("sep,nse->nsp", params.un_cvm_w, g_sv_pre).reshape(N, -1)
        g_h_pre = g_h * (cache.head_out_pre > 0)
        grads.head_b_w = g_h_pre.T @ cache.head_sig
        grads.head_b_b = g_h_pre.sum(axis=0)
        g_sig = g_h_pre @ params.head_b_w
        g_a = g_sig * cache.head_sig * (1.0 - cache.head_sig)
        grads.head_a_w = g_a.T @ cache.f
        grads.head_a_b = g_a.sum(axis=0)
        g_f += g_a @ params.head_a_w

    g_pooled = g_f * (cache.pooled > 0)
    winners = np.take_along_axis(cache.frames, cache.argmax[:, :, None], axis=1)  # (N, F, D)
    grads.backbone_w = np.einsum("nf,nfd->fd", g_pooled, winners)
    grads.backbone_b = g_pooled.sum(axis=0)
    return grads


def inference_embed(frames, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """``mu_c`` part embeddings used at test time, ``(S, embed_dim)`` per sequence."""
    f = backbone_forward(frames, params, config)
    return identity_branch(f, params, config)[1]


# checkpoint I/O ------------------------------------------------------------

def _matrix_entries(name: str, arr: np.ndarray) -> dict[str, dict]:
    def entry(a: np.ndarray) -> dict:
        a2 = a.reshape(a.shape[0], -1) if a.ndim == 2 else a.reshape(-1, 1)
        return {"rows": int(a2.shape[0]), "cols": int(a2.shape[1]), "data": [float(v) for v in a2.ravel()]}

    if arr.ndim == 3:
        return {f"{name}.{p}": entry(arr[p]) for p in range(arr.shape[0])}
    if arr.ndim == 2 and name.endswith("_b"):
        return {f"{name}.{p}": entry(arr[p]) for p in range(arr.shape[0])}
    return {name: entry(arr)}


def checkpoint_document(params: ModelParams, config: ModelConfig, meta: dict | None = None) -> dict:
    tensors: dict[str, dict] = {}
    for name, arr in params.items():
        tensors.update(_matrix_entries(name, arr))
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, "model_config": config.to_dict()}
    if meta:
        header.update(meta)
    return {"header": header, "params": tensors}


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: ModelParams, config: ModelConfig, meta: dict | None = None) -> None:
    doc = checkpoint_document(params, config, meta)
    atomic_write_text(path, json.dumps(doc, indent=None, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    """Read a checkpoint; returns ``(params, config, header)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        header = doc["header"]
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        config = ModelConfig.from_dict(header["model_config"])
        tensors = doc["params"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    def matrix(key: str) -> np.ndarray:
        try:
            e = tensors[key]
            return np.array(e["data"], dtype=np.float64).reshape(e["rows"], e["cols"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"bad tensor {key!r} in {path}: {exc}") from exc

    out = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 3 or (len(shape) == 2 and name.endswith("_b")):
            out[name] = np.stack([matrix(f"{name}.{p}") for p in range(shape[0])]).reshape(shape)
        else:
            out[name] = matrix(name).reshape(shape)
    params = ModelParams(**out)
    params.check(config)
    return params, config, header
