"""Compact per-pixel segmentation network with hand-derived gradients.

Architecture: 3x3 same-padded convolution (backbone) -> per-channel affine
normalization with fixed statistics (norm) -> ReLU -> 1x1 linear map to Q
classes (classifier). Parameters live in three named groups so the
global/cluster-specific split can select any subset of them.

Flat layouts (float64):
  backbone:   kernel [f][c][ki][kj] then bias [f]
  norm:       scale [f] then shift [f]
  classifier: weights [q][f] then bias [q]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "IGNORE",
    "ArchConfig",
    "ParamSet",
    "GROUP_NAMES",
    "init_params",
    "forward",
    "ce_loss_grad",
    "kd_loss_grad",
    "pseudo_label",
    "sgd_step",
    "split_params",
    "merge_params",
    "zeros_like",
    "combine",
]

IGNORE = -1
GROUP_NAMES = ("backbone", "norm", "classifier")
MOMENTUM = 0.9


@dataclass(frozen=True)
class ArchConfig:
    """Shapes of the network: input channels, hidden feature maps, classes."""

    in_channels: int = 3
    hidden: int = 8
    classes: int = 5

    def group_sizes(self) -> dict[str, int]:
        c, f, q = self.in_channels, self.hidden, self.classes
        return {"backbone": f * c * 9 + f, "norm": 2 * f, "classifier": q * f + q}


@dataclass
class ParamSet:
    """Named parameter groups as flat float64 vectors."""

    arch: ArchConfig
    groups: dict[str, np.ndarray]

    def copy(self) -> "ParamSet":
        return ParamSet(self.arch, {k: v.copy() for k, v in self.groups.items()})

    def validate(self) -> None:
        sizes = self.arch.group_sizes()
        for name, size in sizes.items():
            if name not in self.groups:
                raise ValueError(f"missing parameter group {name!r}")
            if self.groups[name].shape != (size,):
                raise ValueError(
                    f"group {name!r} has shape {self.groups[name].shape}, expected ({size},)"
                )
            if not np.all(np.isfinite(self.groups[name])):
                raise ValueError(f"group {name!r} contains non-finite values")


def _unpack(params: ParamSet):
    a = params.arch
    c, f, q = a.in_channels, a.hidden, a.classes
    bb = params.groups["backbone"]
    kernel = bb[: f * c * 9].reshape(f, c, 3, 3)
    kbias = bb[f * c * 9 :]
    nm = params.groups["norm"]
    scale, shift = nm[:f], nm[f:]
    cl = params.groups["classifier"]
    cw = cl[: q * f].reshape(q, f)
    cb = cl[q * f :]
    return kernel, kbias, scale, shift, cw, cb


def _pack(arch: ArchConfig, kernel, kbias, scale, shift, cw, cb) -> ParamSet:
    return ParamSet(
        arch,
        {
            "backbone": np.concatenate([kernel.reshape(-1), kbias]),
            "norm": np.concatenate([scale, shift]),
            "classifier": np.concatenate([cw.reshape(-1), cb]),
        },
    )


def init_params(arch: ArchConfig, seed: int) -> ParamSet:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per weight
    tensor; norm starts at identity (scale 1, shift 0)."""
    rng = np.random.default_rng(seed)
    c, f, q = arch.in_channels, arch.hidden, arch.classes
    bb_bound = 1.0 / np.sqrt(c * 9)
    cl_bound = 1.0 / np.sqrt(f)
    kernel = rng.uniform(-bb_bound, bb_bound, size=(f, c, 3, 3))
    kbias = rng.uniform(-bb_bound, bb_bound, size=f)
    scale = np.ones(f)
    shift = np.zeros(f)
    cw = rng.uniform(-cl_bound, cl_bound, size=(q, f))
    cb = rng.uniform(-cl_bound, cl_bound, size=q)
    return _pack(arch, kernel, kbias, scale, shift, cw, cb)


def _im2col(img: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 patches: (H, W, C) -> (H*W, C*9), row [c][ki][kj] order."""
    h, w, c = img.shape
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # windows: (H, W, C, 3, 3) -> (H*W, C*9)
    return np.ascontiguousarray(windows).reshape(h * w, c * 9)


def _forward_cache(params: ParamSet, img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != params.arch.in_channels:
        raise ValueError(
            f"image shape {img.shape} does not match {params.arch.in_channels} input channels"
        )
    h, w, _ = img.shape
    kernel, kbias, scale, shift, cw, cb = _unpack(params)
    patches = _im2col(img)  # (H*W, C*9)
    z = patches @ kernel.reshape(kernel.shape[0], -1).T + kbias  # (H*W, F)
    a = z * scale + shift
    r = np.maximum(a, 0.0)
    logits = (r @ cw.T + cb).reshape(h, w, -1)  # (H, W, Q)
    return logits, (patches, z, a, r)


def forward(params: ParamSet, img: np.ndarray) -> np.ndarray:
    """Per-pixel class logits of shape (H, W, Q)."""
    logits, _ = _forward_cache(params, img)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _backprop(params: ParamSet, cache, dlogits: np.ndarray) -> ParamSet:
    """Push dL/dlogits (H, W, Q) back to every parameter group."""
    patches, z, a, r = cache
    kernel, kbias, scale, shift, cw, cb = _unpack(params)
    dl = dlogits.reshape(-1, dlogits.shape[-1])  # (H*W, Q)

    d_cw = dl.T @ r
    d_cb = dl.sum(axis=0)
    d_r = dl @ cw  # (H*W, F)
    d_a = d_r * (a > 0.0)
    d_scale = (d_a * z).sum(axis=0)
    d_shift = d_a.sum(axis=0)
    d_z = d_a * scale

    d_kernel = (d_z.T @ patches).reshape(kernel.shape)
    d_kbias = d_z.sum(axis=0)

    return _pack(params.arch, d_kernel, d_kbias, d_scale, d_shift, d_cw, d_cb)


def ce_loss_grad(
    params: ParamSet, img: np.ndarray, labels: np.ndarray
) -> tuple[float, ParamSet]:
    """Softmax cross-entropy averaged over non-IGNORE pixels, with gradient.

    All-IGNORE label maps yield zero loss and zero gradient.
    """
    logits, cache = _forward_cache(params, img)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:2]:
        raise ValueError(f"labels shape {labels.shape} does not match pixel grid {logits.shape[:2]}")
    valid = labels != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, zeros_like(params)
    probs = softmax(logits)
    h, w, q = logits.shape
    safe_labels = np.where(valid, labels, 0)
    picked = probs[np.arange(h)[:, None], np.arange(w)[None, :], safe_labels]
    loss = float(-np.sum(np.log(picked[valid])) / n_valid)

    onehot = np.zeros_like(probs)
    onehot[np.arange(h)[:, None], np.arange(w)[None, :], safe_labels] = 1.0
    dlogits = (probs - onehot) * valid[:, :, None] / n_valid
    return loss, _backprop(params, cache, dlogits)


def kd_loss_grad(
    params: ParamSet, img: np.ndarray, teacher_logits: np.ndarray
) -> tuple[float, ParamSet]:
    """Pixel-mean cross-entropy from teacher soft predictions (temperature 1)."""
    logits, cache = _forward_cache(params, img)
    if teacher_logits.shape != logits.shape:
        raise ValueError(
            f"teacher logits {teacher_logits.shape} do not match student {logits.shape}"
        )
    n_pix = logits.shape[0] * logits.shape[1]
    p_t = softmax(teacher_logits)
    log_p_s = logits - logits.max(axis=-1, keepdims=True)
    log_p_s = log_p_s - np.log(np.exp(log_p_s).sum(axis=-1, keepdims=True))
    loss = float(-np.sum(p_t * log_p_s) / n_pix)
    dlogits = (softmax(logits) - p_t) / n_pix
    return loss, _backprop(params, cache, dlogits)


def pseudo_label(
    teacher_logits: np.ndarray, conf_threshold: float, class_fraction: float
) -> np.ndarray:
    """Hard pseudo-labels gated by confidence and a per-class quantile.

    For each class q the threshold is min(conf_threshold, the
    (1 - class_fraction)-quantile of max-softmax over pixels argmaxing to q);
    pixels below their class threshold become IGNORE.
    """
    if not 0.0 < conf_threshold < 1.0:
        raise ValueError(f"conf_threshold must be in (0, 1), got {conf_threshold}")
    if not 0.0 < class_fraction <= 1.0:
        raise ValueError(f"class_fraction must be in (0, 1], got {class_fraction}")
    probs = softmax(teacher_logits)
    conf = probs.max(axis=-1)
    labels = probs.argmax(axis=-1)
    out = np.full(labels.shape, IGNORE, dtype=np.int64)
    for q in range(teacher_logits.shape[-1]):
        mask = labels == q
        if not np.any(mask):
            continue
        tau = min(conf_threshold, float(np.quantile(conf[mask], 1.0 - class_fraction)))
        keep = mask & (conf >= tau)
        out[keep] = q
    return out


def self_training_loss_grad(
    params: ParamSet,
    img: np.ndarray,
    labels: np.ndarray,
    teacher_logits: np.ndarray,
    lambda_kd: float,
) -> tuple[float, float, ParamSet]:
    """Fused pseudo-CE + lambda_kd * KD: one forward and one backward pass.

    Numerically identical (to combination round-off) to calling ce_loss_grad
    and kd_loss_grad separately and summing the gradients.
    """
    logits, cache = _forward_cache(params, img)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:2]:
        raise ValueError(f"labels shape {labels.shape} does not match pixel grid {logits.shape[:2]}")
    if teacher_logits.shape != logits.shape:
        raise ValueError(
            f"teacher logits {teacher_logits.shape} do not match student {logits.shape}"
        )
    h, w, q = logits.shape
    probs = softmax(logits)
    log_p_s = logits - logits.max(axis=-1, keepdims=True)
    log_p_s = log_p_s - np.log(np.exp(log_p_s).sum(axis=-1, keepdims=True))

    valid = labels != IGNORE
    n_valid = int(valid.sum())
    dlogits = np.zeros_like(logits)
    loss_p = 0.0
    if n_valid > 0:
        safe_labels = np.where(valid, labels, 0)
        picked = log_p_s[np.arange(h)[:, None], np.arange(w)[None, :], safe_labels]
        loss_p = float(-np.sum(picked[valid]) / n_valid)
        onehot = np.zeros_like(probs)
        onehot[np.arange(h)[:, None], np.arange(w)[None, :], safe_labels] = 1.0
        dlogits += (probs - onehot) * valid[:, :, None] / n_valid

    n_pix = h * w
    p_t = softmax(teacher_logits)
    loss_kd = float(-np.sum(p_t * log_p_s) / n_pix)
    dlogits += lambda_kd * (probs - p_t) / n_pix
    return loss_p, loss_kd, _backprop(params, cache, dlogits)


def zeros_like(params: ParamSet) -> ParamSet:
    return ParamSet(params.arch, {k: np.zeros_like(v) for k, v in params.groups.items()})


def combine(terms: list[tuple[float, ParamSet]]) -> ParamSet:
    """Weighted sum of ParamSets sharing an architecture."""
    if not terms:
        raise ValueError("combine requires at least one term")
    arch = terms[0][1].arch
    out = {
        name: sum(wt * ps.groups[name] for wt, ps in terms)
        for name in terms[0][1].groups
    }
    return ParamSet(arch, out)


def sgd_step(
    params: ParamSet,
    grad: ParamSet,
    lr: float,
    velocity: dict[str, np.ndarray] | None = None,
) -> tuple[ParamSet, dict[str, np.ndarray]]:
    """Heavy-ball SGD: v <- 0.9 v + g; p <- p - lr v. Returns (params, velocity)."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.groups.items()}
    new_v = {k: MOMENTUM * velocity[k] + grad.groups[k] for k in params.groups}
    new_p = {k: params.groups[k] - lr * new_v[k] for k in params.groups}
    return ParamSet(params.arch, new_p), new_v


def split_params(
    params: ParamSet, cluster_groups: set[str]
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Partition groups into (theta, phi): cluster-specific vs global slices."""
    unknown = set(cluster_groups) - set(GROUP_NAMES)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    theta = {k: v for k, v in params.groups.items() if k in cluster_groups}
    phi = {k: v for k, v in params.groups.items() if k not in cluster_groups}
    return theta, phi


def merge_params(
    arch: ArchConfig, theta: dict[str, np.ndarray], phi: dict[str, np.ndarray]
) -> ParamSet:
    """Reassemble a full ParamSet from disjoint theta/phi slices."""
    overlap = set(theta) & set(phi)
    if overlap:
        raise ValueError(f"theta and phi overlap on {sorted(overlap)}")
    groups = {**theta, **phi}
    if set(groups) != set(GROUP_NAMES):
        raise ValueError(f"incomplete parameter set: have {sorted(groups)}")
    return ParamSet(arch, {k: groups[k] for k in GROUP_NAMES})
