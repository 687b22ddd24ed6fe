"""
Attack losses and their closed-form gradients with respect to the logits.

Every function accepts a single logit vector ``(K,)`` or a batch ``(n, K)``.
The class a loss is "about" comes from an :class:`InterestSpec`:

* ce, cw, rce, ce-temp, wce use the target class when one is set and the
  ground-truth class otherwise;
* ce-ll and rce-ll use the least-likely class, frozen in the spec or
  recomputed as the argmin of the logits being evaluated.

Ties in argmax/argmin go to the lowest class index (numpy's default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .nncore import softmax

LOSS_NAMES = ("ce", "ce-ll", "cw", "rce", "rce-ll", "ce-temp:<T_e>", "wce:<w>")
_PLAIN = ("ce", "ce-ll", "cw", "rce", "rce-ll")
LL_KINDS = ("ce-ll", "rce-ll")


class GradientOnlyLossError(ValueError):
    """The loss is defined only through its logit gradient."""


@dataclass(frozen=True)
class LossKind:
    name: str
    param: float | None = None  # temperature for ce-temp, weight for wce

    def __post_init__(self):
        if self.name in _PLAIN:
            if self.param is not None:
                raise ValueError(f"loss {self.name!r} takes no parameter")
        elif self.name in ("ce-temp", "wce"):
            if self.param is None or not self.param > 0:
                raise ValueError(f"loss {self.name!r} needs a positive parameter")
        else:
            raise ValueError(f"unknown loss {self.name!r}; valid: {', '.join(LOSS_NAMES)}")

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        text = text.strip().lower()
        name, _, arg = text.partition(":")
        if not arg:
            return cls(name)
        try:
            value = float(arg)
        except ValueError:
            raise ValueError(f"bad parameter in loss {text!r}; valid: {', '.join(LOSS_NAMES)}") from None
        return cls(name, value)

    def __str__(self):
        return self.name if self.param is None else f"{self.name}:{self.param:g}"

    @property
    def uses_ll(self):
        return self.name in LL_KINDS


CE = LossKind("ce")
CE_LL = LossKind("ce-ll")
CW = LossKind("cw")
RCE = LossKind("rce")
RCE_LL = LossKind("rce-ll")


def ce_temp(temperature):
    return LossKind("ce-temp", float(temperature))


def wce(w):
    return LossKind("wce", float(w))


def as_loss(kind) -> LossKind:
    return kind if isinstance(kind, LossKind) else LossKind.parse(str(kind))


@dataclass(frozen=True)
class InterestSpec:
    """
    Classes an attack is steering. Fields may be ints (one sample) or
    integer arrays (one entry per sample of a batch).
    """

    gt_class: object
    target_class: object = None
    ll_class: object = None  # frozen least-likely class; derived from logits when None

    @property
    def targeted(self):
        return self.target_class is not None

    def frozen_ll(self, clean_logits) -> "InterestSpec":
        """Return a copy with the least-likely class frozen from ``clean_logits``."""
        return InterestSpec(self.gt_class, self.target_class, np.argmin(clean_logits, axis=-1))


def _interest(interest) -> InterestSpec:
    return interest if isinstance(interest, InterestSpec) else InterestSpec(interest)


def interest_class(kind, z, interest) -> np.ndarray:
    """The class index each sample's loss is computed against."""
    kind, interest = as_loss(kind), _interest(interest)
    z = np.asarray(z, dtype=np.float64)
    if kind.uses_ll:
        c = interest.ll_class if interest.ll_class is not None else np.argmin(z, axis=-1)
    else:
        c = interest.target_class if interest.targeted else interest.gt_class
    c = np.asarray(c, dtype=np.int64)
    K = z.shape[-1]
    if np.any(c < 0) or np.any(c >= K):
        raise ValueError(f"class index out of range for K={K}")
    return np.broadcast_to(c, z.shape[:-1]).copy()


def _onehot(c, shape):
    y = np.zeros(shape)
    np.put_along_axis(y, c[..., None], 1.0, axis=-1)
    return y


def _take(a, c):
    return np.take_along_axis(a, c[..., None], axis=-1)[..., 0]


def runner_up(z, c) -> np.ndarray:
    """argmax over classes other than ``c`` (the j class of the CW loss)."""
    z = np.asarray(z, dtype=np.float64)
    masked = z.copy()
    np.put_along_axis(masked, np.asarray(c)[..., None], -np.inf, axis=-1)
    return np.argmax(masked, axis=-1)


def loss_value(kind, z, interest):
    """
    Loss values that an untargeted attack ascends.

    ce      -log p_c
    ce-ll   log p_ll
    cw      z_j - z_c, j the strongest class other than c
    rce     -log p_c + (1/K) sum_k log p_k  (equals mean(z) - z_c)
    rce-ll  log p_ll - (1/K) sum_k log p_k
    ce-temp -log p_c with softmax(z / T_e)
    """
    kind = as_loss(kind)
    z = np.asarray(z, dtype=np.float64)
    c = interest_class(kind, z, interest)
    if kind.name == "wce":
        raise GradientOnlyLossError("the wce loss is defined only through its logit gradient")
    if kind.name == "cw":
        out = _take(z, runner_up(z, c)) - _take(z, c)
    else:
        scaled = z / kind.param if kind.name == "ce-temp" else z
        logp = scaled - logsumexp(scaled, axis=-1, keepdims=True)
        lp_c = _take(logp, c)
        if kind.name in ("ce", "ce-temp"):
            out = -lp_c
        elif kind.name == "ce-ll":
            out = lp_c
        elif kind.name == "rce":
            out = -lp_c + logp.mean(axis=-1)
        else:  # rce-ll
            out = lp_c - logp.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _p_minus_onehot(p, c, w=1.0):
    """w*p - onehot(c), with the c entry formed as (w-1) - w*sum_{k != c} p_k.

    Summing the other probabilities keeps the c entry accurate when p_c
    rounds to 1 (tiny temperatures), where 1 - p_c would cancel to zero.
    """
    g = w * p
    others = np.where(_onehot(c, p.shape) > 0, 0.0, p).sum(axis=-1)
    np.put_along_axis(g, c[..., None], ((w - 1.0) - w * others)[..., None], axis=-1)
    return g


def logit_gradient(kind, z, interest) -> np.ndarray:
    """
    dL/dZ in closed form.

    ce       P - Y_c
    ce-ll    Y_ll - P
    cw       Y_j - Y_c
    rce      (1/K) 1 - Y_c
    rce-ll   Y_ll - (1/K) 1
    ce-temp  (P_e - Y_c) / T_e
    wce      w P - Y_c
    """
    kind = as_loss(kind)
    z = np.asarray(z, dtype=np.float64)
    c = interest_class(kind, z, interest)
    K = z.shape[-1]
    name = kind.name
    if name in ("ce", "ce-temp", "wce"):
        temp = kind.param if name == "ce-temp" else 1.0
        w = kind.param if name == "wce" else 1.0
        g = _p_minus_onehot(softmax(z, temp), c, w)
        return g / temp if name == "ce-temp" else g
    if name == "ce-ll":
        return -_p_minus_onehot(softmax(z), c)
    if name == "cw":
        return _onehot(runner_up(z, c), z.shape) - _onehot(c, z.shape)
    y = _onehot(c, z.shape)
    if name == "rce":
        return np.full(z.shape, 1.0 / K) - y
    return y - np.full(z.shape, 1.0 / K)  # rce-ll


def gradient_direction_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)
    if sa == 0 or sb == 0:
        raise ValueError("cosine is undefined for a zero vector")
    # rescale first: tiny-temperature gradients can have entries whose squares underflow
    a, b = a / sa, b / sb
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def zero_sum_of_gradient(kind, z, interest):
    s = logit_gradient(kind, z, interest).sum(axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def training_grad(kind):
    """Adapt a loss to the ``grad_fn(z, labels)`` signature used by training."""
    kind = as_loss(kind)

    def grad_fn(z, labels):
        return logit_gradient(kind, z, InterestSpec(np.asarray(labels)))

    grad_fn.__name__ = f"grad_{str(kind).replace(':', '_').replace('-', '_')}"
    return grad_fn
