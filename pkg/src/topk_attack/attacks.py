"""
Gradient-sign attacks under an L-infinity budget.

All attacks take a single input ``(d,)`` or a batch ``(n, d)``; batched
samples are attacked independently. Randomness (input diversity) comes from
one generator per sample seeded with ``(seed, index_offset + i)``, so a
sample's perturbation does not depend on how samples are chunked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .losses import CE_LL, InterestSpec, LossKind, as_loss, logit_gradient
from .nncore import backprop_input, forward


@dataclass(frozen=True)
class KernelSpec:
    size: int = 3
    sigma: float = 1.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError("only gaussian kernels are supported")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError("kernel size must be a positive odd number")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @classmethod
    def parse(cls, text):
        size, _, sigma = str(text).partition(":")
        return cls(int(size), float(sigma) if sigma else 1.0)

    def weights(self):
        r = self.size // 2
        ax = np.arange(-r, r + 1, dtype=np.float64)
        k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * self.sigma**2))
        return k / k.sum()


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int
    loss: LossKind = LossKind("ce")
    targeted: bool = False
    momentum_mu: float = 0.0
    di_prob: float = 0.0
    ti_kernel: KernelSpec | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", as_loss(self.loss))
        if isinstance(self.ti_kernel, (str, dict)):
            k = self.ti_kernel
            object.__setattr__(self, "ti_kernel", KernelSpec.parse(k) if isinstance(k, str) else KernelSpec(**k))
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if int(self.steps) < 1:
            raise ValueError("steps must be at least 1")
        if self.momentum_mu < 0:
            raise ValueError("momentum_mu must be >= 0")
        if not 0.0 <= self.di_prob <= 1.0:
            raise ValueError("di_prob must lie in [0, 1]")
        if self.targeted and self.loss.uses_ll:
            raise ValueError(f"loss {self.loss} already picks its own class; it cannot be targeted")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = str(self.loss)
        d["ti_kernel"] = None if self.ti_kernel is None else asdict(self.ti_kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return AttackConfig.from_dict(d)


@dataclass
class Perturbation:
    """A crafted perturbation and its size; norms are per sample for batches."""

    delta: np.ndarray
    l1_mean_abs: object
    l2: object
    linf: object

    @classmethod
    def of(cls, delta):
        delta = np.asarray(delta, dtype=np.float64)
        a = np.abs(delta)
        l1, l2, linf = a.mean(axis=-1), np.sqrt((delta * delta).sum(axis=-1)), a.max(axis=-1, initial=0.0)
        if delta.ndim == 1:
            l1, l2, linf = float(l1), float(l2), float(linf)
        return cls(delta, l1, l2, linf)


class StepNorms(NamedTuple):
    """Perturbation norms after each iteration, shape (steps,) or (steps, n)."""

    l1_mean_abs: np.ndarray
    l2: np.ndarray
    linf: np.ndarray


def project_linf(x_clean, x_adv, epsilon):
    """Clip x_adv into the epsilon L-infinity ball around x_clean, then into [0, 1]."""
    x_clean = np.asarray(x_clean, dtype=np.float64)
    delta = np.clip(np.asarray(x_adv, dtype=np.float64) - x_clean, -epsilon, epsilon)
    return np.clip(x_clean + delta, 0.0, 1.0)


def _require_grid(x, grid, what):
    if grid is None:
        raise ValueError(f"{what} is defined only for image-grid inputs")
    h, w = grid
    if x.shape[-1] != h * w:
        raise ValueError(f"input dim {x.shape[-1]} does not match grid {grid}")


def _shift(img, dy, dx):
    """Shift (..., h, w) images by (dy, dx) pixels, filling with zeros."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def _di_draw(rng, p):
    """One pad-and-crop draw: (applied, dy, dx).

    The image sits at a random offset o in {0,1,2}^2 of a (side+2)^2 zero
    canvas and is cropped back at offset c with |c - o| <= 1 per axis, so
    the net content shift o - c is at most one pixel along each axis.
    """
    u = rng.random()
    o = rng.integers(0, 3, size=2)
    lo, hi = np.maximum(o - 1, 0), np.minimum(o + 1, 2)
    c = lo + np.floor(rng.random(2) * (hi - lo + 1)).astype(np.int64)
    shift = o - c
    return bool(u < p), int(shift[0]), int(shift[1])


def _as_images(x, grid, what):
    """Return (flat batch, grid, restore) for a 2-D image or flattened input with ``grid``."""
    x = np.asarray(x, dtype=np.float64)
    if grid is None:
        if x.ndim != 2:
            raise ValueError(f"{what} is defined only for image-grid inputs; pass a 2-D image or grid=")
        grid = x.shape
        return x.reshape(1, -1), grid, lambda out: out.reshape(grid)
    _require_grid(x, grid, what)
    if x.ndim == 1:
        return x[None], tuple(grid), lambda out: out[0]
    return x, tuple(grid), lambda out: out


def di_transform(x, p, seed=0, grid=None):
    """
    Random pad-and-crop applied with probability ``p``.

    ``x`` is a 2-D image, or flattened image(s) together with
    ``grid=(height, width)``. Sample ``i`` of a batch draws from the
    generator seeded with ``(seed, i)``.
    """
    xb, grid, restore = _as_images(x, grid, "input diversity")
    rngs = [np.random.default_rng([seed, i]) for i in range(len(xb))]
    out, _ = _apply_di(xb, p, rngs, grid)
    return restore(out)


def _apply_di(xb, p, rngs, grid):
    h, w = grid
    imgs = xb.reshape(len(xb), h, w)
    out = imgs.copy()
    shifts = []
    for i, rng in enumerate(rngs):
        applied, dy, dx = _di_draw(rng, p)
        if applied:
            out[i] = _shift(imgs[i], dy, dx)
            shifts.append((dy, dx))
        else:
            shifts.append(None)
    return out.reshape(xb.shape), shifts


def _di_adjoint(gb, shifts, grid):
    h, w = grid
    imgs = gb.reshape(len(gb), h, w)
    out = imgs.copy()
    for i, s in enumerate(shifts):
        if s is not None:
            out[i] = _shift(imgs[i], -s[0], -s[1])
    return out.reshape(gb.shape)


def ti_smooth(grad, kernel: KernelSpec, grid=None):
    """2-D convolution of a gradient image (or flattened batch + grid) with a normalized Gaussian, zero padding."""
    gb, grid, restore = _as_images(grad, grid, "translation-invariant smoothing")
    return restore(_smooth(gb, kernel, grid))


def _smooth(gb, kernel, grid):
    h, w = grid
    imgs = gb.reshape(len(gb), h, w)
    k = kernel.weights()
    r = kernel.size // 2
    out = np.zeros_like(imgs)
    # the kernel is symmetric, so correlation and convolution coincide
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out += k[dy + r, dx + r] * _shift(imgs, -dy, -dx)
    return out.reshape(gb.shape)


def _batch_interest(interest, n):
    spec = interest if isinstance(interest, InterestSpec) else InterestSpec(interest)

    def arr(v):
        return None if v is None else np.broadcast_to(np.asarray(v, dtype=np.int64), (n,)).copy()

    return InterestSpec(arr(spec.gt_class), arr(spec.target_class), arr(spec.ll_class))


def ifgsm(model, x, interest, config: AttackConfig, grid=None, index_offset=0):
    """
    Iterative gradient-sign attack with optional momentum, input diversity
    and gradient smoothing.

    Each iteration: transform the current adversarial input (input
    diversity), take the input gradient of the loss, smooth it, fold it
    into the momentum buffer, step by alpha along its sign, project back
    into the epsilon ball and the valid pixel range. Untargeted attacks
    ascend the loss; targeted attacks descend the loss taken at the target
    class. The perturbation starts at zero.

    Returns the final :class:`Perturbation` and per-step :class:`StepNorms`.
    """
    cfg = config
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if (cfg.di_prob > 0 or cfg.ti_kernel is not None) and grid is None:
        raise ValueError("input diversity and gradient smoothing need image-grid inputs (pass grid=)")
    if grid is not None:
        _require_grid(xb, grid, "attack")

    spec = _batch_interest(interest, len(xb))
    if cfg.loss.uses_ll and spec.ll_class is None:
        spec = spec.frozen_ll(forward(model, xb)[0])
    if cfg.targeted and not spec.targeted:
        raise ValueError("a targeted attack needs target classes")
    if not cfg.targeted and spec.targeted:
        spec = InterestSpec(spec.gt_class, None, spec.ll_class)
    direction = -1.0 if cfg.targeted else 1.0

    rngs = [np.random.default_rng([cfg.seed, index_offset + i]) for i in range(len(xb))]
    x_adv = xb.copy()
    momentum = np.zeros_like(xb)
    l1s, l2s, linfs = [], [], []
    for _ in range(int(cfg.steps)):
        x_in, shifts = (x_adv, None)
        if cfg.di_prob > 0:
            x_in, shifts = _apply_di(x_adv, cfg.di_prob, rngs, grid)
        z, trace = forward(model, x_in)
        grad = backprop_input(model, trace, logit_gradient(cfg.loss, z, spec))
        if shifts is not None:
            grad = _di_adjoint(grad, shifts, grid)
        if cfg.ti_kernel is not None:
            grad = _smooth(grad, cfg.ti_kernel, grid)
        norm = np.abs(grad).sum(axis=1, keepdims=True)
        scaled = np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        momentum = cfg.momentum_mu * momentum + scaled
        x_adv = x_adv + direction * cfg.alpha * np.sign(momentum)
        x_adv = project_linf(xb, x_adv, cfg.epsilon)
        p = Perturbation.of(x_adv - xb)
        l1s.append(p.l1_mean_abs)
        l2s.append(p.l2)
        linfs.append(p.linf)

    pert = Perturbation.of(x_adv - xb)
    norms = StepNorms(np.array(l1s), np.array(l2s), np.array(linfs))
    if single:
        pert = Perturbation.of(pert.delta[0])
        norms = StepNorms(*(a[:, 0] for a in norms))
    return pert, norms


def fgsm(model, x, interest, epsilon, loss=LossKind("ce"), targeted=False):
    """One signed step of size epsilon; identical to a single-step :func:`ifgsm`."""
    cfg = AttackConfig(epsilon=epsilon, alpha=epsilon, steps=1, loss=loss, targeted=targeted)
    return ifgsm(model, x, interest, cfg)[0]


def step_ll(model, x, epsilon):
    """Single step ascending log p of the least-likely class of the clean input."""
    z = forward(model, x)[0]
    spec = InterestSpec(np.argmax(z, axis=-1)).frozen_ll(z)
    return fgsm(model, x, spec, epsilon, CE_LL)
