"""
Rank-based attack metrics.

Ranks are 1-indexed with rank 1 the largest logit; equal logits are ordered
by class index, lower first. A non-targeted attack succeeds at k when the
interest class ends up ranked strictly below the top k (ICR > k); a targeted
attack succeeds at k when the target is inside the top k (ICR <= k).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import gradient_direction_cosine


def class_rank(z, c):
    """Rank of class ``c`` in logits ``z`` (both may be batched)."""
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.int64)
    zc = np.take_along_axis(z, np.broadcast_to(c, z.shape[:-1])[..., None], axis=-1)
    idx = np.arange(z.shape[-1])
    higher = (z > zc).sum(axis=-1)
    tied_before = ((z == zc) & (idx < c[..., None])).sum(axis=-1)
    r = 1 + higher + tied_before
    return int(r) if np.ndim(r) == 0 else r


def rank_vector(z):
    """Rank of every class; a permutation of 1..K along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    # stable sort of -z keeps lower indices first among ties
    order = np.argsort(-z, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, z.shape[-1] + 1) * np.ones_like(order), axis=-1)
    return ranks


@dataclass
class SampleRecord:
    clean_logits: np.ndarray
    adv_logits: np.ndarray
    gt_class: int
    target_class: int | None = None
    clean_pred: int = -1
    adv_pred: int = -1
    icr: int = 0
    correct: bool = False  # clean prediction matched gt
    norms: dict = field(default_factory=dict)  # l1_mean_abs, l2, linf of the perturbation
    model: str = ""
    index: int = -1

    def __post_init__(self):
        self.clean_logits = np.asarray(self.clean_logits, dtype=np.float64)
        self.adv_logits = np.asarray(self.adv_logits, dtype=np.float64)
        self.clean_pred = int(np.argmax(self.clean_logits))
        self.adv_pred = int(np.argmax(self.adv_logits))
        self.icr = class_rank(self.adv_logits, self.interest_class)
        self.correct = self.clean_pred == self.gt_class

    @property
    def interest_class(self):
        return self.gt_class if self.target_class is None else self.target_class

    @property
    def K(self):
        return len(self.clean_logits)

    def to_dict(self):
        d = asdict(self)
        d["clean_logits"] = self.clean_logits.tolist()
        d["adv_logits"] = self.adv_logits.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for derived in ("clean_pred", "adv_pred", "icr", "correct"):
            d.pop(derived, None)
        return cls(**d)

    def __eq__(self, other):
        return isinstance(other, SampleRecord) and self.to_dict() == other.to_dict()


def make_records(clean_logits, adv_logits, gt, target=None, norms=None, model="", start_index=0):
    """Build one :class:`SampleRecord` per row of the logit arrays."""
    n = len(clean_logits)
    out = []
    for i in range(n):
        nd = {} if norms is None else {k: float(np.asarray(v)[i]) for k, v in norms.items()}
        out.append(
            SampleRecord(
                clean_logits[i],
                adv_logits[i],
                int(gt[i]),
                None if target is None else int(target[i]),
                norms=nd,
                model=model,
                index=start_index + i,
            )
        )
    return out


def _icrs(records):
    if len(records) == 0:
        raise ValueError("no records")
    if isinstance(records, np.ndarray) and records.dtype != object:
        return records
    return np.array([r.icr for r in records])


def asr_at_k(records, k, targeted=False):
    """Fraction of successful attacks at rank threshold ``k``; accepts records or an ICR array."""
    icr = _icrs(records)
    return float((icr <= k).mean() if targeted else (icr > k).mean())


def olnr(record: SampleRecord) -> int:
    """Rank of the clean prediction among the adversarial logits."""
    return class_rank(record.adv_logits, record.clean_pred)


def nlor(record: SampleRecord) -> int:
    """Rank of the adversarial prediction among the clean logits."""
    return class_rank(record.clean_logits, record.adv_pred)


def nrt(record: SampleRecord) -> float:
    """Mean absolute rank displacement (1/K) sum_i |rank_adv(i) - rank_clean(i)|."""
    ra, rc = rank_vector(record.adv_logits), rank_vector(record.clean_logits)
    return float(np.abs(ra - rc).mean())


def logit_cosine(record: SampleRecord) -> float:
    return gradient_direction_cosine(record.clean_logits, record.adv_logits)


@dataclass
class ZeroSumStats:
    """Mean and standard deviation, across samples, of per-sample logit statistics."""

    sum: tuple
    abs_sum: tuple
    std: tuple
    min: tuple
    max: tuple
    n: int = 0

    @property
    def ratio(self):
        """|mean sum z| relative to mean sum |z|."""
        return abs(self.sum[0]) / self.abs_sum[0] if self.abs_sum[0] > 0 else 0.0

    def row(self):
        return {k: f"{m:.2f}±{s:.2f}" for k, (m, s) in
                (("Sum", self.sum), ("Abs. Sum", self.abs_sum), ("Std", self.std), ("Min", self.min), ("Max", self.max))}

    def to_dict(self):
        return asdict(self)


def zero_sum_stats(logit_set) -> ZeroSumStats:
    z = np.atleast_2d(np.asarray(logit_set, dtype=np.float64))
    if z.size == 0:
        raise ValueError("empty logit set")

    def ms(v):
        return (float(v.mean()), float(v.std()))

    return ZeroSumStats(
        sum=ms(z.sum(axis=1)),
        abs_sum=ms(np.abs(z).sum(axis=1)),
        std=ms(z.std(axis=1)),
        min=ms(z.min(axis=1)),
        max=ms(z.max(axis=1)),
        n=len(z),
    )


def icr_asr_consistency_check(records, K) -> bool:
    """
    For every k in 1..K, ASR@k computed from the ICR values must equal the
    rate obtained by checking top-k membership of the interest class
    directly in the adversarial logits.
    """
    if not records:
        return True
    targeted = records[0].target_class is not None
    for k in range(1, K + 1):
        direct = []
        for r in records:
            top = np.argsort(-r.adv_logits, kind="stable")[:k]
            inside = r.interest_class in top
            direct.append(inside if targeted else not inside)
        if asr_at_k(records, k, targeted) != float(np.mean(direct)):
            return False
    return True


def summarize(records, k_list=(1,), targeted=None):
    """Mean metrics over a record list, keyed by metric name."""
    if not records:
        raise ValueError("no records")
    if targeted is None:
        targeted = records[0].target_class is not None
    icr = np.array([r.icr for r in records], dtype=np.float64)
    out = {
        "n": len(records),
        "clean_acc": float(np.mean([r.correct for r in records])),
        "icr": float(icr.mean()),
        "olnr": float(np.mean([olnr(r) for r in records])),
        "nlor": float(np.mean([nlor(r) for r in records])),
        "nrt": float(np.mean([nrt(r) for r in records])),
        "cossim": float(np.mean([logit_cosine(r) for r in records])),
    }
    for k in k_list:
        out[f"asr@{k}"] = asr_at_k(icr.astype(np.int64), k, targeted)
    return out
