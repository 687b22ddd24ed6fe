"""
Experiment runners: surrogate-to-target transfer, alpha/T and temperature
sweeps, zero-sum training probes and robustness to image corruptions.

Every runner is a deterministic function of its spec. Trained models are
cached in-process (keyed by the JSON form of the data, model and training
specs) and optionally checkpointed to disk, so sweeps that share a spec
train each network once.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import data as data_mod
from .attacks import AttackConfig, ifgsm
from .data import Dataset, ImbalanceSpec, TransformSpec
from .losses import CE, CW, RCE, InterestSpec, ce_temp, training_grad, wce
from .metrics import ZeroSumStats, make_records, summarize, zero_sum_stats
from .nncore import InitScheme, Model, TrainingLog, init_model, load_model, logits, save_model, train

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHUNK = 256  # samples per crafting job; fixed so results never depend on the worker count
DEFAULT_EPS = 0.0627
METRIC_COLUMNS = ("icr_asr", "olnr", "nlor", "nrt", "cossim", "clean_acc", "norms")


@dataclass
class DataSpec:
    kind: str = "patterns"  # patterns | blobs | file
    K: int = 10
    side: int = 8  # patterns
    dim: int = 16  # blobs
    n_per_class: int = 150
    noise: float = 0.08  # patterns: uniform noise half-width
    levels: tuple = (0.465, 0.535)  # patterns: the two base-pattern intensities
    spread: float = 0.05  # blobs
    path: str | None = None  # file: JSON-lines dataset
    imbalance: dict | None = None  # ImbalanceSpec fields
    holdout_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("patterns", "blobs", "file"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("a file dataset needs a path")
        self.levels = tuple(self.levels)

    def build(self) -> Dataset:
        if self.kind == "patterns":
            d = data_mod.gen_patterns(self.K, self.side, self.n_per_class, self.noise, self.seed, self.levels)
        elif self.kind == "blobs":
            d = data_mod.gen_blobs(self.K, self.dim, self.n_per_class, self.spread, self.seed)
        else:
            d = data_mod.load_jsonl(self.path, self.K)
        if self.imbalance:
            d = data_mod.make_imbalanced(d, ImbalanceSpec(**self.imbalance))
        return d

    def splits(self) -> tuple[Dataset, Dataset]:
        return data_mod.split(self.build(), self.holdout_frac, self.seed)


@dataclass
class TrainSpec:
    epochs: int = 300
    lr: float = 0.05
    batch_size: int = 16
    weight_decay: float = 0.01
    init: str = "kaiming-uniform"
    init_mean: float = 0.0  # gaussian init only
    init_std: float = 1.0
    w: float = 1.0  # training loss: w * softmax - onehot; 1.0 is cross-entropy

    def scheme(self, seed) -> InitScheme:
        return InitScheme(self.init, self.init_mean, self.init_std, seed)


@dataclass
class ModelSpec:
    dims: tuple
    seed: int
    name: str = ""

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        if not self.name:
            self.name = "-".join(str(v) for v in self.dims) + f"@{self.seed}"


def _default_attack():
    return AttackConfig(DEFAULT_EPS, DEFAULT_EPS / 4, 20)


@dataclass
class ExperimentSpec:
    data: DataSpec = field(default_factory=DataSpec)
    surrogate: ModelSpec = field(default_factory=lambda: ModelSpec((64, 32, 10), 1, "surrogate"))
    targets: list = field(default_factory=lambda: [ModelSpec((64, 48, 10), 2, "target-48"),
                                                   ModelSpec((64, 24, 10), 3, "target-24")])
    train: TrainSpec = field(default_factory=TrainSpec)
    attack: AttackConfig = field(default_factory=_default_attack)
    k_list: tuple = (1, 5)
    metrics: tuple = METRIC_COLUMNS
    n_eval: int | None = None  # None: the whole holdout split
    seed: int = 0  # target-class draw
    workers: int = 1
    out_dir: str | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataSpec(**self.data)
        if isinstance(self.surrogate, dict):
            self.surrogate = ModelSpec(**self.surrogate)
        self.targets = [ModelSpec(**t) if isinstance(t, dict) else t for t in self.targets]
        if isinstance(self.train, dict):
            self.train = TrainSpec(**self.train)
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        self.k_list = tuple(int(k) for k in self.k_list)
        self.metrics = tuple(self.metrics)
        unknown = set(self.metrics) - set(METRIC_COLUMNS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}; valid: {', '.join(METRIC_COLUMNS)}")
        if not self.targets:
            raise ValueError("at least one target model is required")
        for t in self.targets:
            if t.dims == self.surrogate.dims and t.seed == self.surrogate.seed:
                raise ValueError(f"target {t.name} is identical to the surrogate")
            if t.dims[0] != self.surrogate.dims[0] or t.dims[-1] != self.surrogate.dims[-1]:
                raise ValueError(f"target {t.name} has different input or output size than the surrogate")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def targeted_default(cls, **kw):
        """Defaults for the targeted setting: 200 iterations."""
        return cls(attack=AttackConfig(DEFAULT_EPS, DEFAULT_EPS / 4, 200, targeted=True), **kw)

    def to_dict(self):
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        d["data"]["levels"] = list(self.data.levels)
        d["k_list"] = list(self.k_list)
        d["metrics"] = list(self.metrics)
        for m in [d["surrogate"], *d["targets"]]:
            m["dims"] = list(m["dims"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# training and caching

@dataclass
class Prepared:
    train_set: Dataset
    holdout: Dataset
    surrogate: Model
    targets: list  # [(name, Model)]
    logs: dict  # name -> TrainingLog


_MODEL_CACHE: dict = {}


def clear_cache():
    _MODEL_CACHE.clear()


def _cache_key(*parts):
    return json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts], sort_keys=True)


def train_model(model_spec: ModelSpec, train_set: Dataset, holdout: Dataset, tspec: TrainSpec,
                data_spec: DataSpec | None = None, checkpoint_dir=None) -> tuple[Model, TrainingLog | None]:
    """Train (or fetch from cache / checkpoint) one network."""
    key = _cache_key(data_spec, model_spec, tspec) if data_spec is not None else None
    if key is not None and key in _MODEL_CACHE:
        return _MODEL_CACHE[key]
    ckpt = None
    if checkpoint_dir is not None and key is not None:
        import hashlib

        digest = hashlib.sha256(key.encode()).hexdigest()[:16]
        ckpt = Path(checkpoint_dir) / f"{model_spec.name.replace('@', '_')}-{digest}.json"
        if ckpt.exists():
            result = (load_model(ckpt), None)
            _MODEL_CACHE[key] = result
            return result
    model = init_model(model_spec.dims, tspec.scheme(model_spec.seed))
    grad_fn = training_grad(wce(tspec.w))
    trained, log = train(model, train_set, tspec.epochs, tspec.lr, grad_fn,
                         batch_size=tspec.batch_size, weight_decay=tspec.weight_decay,
                         holdout=holdout, seed=model_spec.seed)
    logger.info("trained %s: holdout accuracy %.3f", model_spec.name,
                log.holdout_accuracy[-1] if log.holdout_accuracy else float("nan"))
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_model(trained, ckpt)
    if key is not None:
        _MODEL_CACHE[key] = (trained, log)
    return trained, log


def prepare(spec: ExperimentSpec) -> Prepared:
    """Build the data split and train the surrogate and every target on the same training split."""
    train_set, holdout = spec.data.splits()
    logs = {}
    sur, logs[spec.surrogate.name] = train_model(spec.surrogate, train_set, holdout, spec.train, spec.data,
                                                 spec.checkpoint_dir)
    targets = []
    for t in spec.targets:
        m, logs[t.name] = train_model(t, train_set, holdout, spec.train, spec.data, spec.checkpoint_dir)
        targets.append((t.name, m))
    return Prepared(train_set, holdout, sur, targets, logs)


def eval_set(spec: ExperimentSpec, prep: Prepared) -> Dataset:
    h = prep.holdout
    return h if spec.n_eval is None else h.subset(np.arange(min(spec.n_eval, len(h))))


def pick_targets(labels, K, seed) -> np.ndarray:
    """A seeded pseudo-random target class per sample, never equal to its label."""
    labels = np.asarray(labels, dtype=np.int64)
    offset = np.random.default_rng([seed, 11]).integers(1, K, size=len(labels))
    return (labels + offset) % K


def craft(surrogate: Model, x, interest: InterestSpec, config: AttackConfig, grid=None, workers=1):
    """
    Craft perturbations on the surrogate in fixed chunks of samples.

    Only the surrogate is passed in, so crafting cannot read target
    parameters. Returns (delta, step-norm arrays each of shape (steps, n)).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)

    def sl(v, a, b):
        return None if v is None else np.asarray(v)[a:b]

    def job(a):
        b = min(a + CHUNK, n)
        spec = InterestSpec(sl(interest.gt_class, a, b), sl(interest.target_class, a, b), sl(interest.ll_class, a, b))
        return ifgsm(surrogate, x[a:b], spec, config, grid=grid, index_offset=a)

    starts = list(range(0, n, CHUNK))
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(a) for a in starts]
    delta = np.concatenate([p.delta for p, _ in parts])
    norms = {k: np.concatenate([getattr(s, k) for _, s in parts], axis=1) for k in ("l1_mean_abs", "l2", "linf")}
    return delta, norms


# reports

@dataclass
class ExperimentReport:
    rows: list  # one dict per evaluated model, white-box first
    config: dict  # resolved spec
    norm_trace: dict  # step -> mean norms: {"l1_mean_abs": [...], "l2": [...], "linf": [...]}
    k_list: tuple = (1,)
    targeted: bool = False
    records_file: str | None = None
    records: list = field(default_factory=list, repr=False, compare=False)

    def row(self, model):
        for r in self.rows:
            if r["model"] == model:
                return r
        raise KeyError(model)

    @property
    def white_box(self):
        return self.rows[0]

    @property
    def target_rows(self):
        return self.rows[1:]

    def target_mean(self, key="icr"):
        return float(np.mean([r[key] for r in self.target_rows]))

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "rows": self.rows,
            "config": self.config,
            "norm_trace": self.norm_trace,
            "k_list": list(self.k_list),
            "targeted": self.targeted,
            "records_file": self.records_file,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["rows"], d["config"], d["norm_trace"], tuple(d["k_list"]), d["targeted"], d["records_file"])


def _evaluate(name, model, x, x_adv, labels, target, norms, k_list, targeted):
    recs = make_records(logits(model, x), logits(model, x_adv), labels, target, norms, model=name)
    row = {"model": name, **summarize(recs, k_list, targeted)}
    row.update({f"mean_{k}": float(np.mean(v)) for k, v in norms.items()})
    return row, recs


def run_transfer(spec: ExperimentSpec, prep: Prepared | None = None) -> ExperimentReport:
    """Craft on the surrogate, evaluate on the surrogate (white-box) and every target."""
    prep = prep or prepare(spec)
    ev = eval_set(spec, prep)
    targeted = spec.attack.targeted
    target = pick_targets(ev.labels, ev.num_classes, spec.seed) if targeted else None
    interest = InterestSpec(ev.labels, target)
    grid = ev.grid if (spec.attack.di_prob > 0 or spec.attack.ti_kernel is not None) else None
    delta, step_norms = craft(prep.surrogate, ev.inputs, interest, spec.attack, grid, spec.workers)
    x_adv = ev.inputs + delta
    final = {k: v[-1] for k, v in step_norms.items()}

    rows, records = [], []
    for name, model in [("white-box", prep.surrogate), *prep.targets]:
        row, recs = _evaluate(name, model, ev.inputs, x_adv, ev.labels, target, final, spec.k_list, targeted)
        rows.append(row)
        records.extend(recs)
    trace = {k: v.mean(axis=1).tolist() for k, v in step_norms.items()}
    report = ExperimentReport(rows, spec.to_dict(), trace, spec.k_list, targeted, None, records)
    if spec.out_dir:
        write_outputs(report, spec.out_dir)
    return report


def _cell(value):
    return f"{value:.2f}"


def csv_header(metrics, k_list):
    if not metrics:
        return []
    cols = ["model"]
    for m in metrics:
        if m == "icr_asr":
            cols += [f"ICR/ASR@{k}" for k in k_list]
        elif m == "norms":
            cols += ["L1", "L2", "Linf"]
        else:
            cols.append(m)
    return cols


def csv_rows(report: ExperimentReport, metrics):
    out = []
    for r in report.rows:
        line = [r["model"]]
        for m in metrics:
            if m == "icr_asr":
                line += [f"{r['icr']:.2f}/{100.0 * r[f'asr@{k}']:.2f}" for k in report.k_list]
            elif m == "norms":
                line += [f"{r['mean_l1_mean_abs']:.6f}", f"{r['mean_l2']:.6f}", f"{r['mean_linf']:.6f}"]
            else:
                line.append(f"{r[m]:.4f}")
        out.append(line)
    return out


def emit_report(report: ExperimentReport, fmt: str, path, metrics=None) -> Path:
    """
    Write ``report`` as CSV or JSON. ICR/ASR cells read "mean ICR/ASR in %".
    An empty metric list gives a header-only CSV with no columns beyond the
    header line itself.
    """
    path = Path(path)
    if metrics is None:
        metrics = tuple(report.config.get("metrics", METRIC_COLUMNS))
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2))
    elif fmt == "csv":
        header = csv_header(metrics, report.k_list)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            if metrics:
                w.writerows(csv_rows(report, metrics))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def write_outputs(report: ExperimentReport, out_dir) -> Path:
    """report.csv, report.json, records.jsonl, norms.csv and resolved_spec.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec_path = out / "records.jsonl"
    with rec_path.open("w") as fh:
        for r in report.records:
            fh.write(json.dumps(r.to_dict()) + "\n")
    report.records_file = rec_path.name
    with (out / "norms.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L1", "L2", "Linf"])
        t = report.norm_trace
        for i, (a, b, c) in enumerate(zip(t["l1_mean_abs"], t["l2"], t["linf"]), start=1):
            w.writerow([i, f"{a:.8f}", f"{b:.8f}", f"{c:.8f}"])
    (out / "resolved_spec.json").write_text(json.dumps(report.config, indent=2))
    emit_report(report, "csv", out / "report.csv")
    emit_report(report, "json", out / "report.json")
    return out


# sweeps

@dataclass
class SweepResult:
    cells: dict  # (alpha, T) -> ExperimentReport
    table: list  # one dict per cell
    spearman: float  # white-box vs mean target ICR across cells

    def trend(self, alpha, key="target_icr"):
        """Values of ``key`` for one alpha, ordered by T."""
        rows = sorted((r for r in self.table if r["alpha"] == alpha), key=lambda r: r["T"])
        return [r[key] for r in rows]


def run_alpha_T_sweep(spec: ExperimentSpec, alphas, Ts) -> SweepResult:
    """Full factorial sweep over step size and iteration count on one trained model set."""
    if not alphas or not Ts:
        raise ValueError("alphas and Ts must be non-empty")
    prep = prepare(spec)
    cells, table = {}, []
    for a in alphas:
        for T in Ts:
            cell = replace(spec, attack=spec.attack.replace(alpha=float(a), steps=int(T)), out_dir=None)
            rep = run_transfer(cell, prep)
            cells[(float(a), int(T))] = rep
            table.append({
                "alpha": float(a),
                "T": int(T),
                "white_box_icr": rep.white_box["icr"],
                "target_icr": rep.target_mean("icr"),
                "target_asr@1": rep.target_mean("asr@1") if 1 in spec.k_list else float("nan"),
                "l1": rep.norm_trace["l1_mean_abs"][-1],
                "l2": rep.norm_trace["l2"][-1],
            })
    wb = [r["white_box_icr"] for r in table]
    tg = [r["target_icr"] for r in table]
    rho = float(spearmanr(wb, tg).statistic) if len(table) > 1 else float("nan")
    return SweepResult(cells, table, rho)


def run_temperature_sweep(spec: ExperimentSpec, temperatures) -> list:
    """White-box mean ICR for CW, CE at each temperature, then RCE."""
    if any(not t > 0 for t in temperatures):
        raise ValueError("temperatures must be positive")
    prep = prepare(spec)
    losses = [CW, *(ce_temp(t) for t in temperatures), RCE]
    out = []
    for loss in losses:
        cell = replace(spec, attack=spec.attack.replace(loss=str(loss)), out_dir=None)
        rep = run_transfer(cell, prep)
        out.append({"loss": str(loss), "temperature": loss.param, "white_box_icr": rep.white_box["icr"],
                    "target_icr": rep.target_mean("icr")})
    return out


@dataclass
class ZeroSumRow:
    arch: str
    init: str
    imbalance: str
    holdout_accuracy: float
    clean: ZeroSumStats
    adversarial: ZeroSumStats

    def to_dict(self):
        d = asdict(self)
        d["clean_ratio"] = self.clean.ratio
        d["adversarial_ratio"] = self.adversarial.ratio
        return d


@dataclass
class ZeroSumReport:
    rows: list  # ZeroSumRow per (architecture, init, imbalance)
    curves: dict  # w -> per-epoch mean sum of holdout logits

    def thirds(self, w):
        v = np.asarray(self.curves[w])
        n = max(len(v) // 3, 1)
        return float(v[:n].mean()), float(v[-n:].mean())

    def to_dict(self):
        return {"rows": [r.to_dict() for r in self.rows], "curves": {str(k): v for k, v in self.curves.items()}}


def _init_label(t: TrainSpec):
    return t.init if t.init != "gaussian" else f"N({t.init_mean:g},{t.init_std:g}^2)"


def run_zero_sum_probe(dataset: DataSpec, architectures, init_schemes, imbalance_specs, w_values,
                       train_spec: TrainSpec | None = None, drift_spec: TrainSpec | None = None,
                       attack: AttackConfig | None = None, seed: int = 1) -> ZeroSumReport:
    """
    Train every (architecture, init, imbalance) combination with cross-entropy
    and measure logit sums on clean and adversarial holdout inputs; then
    train the first architecture with the w-weighted loss for each w and
    record the per-epoch mean logit sum.

    ``init_schemes`` are (init, mean, std) tuples or TrainSpec overrides as
    dicts; ``imbalance_specs`` may contain None for the balanced set.
    ``drift_spec`` sets the schedule of the w runs: for w != 1 the loss has
    no minimum and logits drift without bound, so those runs are kept short.
    """
    train_spec = train_spec or TrainSpec()
    drift_spec = drift_spec or TrainSpec(epochs=30, lr=0.01, batch_size=32)
    attack = attack or _default_attack()
    rows = []
    for imb in imbalance_specs:
        dspec = replace(dataset, imbalance=None if imb is None else asdict(imb) if isinstance(imb, ImbalanceSpec) else imb)
        tr, ho = dspec.splits()
        imb_label = "balanced" if imb is None else (imb.kind if isinstance(imb, ImbalanceSpec) else imb["kind"])
        for dims in architectures:
            for init in init_schemes:
                over = init if isinstance(init, dict) else dict(zip(("init", "init_mean", "init_std"), init))
                tspec = replace(train_spec, **over)
                mspec = ModelSpec(dims, seed)
                model, log = train_model(mspec, tr, ho, tspec, dspec)
                zc = logits(model, ho.inputs)
                delta, _ = craft(model, ho.inputs, InterestSpec(ho.labels), attack)
                za = logits(model, ho.inputs + delta)
                acc = float((zc.argmax(axis=1) == ho.labels).mean())
                rows.append(ZeroSumRow(mspec.name.split("@")[0], _init_label(tspec), imb_label, acc,
                                       zero_sum_stats(zc), zero_sum_stats(za)))
    curves = {}
    tr, ho = dataset.splits()
    for w in w_values:
        tspec = replace(drift_spec, w=float(w))
        _, log = train_model(ModelSpec(architectures[0], seed), tr, ho, tspec, dataset)
        curves[float(w)] = list(log.holdout_sum_z)
    return ZeroSumReport(rows, curves)


def run_transform_robustness(spec: ExperimentSpec, transforms, losses=(RCE, CE, CW)) -> list:
    """White-box mean ICR of adversarial examples after each corruption, per attack loss."""
    prep = prepare(spec)
    ev = eval_set(spec, prep)
    if ev.grid is None:
        raise ValueError("image transformations need a grid dataset")
    transforms = [t if isinstance(t, TransformSpec) else TransformSpec(**t) for t in transforms]
    out = []
    for loss in losses:
        cfg = spec.attack.replace(loss=str(loss))
        target = pick_targets(ev.labels, ev.num_classes, spec.seed) if cfg.targeted else None
        interest = InterestSpec(ev.labels, target)
        grid = ev.grid if (cfg.di_prob > 0 or cfg.ti_kernel is not None) else None
        delta, _ = craft(prep.surrogate, ev.inputs, interest, cfg, grid, spec.workers)
        x_adv = ev.inputs + delta
        for t in transforms:
            xt = data_mod.apply_transform(x_adv, t)
            recs = make_records(logits(prep.surrogate, ev.inputs), logits(prep.surrogate, xt), ev.labels, target)
            out.append({"loss": str(loss), "transform": t.label, "white_box_icr": summarize(recs)["icr"]})
    return out


def lookup(table, **match):
    """The single row of ``table`` whose fields equal ``match``."""
    hits = [r for r in table if all(r.get(k) == v for k, v in match.items())]
    if len(hits) != 1:
        raise KeyError(f"{len(hits)} rows match {match}")
    return hits[0]
