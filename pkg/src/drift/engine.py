"""Warmup, the self-training loop (DRIFT and conventional), evaluation and run comparison."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, List, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from drift import optim
from drift.autodiff import NonFiniteError, Tape, backward
from drift.data import (BatchSampler, Dataset, inject_label_noise, load_csv, make_blobs,
                        make_two_moons, next_batches)
from drift.models import (MlpSpec, ParamSet, constant_params, ema_update, forward, grads_of,
                          init_params, leaf_params, predict_proba)
from drift.strategy import (MODES, StrategyConfig, build_objective, entropy_rows,
                            objective_from_teacher, supervised_loss)

METHODS = ("drift", "conventional")
SPLITS = ("labeled", "unlabeled", "all")
GENERATORS = ("two_moons", "blobs", "csv")


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: ParamSet, loss: float):
        self.step = step
        self.checkpoint = checkpoint
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        if self.kind not in optim.KINDS:
            raise ConfigError([f"optimizer.kind: must be one of {optim.KINDS}"])
        if not self.learning_rate > 0:
            raise ConfigError(["optimizer.learning_rate: must be positive"])

    def init_state(self, params: ParamSet) -> optim.OptimizerState:
        return optim.init_state(params, self.kind, self.learning_rate, beta1=self.beta1,
                                beta2=self.beta2, eps=self.eps, momentum=self.momentum)


@dataclass(frozen=True)
class DataConfig:
    generator: str = "two_moons"
    n_labeled_per_class: int = 12
    n_unlabeled_per_class: int = 500
    noise_std: float = 0.1
    flip_rate: float = 0.0
    seed: Optional[int] = None  # None: follow the run seed
    path: Optional[str] = None
    label_column: str = "label"
    unlabeled_sentinel: str = ""

    def __post_init__(self):
        problems = []
        if self.generator not in GENERATORS:
            problems.append(f"data.generator: must be one of {GENERATORS}")
        if self.generator == "csv" and not self.path:
            problems.append("data.path: required for the csv generator")
        if self.generator != "csv" and (self.n_labeled_per_class < 1 or self.n_unlabeled_per_class < 1):
            problems.append("data: per-class counts must be at least 1")
        if self.noise_std < 0:
            problems.append("data.noise_std: must be non-negative")
        if not 0.0 <= self.flip_rate <= 1.0:
            problems.append("data.flip_rate: must lie in [0, 1]")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class RunConfig:
    """One training run. Defaults reproduce the two-moons recipe."""

    mode: str = "semi"
    method: str = "drift"
    alpha: float = 0.5
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_steps: int = 50
    total_steps: int = 301
    seed: int = 0
    hidden_dim: int = 50
    eval_every: int = 10
    eval_split: str = "unlabeled"
    labeled_batch_size: Optional[int] = None
    unlabeled_batch_size: Optional[int] = None
    sampling: str = "epoch_shuffle"
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {MODES}")
        if self.method not in METHODS:
            problems.append(f"method: must be one of {METHODS}")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha: must lie in [0, 1]")
        if self.warmup_steps < 0:
            problems.append("warmup_steps: must be >= 0")
        if self.total_steps < 1:
            problems.append("total_steps: must be >= 1")
        if self.hidden_dim < 1:
            problems.append("hidden_dim: must be positive")
        if self.eval_every < 1:
            problems.append("eval_every: must be >= 1")
        if self.eval_split not in SPLITS:
            problems.append(f"eval_split: must be one of {SPLITS}")
        if problems:
            raise ConfigError(problems)
        if self.method == "conventional" and self.strategy.tracks_anything:
            object.__setattr__(self, "strategy", self.strategy.detached())

    @property
    def tracked(self) -> bool:
        return self.method == "drift"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "RunConfig":
        """Build from a (possibly partial) dict; unknown keys are rejected."""
        problems = _unknown_keys(cls, obj, "")
        nested = {"strategy": StrategyConfig, "optimizer": OptimizerConfig, "data": DataConfig}
        for key, sub in nested.items():
            if key in obj and not isinstance(obj[key], Mapping):
                problems.append(f"{key}: expected an object")
            elif key in obj:
                problems += _unknown_keys(sub, obj[key], key + ".")
        if problems:
            raise ConfigError(problems)
        kwargs = {k: v for k, v in obj.items() if k not in nested}
        try:
            for key, sub in nested.items():
                if key in obj:
                    kwargs[key] = sub(**obj[key])
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError([str(exc)]) from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _unknown_keys(cls, obj: Mapping, prefix: str) -> List[str]:
    known = {f.name for f in fields(cls)}
    return [f"{prefix}{k}: unknown key" for k in obj if k not in known]


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    eval_accuracy: float
    mean_weight: float
    mean_entropy: float


@dataclass
class RunMetrics:
    seed: int
    records: List[EvalRecord]
    final_params: ParamSet
    config: Optional[RunConfig] = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].eval_accuracy

    @property
    def steps(self) -> List[int]:
        return [r.step for r in self.records]

    def summary(self) -> dict:
        return {"seed": self.seed, "final_accuracy": self.final_accuracy,
                "final_step": self.records[-1].step,
                "final_train_loss": self.records[-1].train_loss}


def derive_seed(seed: int, purpose: str) -> int:
    """Independent integer seed for a named sub-stream of a run."""
    tag = [ord(c) for c in purpose]
    return int(np.random.SeedSequence([seed, *tag]).generate_state(1)[0])


def build_dataset(cfg: RunConfig) -> Dataset:
    dc = cfg.data
    seed = cfg.seed if dc.seed is None else dc.seed
    if dc.generator == "two_moons":
        ds = make_two_moons(dc.n_labeled_per_class, dc.n_unlabeled_per_class, dc.noise_std, seed)
    elif dc.generator == "blobs":
        ds = make_blobs(dc.n_labeled_per_class, dc.n_unlabeled_per_class, seed=seed)
    else:
        ds = load_csv(dc.path, dc.label_column, dc.unlabeled_sentinel)
    if dc.flip_rate > 0:
        ds = inject_label_noise(ds, dc.flip_rate, derive_seed(seed, "label-noise"))
    return ds


def mlp_spec(cfg: RunConfig, ds: Dataset) -> MlpSpec:
    return MlpSpec(ds.input_dim, cfg.hidden_dim, ds.num_classes)


def _labeled_batch(ds: Dataset, idx: np.ndarray):
    return ds.features[idx], ds.labels[idx]


def warmup(cfg: RunConfig, ds: Dataset) -> ParamSet:
    """Fit the supervised cross-entropy on the observed labels; returns the initialization."""
    labeled = ds.labeled_indices
    if labeled.size == 0:
        raise ValueError("warmup needs at least one labeled sample")
    params = init_params(mlp_spec(cfg, ds), derive_seed(cfg.seed, "init"))
    state = cfg.optimizer.init_state(params)
    sampler = BatchSampler(derive_seed(cfg.seed, "warmup-batches"), cfg.labeled_batch_size,
                           0, cfg.sampling)
    tape = Tape()
    for step in range(cfg.warmup_steps):
        idx, _ = next_batches(sampler, ds)
        tape.clear()
        nodes = leaf_params(tape, params)
        x, y = _labeled_batch(ds, idx)
        loss = supervised_loss(forward(nodes, x), y)
        backward(loss)
        state, params = optim.apply(state, params, grads_of(nodes))
    return params


def evaluate(params: ParamSet, ds: Dataset, split: str = "all") -> float:
    """Fraction of argmax predictions equal to the hidden true labels on a split."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    idx = {"labeled": ds.labeled_indices, "unlabeled": ds.unlabeled_indices,
           "all": np.arange(ds.n)}[split]
    if ds.true_labels is None:
        raise ValueError("dataset has no hidden true labels to evaluate against")
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = np.argmax(predict_proba(params, ds.features[idx]), axis=1)
    return float(np.mean(pred == ds.true_labels[idx]))


StepCallback = Callable[[int, ParamSet, ParamSet], None]


def self_train(cfg: RunConfig, ds: Dataset, init: ParamSet,
               callback: Optional[StepCallback] = None) -> RunMetrics:
    """Self-training from ``init`` for ``total_steps - 1`` updates.

    The teacher history starts at ``init``; each iteration builds the current
    teacher alpha * history + (1 - alpha) * student (inside the graph for DRIFT,
    as a constant for the conventional method), takes one optimizer step on the
    student, and makes that teacher the new history. ``callback(step, student,
    teacher)`` sees every state, where teacher is the EMA teacher paired with
    that student.

    In weak mode the observed labels are never read here.
    """
    student = init
    history = init
    state = cfg.optimizer.init_state(student)
    sampler = BatchSampler(derive_seed(cfg.seed, "batches"), cfg.labeled_batch_size,
                           cfg.unlabeled_batch_size, cfg.sampling)
    records: List[EvalRecord] = []
    tape = Tape()
    last = cfg.total_steps - 1
    if callback is not None:
        callback(0, student, history)
    for t in range(cfg.total_steps):
        l_idx, u_idx = next_batches(sampler, ds)
        if cfg.mode == "semi":
            labeled = _labeled_batch(ds, l_idx)
        else:
            labeled = (ds.features[l_idx], None)
        tape.clear()
        nodes = leaf_params(tape, student)
        try:
            obj = build_objective(nodes, history, cfg.alpha, labeled, ds.features[u_idx],
                                  cfg.strategy, cfg.mode, tracked=cfg.tracked)
        except NonFiniteError as exc:
            raise TrainingDiverged(t, student, math.nan) from exc
        loss = float(obj.loss.value)
        if not math.isfinite(loss):
            raise TrainingDiverged(t, student, loss)
        if t % cfg.eval_every == 0 or t == last:
            records.append(EvalRecord(
                step=t, train_loss=loss,
                eval_accuracy=evaluate(student, ds, cfg.eval_split),
                mean_weight=float(np.mean(obj.strategy.weights.value)),
                mean_entropy=float(np.mean(entropy_rows(obj.strategy.pseudo_labels).value)),
            ))
        if t == last:
            break
        backward(obj.loss)
        grads = grads_of(nodes)
        if not np.all(np.isfinite(grads.to_vector())):
            raise TrainingDiverged(t, student, loss)
        state, student = optim.apply(state, student, grads)
        history = obj.teacher
        if callback is not None:
            callback(t + 1, student, ema_update(history, student, cfg.alpha))
    return RunMetrics(cfg.seed, records, student, cfg)


def train(cfg: RunConfig, ds: Optional[Dataset] = None,
          callback: Optional[StepCallback] = None) -> RunMetrics:
    """Warmup, then self-training with teacher and student both starting at the warmup solution."""
    if ds is None:
        ds = build_dataset(cfg)
    init = warmup(cfg, ds)
    return self_train(cfg, ds, init, callback)


def _train_seed(args):
    cfg, seed = args
    return train(cfg.replace(seed=seed))


def run_seeds(cfg: RunConfig, seeds: Sequence[int], jobs: int = 1) -> List[RunMetrics]:
    """Train one run per seed; results come back in seed order regardless of ``jobs``."""
    work = [(cfg, s) for s in seeds]
    if jobs <= 1 or len(work) <= 1:
        return [_train_seed(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_seed, work))


# ---------------------------------------------------------------- gradient audit

@dataclass
class StackelbergGradient:
    """Full gradient and its leader / interaction parts, as flat vectors."""

    full: np.ndarray
    leader: np.ndarray
    interaction: np.ndarray
    alpha: float

    @property
    def recomposed(self) -> np.ndarray:
        return self.leader + (1.0 - self.alpha) * self.interaction


def gradient_decomposition(student: ParamSet, teacher_prev: ParamSet, alpha: float,
                           labeled_batch, unlabeled_batch, cfg: StrategyConfig,
                           mode: str = "semi") -> StackelbergGradient:
    """Three backward passes: full objective, strategy detached, and d/d(teacher) via the strategy."""
    tape = Tape()
    nodes = leaf_params(tape, student)
    backward(build_objective(nodes, teacher_prev, alpha, labeled_batch, unlabeled_batch,
                             cfg, mode, tracked=True).loss)
    full = grads_of(nodes).to_vector()

    tape.clear()
    nodes = leaf_params(tape, student)
    backward(build_objective(nodes, teacher_prev, alpha, labeled_batch, unlabeled_batch,
                             cfg, mode, tracked=False).loss)
    leader = grads_of(nodes).to_vector()

    tape.clear()
    teacher = leaf_params(tape, ema_update(teacher_prev, student, alpha))
    backward(objective_from_teacher(constant_params(tape, student), teacher, labeled_batch,
                                    unlabeled_batch, cfg, mode, tracked=True).loss)
    interaction = grads_of(teacher).to_vector()
    return StackelbergGradient(full, leader, interaction, alpha)


# ---------------------------------------------------------------- comparison

def _finals(runs) -> np.ndarray:
    return np.array([r.final_accuracy if isinstance(r, RunMetrics) else float(r) for r in runs])


def compare_runs(metrics_a, metrics_b) -> dict:
    """Paired one-sided t-test that run set ``a`` beats ``b`` on final accuracy.

    Runs are paired by position (seed order). When the paired differences have
    zero spread the statistic is undefined; the report sets ``degenerate`` and
    leaves ``p_value`` as None.
    """
    a, b = _finals(metrics_a), _finals(metrics_b)
    if a.size != b.size:
        raise ValueError(f"unpaired run lists: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two paired runs")
    n = a.size
    d = a - b
    mean_d = float(d.mean())
    sd_d = float(d.std(ddof=1))
    report = {
        "n": n,
        "mean_a": float(a.mean()), "std_a": float(a.std(ddof=1)),
        "mean_b": float(b.mean()), "std_b": float(b.std(ddof=1)),
        "mean_diff": mean_d, "sd_diff": sd_d,
        "degenerate": False, "note": "",
    }
    if sd_d == 0.0:
        report.update(t_statistic=0.0 if mean_d == 0.0 else math.copysign(math.inf, mean_d),
                      p_value=None, degenerate=True, note="no variance in paired differences")
        return report
    t = mean_d * math.sqrt(n) / sd_d
    report.update(t_statistic=t, p_value=float(stats.t.sf(t, df=n - 1)))
    return report


def learning_curve(runs: Sequence[RunMetrics]) -> List[dict]:
    """Mean and std of eval accuracy per recorded step, over the steps all runs share."""
    if not runs:
        return []
    common = set(runs[0].steps)
    for r in runs[1:]:
        common &= set(r.steps)
    table = []
    for step in sorted(common):
        accs = np.array([next(rec.eval_accuracy for rec in r.records if rec.step == step)
                         for r in runs])
        table.append({"step": step, "mean": float(accs.mean()),
                      "std": float(accs.std(ddof=1)) if accs.size > 1 else 0.0})
    return table


def objective_value(student: ParamSet, teacher_prev: ParamSet, alpha: float, labeled_batch,
                    unlabeled_batch, cfg: StrategyConfig, mode: str = "semi") -> float:
    tape = Tape()
    nodes = constant_params(tape, student)
    return float(build_objective(nodes, teacher_prev, alpha, labeled_batch, unlabeled_batch,
                                 cfg, mode, tracked=True).loss.value)


def gradcheck_instance(seed: int, batch_size: int = 4, alpha: float = 0.5, mode: str = "semi",
                       cfg: Optional[StrategyConfig] = None, input_dim: int = 2,
                       hidden_dim: int = 5, num_classes: int = 3, step: float = 1e-5) -> dict:
    """Random small model and batch; checks backward against finite differences and the recomposition.

    The teacher history is a perturbed copy of the student so that the two
    differ, as they do mid-training.
    """
    from drift.autodiff import finite_difference_gradient, max_relative_error

    cfg = cfg or StrategyConfig()
    rng = np.random.default_rng(seed)
    spec = MlpSpec(input_dim, hidden_dim, num_classes)
    student = init_params(spec, derive_seed(seed, "gradcheck-student"))
    student = student.map(lambda v: v + rng.normal(scale=0.3, size=v.shape))
    teacher_prev = student.map(lambda v: v + rng.normal(scale=0.3, size=v.shape))
    x_l = rng.normal(size=(batch_size, input_dim))
    y_l = rng.integers(0, num_classes, size=batch_size)
    x_u = rng.normal(size=(batch_size, input_dim))
    labeled = (x_l, y_l)

    grads = gradient_decomposition(student, teacher_prev, alpha, labeled, x_u, cfg, mode)
    fd = finite_difference_gradient(
        lambda p: objective_value(p, teacher_prev, alpha, labeled, x_u, cfg, mode), student, step)
    return {
        "seed": seed,
        "alpha": alpha,
        "num_params": student.num_params,
        "fd_max_rel_error": max_relative_error(grads.full, fd),
        "recompose_max_abs_error": float(np.max(np.abs(grads.full - grads.recomposed))),
        "recompose_max_rel_error": max_relative_error(grads.full, grads.recomposed),
        "interaction_norm": float(np.linalg.norm((1.0 - alpha) * grads.interaction)),
        "leader_norm": float(np.linalg.norm(grads.leader)),
    }


VARIANTS = ("drift", "no-drpl", "no-drw", "no-sr", "conventional")


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Ablation switches: detach labels, detach weights, or drop weighting altogether."""
    s = cfg.strategy
    full = dataclasses.replace(s, use_soft_labels=True, use_sample_weights=True,
                               track_labels=True, track_weights=True)
    if variant == "drift":
        return cfg.replace(method="drift", strategy=full)
    if variant == "no-drpl":
        return cfg.replace(method="drift", strategy=dataclasses.replace(full, track_labels=False))
    if variant == "no-drw":
        return cfg.replace(method="drift", strategy=dataclasses.replace(full, track_weights=False))
    if variant == "no-sr":
        return cfg.replace(method="drift", strategy=dataclasses.replace(
            full, use_sample_weights=False, track_weights=False))
    if variant == "conventional":
        return cfg.replace(method="conventional", strategy=full.detached())
    raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
