"""Weakly supervised training over compiled circuits.

Two ways of putting logic to work:

* architecture mode: the circuit *is* the output layer.  Neural leaves feed
  the compiled formula and the loss compares its value with the target, so
  predictions satisfy the logic by construction.
* loss mode: a direct task head predicts the target and the circuit of a
  constraint only contributes the penalty ``1 - value(constraint)``.

Optimizers, early stopping and metrics are plain numpy.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .circuit import Batch, Circuit, Labeller, eval_expected_fuzzy, eval_forward, eval_gradient, forward, layerize
from .language import Formula, Model
from .params import ParameterStore

__all__ = [
    "Example",
    "Dataset",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "Objective",
    "ArchitectureObjective",
    "LossObjective",
    "build_architecture_objective",
    "build_loss_objective",
    "train",
    "evaluate_metrics",
    "average_precision",
    "finite_difference_check",
    "LOSSES",
]

LOSSES = ("bce", "nll", "mse")
_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Example:
    """One weakly supervised example.

    ``root`` selects the circuit root a scalar target refers to; for class
    targets (``nll``) the target itself is the root index.
    """

    assignment: dict
    target: float | int
    root: int = 0
    split: str = "train"
    payloads: Mapping[Any, np.ndarray] | None = None
    info: dict = field(default_factory=dict)


@dataclass
class Dataset:
    examples: list[Example]
    payloads: dict[Any, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def split(self, name: str) -> "Dataset":
        return Dataset([e for e in self.examples if e.split == name], self.payloads)

    def batch(self, idx: Sequence[int] | None = None) -> Batch:
        ex = self.examples if idx is None else [self.examples[i] for i in idx]
        pay = self.payloads
        if any(e.payloads for e in ex):
            pay = dict(pay)
            for e in ex:
                pay.update(e.payloads or {})
        return Batch([e.assignment for e in ex], pay or None)


@dataclass
class TrainConfig:
    mode: str = "architecture"
    loss: str = "bce"
    optimizer: str = "adamw"
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.01
    time_budget: float | None = None  # seconds; None is unbounded

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("architecture", "loss"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")


# ---------------------------------------------------------------------------
# pointwise losses: value and derivative with respect to the prediction


def _loss_terms(kind: str, out: np.ndarray, ex: Sequence[Example]) -> tuple[float, np.ndarray]:
    """Summed loss over rows of ``out`` (B, R) and its gradient."""
    B, R = out.shape
    g = np.zeros_like(out)
    total = 0.0
    rows = np.arange(B)
    if kind == "nll":
        t = np.array([int(e.target) for e in ex], dtype=np.int64)
        if np.any(t < 0) or np.any(t >= R):
            raise ValueError(f"class target outside the {R} circuit roots")
        p = np.clip(out[rows, t], _EPS, None)
        total = float(-np.log(p).sum())
        g[rows, t] = -1.0 / p
        return total, g
    r = np.array([e.root for e in ex], dtype=np.int64)
    y = np.array([float(e.target) for e in ex])
    p = out[rows, r]
    if kind == "bce":
        pc = np.clip(p, _EPS, 1.0 - _EPS)
        total = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum())
        g[rows, r] = -(y / pc) + (1.0 - y) / (1.0 - pc)
    elif kind == "mse":
        total = float(((p - y) ** 2).sum())
        g[rows, r] = 2.0 * (p - y)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return total, g


def _class_mse(out: np.ndarray, ex: Sequence[Example]) -> tuple[float, np.ndarray]:
    """Squared distance between root scores and the one-hot class target."""
    B, R = out.shape
    y = np.zeros_like(out)
    y[np.arange(B), [int(e.target) for e in ex]] = 1.0
    d = out - y
    return float((d * d).sum()), 2.0 * d


# ---------------------------------------------------------------------------
# objectives


class Objective:
    """Loss summed over a dataset, with gradients written into ``labeller.store``."""

    labeller: Labeller
    dataset: Dataset

    @property
    def store(self) -> ParameterStore:
        return self.labeller.store

    def loss_grad(self, idx: Sequence[int], grad: bool = True) -> float:
        raise NotImplementedError

    def loss(self, data: Dataset | None = None) -> float:
        return self._on(data, lambda: self.loss_grad(range(len(self.dataset)), grad=False))

    def predict(self, data: Dataset | None = None) -> np.ndarray:
        raise NotImplementedError

    def _on(self, data: Dataset | None, fn):
        if data is None or data is self.dataset:
            return fn()
        saved = self.dataset
        self.dataset = data
        try:
            return fn()
        finally:
            self.dataset = saved

    # flat-vector view, handy for finite differences
    def __call__(self, theta: np.ndarray | None = None) -> float:
        if theta is not None:
            self.store.set_flat(np.asarray(theta, dtype=float))
        return self.loss_grad(range(len(self.dataset)), grad=False)

    def gradient(self, theta: np.ndarray | None = None) -> np.ndarray:
        if theta is not None:
            self.store.set_flat(np.asarray(theta, dtype=float))
        self.store.zero_grad()
        self.loss_grad(range(len(self.dataset)), grad=True)
        return self.store.flat_grad()


def _as_circuit(model: Model, f) -> Circuit:
    if isinstance(f, Circuit):
        return f
    if isinstance(f, Formula):
        from .compiler import compile_formula

        return compile_formula(f, model)
    raise TypeError(f"expected a Circuit or a Formula, got {type(f).__name__}")


class ArchitectureObjective(Objective):
    """``sum_i loss(circuit(theta; sigma_i), y_i)``.

    ``semantics="probfuzzy"`` draws logit-normal leaf scores around the
    network outputs and trains through the Monte-Carlo mean.
    """

    def __init__(self, circuit: Circuit, labeller: Labeller, dataset: Dataset, loss: str = "bce",
                 semantics: str = "exact", samples: int = 8, noise: float = 1.0, seed: int = 0):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.circuit = circuit
        self.lay = layerize(circuit)
        self.labeller = labeller
        self.dataset = dataset
        self.loss_kind = loss
        self.semantics = semantics
        self.samples = samples
        self.noise = noise
        self.seed = seed
        self._draws = 0

    def _terms(self, out, ex):
        if self.loss_kind == "mse" and len(self.circuit.roots) > 1:
            return _class_mse(out, ex)
        return _loss_terms(self.loss_kind, out, ex)

    def loss_grad(self, idx, grad: bool = True) -> float:
        idx = list(idx)
        if not idx:
            return 0.0
        ex = [self.dataset.examples[i] for i in idx]
        batch = self.dataset.batch(idx)
        if self.semantics == "probfuzzy":
            self._draws += 1
            seed = self.seed * 1_000_003 + self._draws if grad else self.seed
            out = eval_expected_fuzzy(self.circuit, self.labeller, "logit-normal", self.samples, seed,
                                      batch, self.lay, self.noise)
            total, g = self._terms(out, ex)
            if grad:
                eval_expected_fuzzy(self.circuit, self.labeller, "logit-normal", self.samples, seed,
                                    batch, self.lay, self.noise, upstream=g)
            return total
        st = forward(self.circuit, self.lay, self.labeller, batch)
        out = st.roots(self.circuit)
        total, g = self._terms(out, ex)
        if grad:
            eval_gradient(self.circuit, self.lay, self.labeller, batch, g, state=st)
        return total

    def predict(self, data: Dataset | None = None) -> np.ndarray:
        def go():
            if not len(self.dataset):
                return np.zeros((0, len(self.circuit.roots)))
            batch = self.dataset.batch()
            if self.semantics == "probfuzzy":
                return eval_expected_fuzzy(self.circuit, self.labeller, "logit-normal", self.samples, self.seed,
                                           batch, self.lay, self.noise)
            return eval_forward(self.circuit, self.lay, self.labeller, batch)

        return self._on(data, go)


class LossObjective(Objective):
    """Supervised loss on a task head plus the unweighted penalty ``1 - constraint``."""

    def __init__(self, head: Circuit, constraint: Circuit, labeller: Labeller, dataset: Dataset,
                 loss: str = "bce"):
        self.head = ArchitectureObjective(head, labeller, dataset, loss)
        self.constraint = constraint
        self.clay = layerize(constraint)
        self.labeller = labeller
        self.dataset = dataset

    def penalty(self, idx=None) -> np.ndarray:
        idx = range(len(self.dataset)) if idx is None else idx
        batch = self.dataset.batch(list(idx))
        return 1.0 - eval_forward(self.constraint, self.clay, self.labeller, batch)[:, 0]

    def loss_grad(self, idx, grad: bool = True) -> float:
        idx = list(idx)
        if not idx:
            return 0.0
        self.head.dataset = self.dataset
        total = self.head.loss_grad(idx, grad)
        batch = self.dataset.batch(idx)
        st = forward(self.constraint, self.clay, self.labeller, batch)
        v = st.roots(self.constraint)
        total += float((1.0 - v[:, 0]).sum())
        if grad:
            up = np.zeros_like(v)
            up[:, 0] = -1.0
            eval_gradient(self.constraint, self.clay, self.labeller, batch, up, state=st)
        return total

    def predict(self, data: Dataset | None = None) -> np.ndarray:
        return self.head.predict(data if data is not None else self.dataset)


def build_architecture_objective(model: Model, formula, dataset: Dataset, loss: str = "bce",
                                 labeller: Labeller | None = None, seed: int = 0, **kw) -> ArchitectureObjective:
    """Objective whose forward pass runs through the compiled formula."""
    c = _as_circuit(model, formula)
    lab = labeller or Labeller(model, seed=seed)
    return ArchitectureObjective(c, lab, dataset, loss, seed=seed, **kw)


def build_loss_objective(model: Model, constraint, head, dataset: Dataset, loss: str = "bce",
                         labeller: Labeller | None = None, seed: int = 0) -> LossObjective:
    """Objective with the logic relaxed into a penalty next to a direct task head."""
    lab = labeller or Labeller(model, seed=seed)
    return LossObjective(_as_circuit(model, head), _as_circuit(model, constraint), lab, dataset, loss)


# ---------------------------------------------------------------------------
# optimizers


class _Optimizer:
    def __init__(self, store: ParameterStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.blocks.items()}

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        for k, p in self.store.blocks.items():
            g = self.store.grads[k]
            if cfg.optimizer == "sgd":
                p -= cfg.lr * g
                continue
            b1, b2 = 0.9, 0.999
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1**self.t)
            vh = self.v[k] / (1 - b2**self.t)
            p -= cfg.lr * (mh / (np.sqrt(vh) + 1e-8) + cfg.weight_decay * p)


@dataclass
class TrainResult:
    store: ParameterStore
    history: list[dict]
    best_epoch: int
    stopped: str

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for h in self.history:
            lines.append(f"{h['epoch']},{h['train_loss']:.10g},{h['val_loss']:.10g}")
        return "\n".join(lines) + "\n"


def _check_finite(x: float, what: str, epoch: int):
    if not math.isfinite(x):
        raise TrainingDiverged(f"{what} became {x} in epoch {epoch}; lower the learning rate")


def train(objective: Objective, config: TrainConfig | None = None, validation: Dataset | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch descent with early stopping on the validation loss.

    The validation set defaults to the ``validation`` split of the objective's
    dataset; without one the training loss is monitored.  The returned store
    holds the best parameters seen and is also loaded back into the objective.
    """
    cfg = config or TrainConfig()
    full = objective.dataset
    tr = full.split("train")
    if not len(tr):
        tr = full
    val = validation if validation is not None else full.split("validation")
    objective.dataset = tr
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(objective.store, cfg)
    best = math.inf
    best_store = objective.store.copy()
    best_epoch = 0
    bad = 0
    history = []
    stopped = "max_epochs"
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(tr))
            total = 0.0
            for s in range(0, len(tr), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                objective.store.zero_grad()
                total += objective.loss_grad(idx, grad=True)
                _check_finite(total, "training loss", epoch)
                if not np.all(np.isfinite(objective.store.flat_grad())):
                    raise TrainingDiverged(f"non-finite gradient in epoch {epoch}")
                opt.step()
            train_loss = total / max(len(tr), 1)
            val_loss = objective.loss(val) / len(val) if len(val) else train_loss
            _check_finite(val_loss, "validation loss", epoch)
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
            history.append(row)
            if callback:
                callback(row)
            if val_loss < best:
                best, bad, best_epoch = val_loss, 0, epoch
                best_store = objective.store.copy()
            else:
                bad += 1
                if bad >= cfg.patience:
                    stopped = "patience"
                    break
            if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
                stopped = "time_budget"
                break
    finally:
        objective.dataset = full
    objective.store.load_from(best_store)
    return TrainResult(best_store, history, best_epoch, stopped)


# ---------------------------------------------------------------------------
# metrics


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise AP: sum over distinct thresholds of (recall gain) x precision.

    Tied scores enter the ranking together, so a constant predictor scores
    the positive rate.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in shape")
    npos = int(y.sum())
    if npos == 0:
        raise ValueError("average precision needs at least one positive example")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ap = 0.0
    tp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        recall = tp / npos
        ap += (recall - prev_recall) * tp / j
        prev_recall = recall
        i = j
    return ap


def evaluate_metrics(objective: Objective, data: Dataset, metric: str = "accuracy",
                     positive_root: int = 0) -> float:
    """Accuracy of the argmax answer, or AP of the positive-class score."""
    if not len(data):
        raise ValueError("metric evaluation needs a nonempty split")
    out = objective.predict(data)
    if out.shape[0] != len(data):
        raise ValueError("prediction rows and dataset size differ")
    if metric == "accuracy":
        if out.shape[1] == 1:
            pred = (out[:, 0] >= 0.5).astype(int)
            y = np.array([int(round(float(e.target))) for e in data.examples])
        else:
            pred = np.argmax(out, axis=1)
            y = np.array([int(e.target) for e in data.examples])
        return float(np.mean(pred == y))
    if metric in ("ap", "average-precision"):
        if out.shape[1] <= positive_root:
            raise ValueError("metric/target shape mismatch")
        y = np.array([int(round(float(e.target))) for e in data.examples])
        return average_precision(out[:, positive_root], y)
    raise ValueError(f"unknown metric {metric!r}")


def finite_difference_check(objective: Objective, params: np.ndarray | None = None, probes: int = 10,
                            seed: int = 0, h: float = 1e-6, floor: float = 1e-4,
                            grad_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Max relative error between central differences and the analytic gradient.

    Coordinates are drawn at random; the relative error uses
    ``max(|fd|, |g|, floor)`` in the denominator so near-zero partials do not
    blow up.  With no parameters the check passes vacuously (returns 0).
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x0 = objective.store.flat() if params is None else np.asarray(params, dtype=float).copy()
    if x0.size == 0:
        return 0.0
    g = (grad_fn or objective.gradient)(x0.copy())
    rng = np.random.default_rng(seed)
    coords = rng.choice(x0.size, size=min(probes, x0.size), replace=False)
    worst = 0.0
    for i in coords:
        xp = x0.copy()
        xp[i] += h
        fp = objective(xp)
        xp[i] -= 2 * h
        fm = objective(xp)
        fd = (fp - fm) / (2 * h)
        err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor)
        worst = max(worst, err)
    objective.store.set_flat(x0)
    return float(worst)
