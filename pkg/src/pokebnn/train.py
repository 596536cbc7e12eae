"""Desk-scale training loop: Adam, linear LR decay, two-phase quantization.

Phase 1 trains with only binary activations quantized while activation
bounds calibrate by EMA; at the switch step the bounds freeze (exactly once)
and all weights plus the 4/8-bit activations quantize for the rest of the
run. Optionally the one-hot target is replaced by teacher probabilities and
the loss becomes a KL divergence.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import autodiff as ad
from .nn.model import Model


class TrainingDiverged(RuntimeError):
    def __init__(self, step, what):
        super().__init__(f"training diverged at step {step}: {what}")
        self.step = step


@dataclass
class TrainConfig:
    total_steps: int = 2000
    phase_switch_step: int | None = None   # default: total_steps * 50 / 750
    base_lr: float = 6.4e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    bn_momentum: float = 0.9
    binary_act_bound: float = 3.0
    seed: int = 0
    batch_size: int = 64
    decay_dprelu: bool = False
    distill: str | None = None             # path to teacher-probability CSV

    def __post_init__(self):
        if self.phase_switch_step is None:
            self.phase_switch_step = max(1, self.total_steps * 50 // 750)
        if not 0 < self.phase_switch_step < self.total_steps:
            raise ValueError("phase_switch_step must lie inside (0, total_steps)")


@dataclass
class QuantSchedule:
    """Maps steps to quantization phases; monotone by construction."""

    switch_step: int

    def phase(self, step: int) -> int:
        return 2 if step >= self.switch_step else 1

    def freezes_at(self, step: int) -> bool:
        return step == self.switch_step


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear decay from base_lr to exactly 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.base_lr * (1.0 - step / cfg.total_steps)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              cfg: TrainConfig, decay_names: set = frozenset()) -> None:
    """In-place Adam update; weight decay applies only to ``decay_names``."""
    state["t"] += 1
    t = state["t"]
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(t, f"non-finite gradient for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        if cfg.weight_decay and name in decay_names:
            p -= lr * cfg.weight_decay * p
        p -= lr * update


# ---------------------------------------------------------------------------
# Losses and evaluation
# ---------------------------------------------------------------------------

def kl_distill_loss(student_logits, teacher_probs) -> ad.Tensor:
    """Mean KL(teacher || softmax(student)); one-hot teachers reduce to
    cross-entropy. Teacher rows must sum to 1 within 1e-5."""
    t = np.asarray(teacher_probs, dtype=np.float64)
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"teacher row {bad} sums to {sums[bad]:.6f}, not 1")
    if not isinstance(student_logits, ad.Tensor):
        student_logits = ad.Tensor(np.asarray(student_logits))
    return ad.kl_divergence(student_logits, t)


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=-1) == labels).mean())


def eval_averaged_top1(model: Model, dataset, checkpoints) -> float:
    """Mean top-1 over checkpoints captured in the zero-LR tail."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    accs = []
    for state in checkpoints:
        model.load_state_dict(state)
        logits = model.logits(dataset.x, training=False, phase=2)
        accs.append(top1_accuracy(logits, dataset.y))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class ToyDataset:
    x: np.ndarray           # [N, H, W, C] float
    y: np.ndarray           # [N] int labels
    teacher: np.ndarray | None = None   # [N, K] probabilities


def make_toy_dataset(n: int = 512, classes: int = 10, shape=(16, 16, 3),
                     seed: int = 0, noise: float = 0.3) -> ToyDataset:
    """Class-conditional Gaussian patterns, deterministic given the seed."""
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, size=(classes, *shape))
    y = np.arange(n) % classes
    x = prototypes[y] + noise * rng.normal(0.0, 1.0, size=(n, *shape))
    return ToyDataset(x=x.astype(np.float64), y=y)


def load_teacher_probs(path, classes: int | None = None) -> np.ndarray:
    """Teacher probabilities from CSV, one row per example."""
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            rows.append([float(v) for v in row])
    probs = np.asarray(rows, dtype=np.float64)
    if classes is not None and probs.shape[1] != classes:
        raise ValueError(f"expected {classes} columns, found {probs.shape[1]}")
    return probs


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: dict
    records: list
    checkpoints: list = field(default_factory=list)


def train_loop(model: Model, dataset: ToyDataset, cfg: TrainConfig,
               metrics_path=None, tail_checkpoints: int = 0) -> "TrainResult":
    """Runs the two-phase recipe; returns the final state and metrics log.

    Metrics are one JSON record per step: {step, lr, loss, top1, phase}.
    ``tail_checkpoints`` state dicts are captured from the last steps for
    averaged evaluation.
    """
    rng = np.random.default_rng(cfg.seed)
    schedule = QuantSchedule(cfg.phase_switch_step)
    model.binary_bound = cfg.binary_act_bound
    model.bn_momentum = cfg.bn_momentum
    params = {name: t.data for name, t in model.params.items()}
    opt = adam_init(params)
    decay_names = model.weight_decay_names()
    if cfg.decay_dprelu:
        decay_names |= {n for n in model.params
                        if n.endswith((".alpha", ".beta", ".gamma", ".eta"))}
    n = dataset.x.shape[0]
    order = rng.permutation(n)
    cursor = 0
    records = []
    checkpoints = []

    for step in range(cfg.total_steps):
        if schedule.freezes_at(step):
            model.freeze_activation_bounds()
        phase = schedule.phase(step)
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size

        xb = dataset.x[idx]
        yb = dataset.y[idx]
        model.zero_grad()
        out = model.forward(xb, training=True, phase=phase)
        flat = ad.reshape(out, (len(idx), -1))
        logits = flat.data
        if dataset.teacher is not None:
            loss = kl_distill_loss(flat, dataset.teacher[idx])
        else:
            loss = ad.cross_entropy(flat, yb)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, f"loss {value}")
        loss.backward()

        lr = lr_at(step, cfg)
        grads = {name: t.grad for name, t in model.params.items()}
        adam_step(params, grads, opt, lr, cfg, decay_names)

        records.append({
            "step": step,
            "lr": lr,
            "loss": value,
            "top1": top1_accuracy(logits, yb),
            "phase": phase,
        })
        if tail_checkpoints and step >= cfg.total_steps - tail_checkpoints:
            checkpoints.append(model.state_dict())

    if metrics_path:
        write_metrics(metrics_path, records)
    return TrainResult(state=model.state_dict(), records=records,
                       checkpoints=checkpoints)


def write_metrics(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_metrics(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
