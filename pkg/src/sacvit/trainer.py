"""Two-stage training loss, gradients, SGD, and finite-difference checks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .clustering import ClusterPartition, build_partitions
from .data import Dataset
from .early_exit import run_ee_stage
from .encoder import as_tensors
from .model import ModelConfig, ModelParams
from .sac import run_sac_stage

LOSS_MODES = ("CE+KL", "CE+CE")
PROB_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 125
    phase1_epochs: int = 50
    learning_rate: float = 0.05
    batch_size: int = 16
    loss_mode: str = "CE+KL"
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.phase1_epochs > self.epochs:
            raise ValueError("phase1_epochs cannot exceed epochs")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass(frozen=True)
class LossBreakdown:
    ce_sac: float
    second_term: float
    total: float


def _check_dist(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.isfinite(p).all() or abs(p.sum() - 1) > 1e-6:
        raise ValueError(f"{what} is not a probability distribution")
    return p


def compute_loss(p_ee, p_sac, y: int, mode: str = "CE+KL") -> LossBreakdown:
    """Loss for one sample from probability vectors."""
    p_ee, p_sac = _check_dist(p_ee, "p_ee"), _check_dist(p_sac, "p_sac")
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    if not 0 <= y < p_sac.size or p_ee.size != p_sac.size:
        raise ValueError("label or distribution sizes are inconsistent")
    ce_sac = -np.log(max(p_sac[y], PROB_EPS))
    if mode == "CE+KL":
        lp_ee, lp_sac = np.log(np.maximum(p_ee, PROB_EPS)), np.log(np.maximum(p_sac, PROB_EPS))
        second = max(float(np.sum(p_ee * (lp_ee - lp_sac))), 0.0)
    else:
        second = -np.log(max(p_ee[y], PROB_EPS))
    return LossBreakdown(float(ce_sac), float(second), float(ce_sac + second))


def loss_tensor(logits_ee: Tensor, logits_sac: Tensor, labels: np.ndarray, mode: str) -> tuple[Tensor, Tensor, Tensor]:
    """Batch-mean (total, ce_sac, second_term) as differentiable scalars."""
    b, c = logits_sac.shape
    onehot = np.zeros((b, c), dtype=logits_sac.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    scale = -1.0 / b
    p_sac = ag.softmax(logits_sac)
    lp_sac = ag.log_clamped(p_sac, PROB_EPS)
    ce = ag.mul(ag.total(ag.mul(lp_sac, onehot)), scale)
    p_ee = ag.softmax(logits_ee)
    lp_ee = ag.log_clamped(p_ee, PROB_EPS)
    if mode == "CE+KL":
        second = ag.mul(ag.total(ag.mul(p_ee, ag.add(lp_ee, ag.mul(lp_sac, -1.0)))), 1.0 / b)
    else:
        second = ag.mul(ag.total(ag.mul(lp_ee, onehot)), scale)
    return ag.add(ce, second), ce, second


def forward_train(weights, cfg: ModelConfig, images: np.ndarray, clustered: bool,
                  partitions: Sequence[ClusterPartition] | None = None):
    """Both stages with eta = 1 so every sample reaches the second stage.

    Partitions are computed from the (detached) EE trace unless supplied;
    index selection is never differentiated.
    """
    ee = run_ee_stage(images, weights, cfg, eta=1.0)
    if clustered:
        parts = list(partitions) if partitions is not None else build_partitions(ee.trace, cfg)
    else:
        parts = None
    _, logits_sac = run_sac_stage(images, weights, cfg, ee.sequence, parts)
    return ee.logits, logits_sac, parts


def loss_and_grads(params: ModelParams, cfg: ModelConfig, images: np.ndarray, labels: np.ndarray,
                   mode: str = "CE+KL", clustered: bool = True,
                   partitions: Sequence[ClusterPartition] | None = None):
    """Backward pass: returns the loss breakdown, per-parameter gradients and partitions used."""
    w = as_tensors(params, requires_grad=True)
    logits_ee, logits_sac, parts = forward_train(w, cfg, images, clustered, partitions)
    loss, ce, second = loss_tensor(logits_ee, logits_sac, labels, mode)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in w.items()}
    lb = LossBreakdown(float(ce.data), float(second.data), float(loss.data))
    return lb, grads, parts


def loss_only(params: ModelParams, cfg: ModelConfig, images, labels, mode, clustered, partitions) -> float:
    logits_ee, logits_sac, _ = forward_train(as_tensors(params), cfg, images, clustered, partitions)
    return float(loss_tensor(logits_ee, logits_sac, labels, mode)[0].data)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Plain (optionally heavy-ball) SGD; returns new params and velocity."""
    velocity = dict(velocity or {})
    new = {}
    for k, p in params.items():
        g = grads[k]
        if momentum:
            v = momentum * velocity.get(k, np.zeros_like(p)) + g
            velocity[k] = v
            g = v
        new[k] = (p - lr * g).astype(p.dtype)
    return ModelParams(params.cfg, new), velocity


def evaluate(params: ModelParams, cfg: ModelConfig, ds: Dataset, clustered: bool) -> tuple[float, float]:
    """Train-set accuracy of the EE and SAC heads (eta = 1)."""
    logits_ee, logits_sac, _ = forward_train(as_tensors(params), cfg, ds.images, clustered)
    ee = float(np.mean(np.argmax(logits_ee.data, axis=1) == ds.labels))
    sac = float(np.mean(np.argmax(logits_sac.data, axis=1) == ds.labels))
    return ee, sac


def train_toy(params: ModelParams, ds: Dataset, tcfg: TrainConfig, log_path: str | Path | None = None,
              partition_hook=None) -> tuple[ModelParams, list[dict]]:
    """Two-phase training: no clustering for the first ``phase1_epochs``, then clustering with reuse.

    Writes one JSON line per epoch to ``log_path`` if given.
    """
    cfg = params.cfg
    rng = np.random.default_rng(tcfg.seed)
    velocity: dict[str, np.ndarray] = {}
    log: list[dict] = []
    step = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            clustered = epoch >= tcfg.phase1_epochs
            order = rng.permutation(len(ds))
            sums = np.zeros(3)
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                lb, grads, parts = loss_and_grads(params, cfg, ds.images[idx], ds.labels[idx], tcfg.loss_mode, clustered)
                if partition_hook is not None and parts is not None:
                    partition_hook(parts)
                params, velocity = sgd_step(params, grads, tcfg.learning_rate, tcfg.momentum, velocity)
                sums += np.array([lb.ce_sac, lb.second_term, lb.total]) * len(idx)
                step += 1
            ee_acc, sac_acc = evaluate(params, cfg, ds, clustered)
            rec = {
                "epoch": epoch,
                "step": step,
                "phase": 2 if clustered else 1,
                "ce_sac": sums[0] / len(ds),
                "second_term": sums[1] / len(ds),
                "loss": sums[2] / len(ds),
                "ee_acc": ee_acc,
                "sac_acc": sac_acc,
            }
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh:
            fh.close()
    return params, log


@dataclass
class GradcheckReport:
    max_rel_err: float
    per_group: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def to_dict(self) -> dict:
        return asdict(self) | {"passed": self.passed}


# Gradient groups with norm below this are compared on an absolute scale.
# Key biases have an exactly-zero gradient (softmax is shift invariant per
# query), so their finite differences are pure rounding noise.
GRAD_NORM_FLOOR = 1e-6


def gradcheck(params: ModelParams, images: np.ndarray, labels: np.ndarray, mode: str = "CE+KL",
              clustered: bool = True, eps: float = 1e-5, tolerance: float = 1e-4) -> GradcheckReport:
    """Central differences against the analytic gradient, for every parameter element.

    Per group the error is ``|g - g_fd| / max(|g|, |g_fd|, GRAD_NORM_FLOOR)``.
    Run with float64 parameters. The partition from the unperturbed forward
    is held fixed so routing stays constant across perturbations.
    """
    cfg = params.cfg
    _, grads, parts = loss_and_grads(params, cfg, images, labels, mode, clustered)
    per_group = {}
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_only(params, cfg, images, labels, mode, clustered, parts)
            flat[i] = orig - eps
            down = loss_only(params, cfg, images, labels, mode, clustered, parts)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        diff = np.linalg.norm(grads[name] - numeric)
        scale = max(np.linalg.norm(grads[name]), np.linalg.norm(numeric), GRAD_NORM_FLOOR)
        per_group[name] = float(diff / scale)
    return GradcheckReport(max(per_group.values()), per_group, tolerance)
