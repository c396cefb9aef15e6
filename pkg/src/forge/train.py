"""Joint training of weights and architecture parameters."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .cost import CostError, combine_costs
from .data import Split
from .executor import ExecutionError
from .functional import cross_entropy
from .graph import Graph
from .model import SearchModel, as_model
from .optim import SGD, Adam
from .tensor import no_grad


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run.

    :param strength: regularization strength applied to ``cost``
    :param cost: name of the attached cost used as regularizer
    :param terms: explicit cost terms for :func:`forge.cost.combine_costs`
        (overrides ``strength``/``cost``)
    :param warmup: fraction of epochs during which architecture parameters are frozen
    """
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    arch_lr: float = 1e-2
    strength: float = 0.0
    cost: Optional[str] = None
    terms: Optional[List[Dict[str, Any]]] = None
    warmup: float = 0.1
    seed: int = 0
    eval_batch_size: int = 250

    def cost_terms(self, model: SearchModel):
        if self.terms is not None:
            return self.terms
        if self.strength == 0:
            return None
        name = self.cost or next(iter(model.cost_specs))
        return [{"cost": name, "strength": self.strength}]


@dataclass
class TrainResult:
    model: SearchModel
    history: List[Dict[str, Any]] = field(default_factory=list)
    seconds: float = 0.0


def predict_logits(model, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
    model = as_model(model)
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model.forward(x[i:i + batch_size], mode="eval").data)
    return np.concatenate(outs, axis=0)


def evaluate(model, split: Split, batch_size: int = 250) -> float:
    """Eval-mode classification accuracy on ``split``."""
    logits = predict_logits(model, split.x, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == split.y))


def train_search(model: Union[SearchModel, Graph], train: Split, cfg: TrainConfig,
                 val: Optional[Split] = None,
                 callback: Optional[Callable[[Dict[str, Any]], None]] = None) -> TrainResult:
    """Minimize task loss plus weighted cost jointly over weights and architecture.

    Weights use SGD with momentum; architecture parameters use Adam and stay
    frozen during the warmup epochs. The run is deterministic given
    ``cfg.seed``.

    :raises TrainingError: when the loss becomes non-finite
    """
    model = as_model(model)
    data_rng = np.random.default_rng([cfg.seed, 0])
    noise_rng = np.random.default_rng([cfg.seed, 1])
    w_opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay)
    arch = model.arch_parameters()
    a_opt = Adam(arch, lr=cfg.arch_lr) if arch else None
    warmup_epochs = int(round(cfg.warmup * cfg.epochs))
    terms = cfg.cost_terms(model)
    n = len(train)
    steps = max(1, -(-n // cfg.batch_size))
    history: List[Dict[str, Any]] = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(n)
        tot_loss = tot_task = 0.0
        correct = 0
        for b in range(steps):
            model.set_progress((epoch * steps + b) / (cfg.epochs * steps))
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = train.x[idx], train.y[idx]
            try:
                logits = model.forward(xb, mode="train", rng=noise_rng)
                task = cross_entropy(logits, yb)
                costs = model.get_costs() if terms else {}
                loss = combine_costs(task, costs, terms)
            except (ExecutionError, CostError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            w_opt.zero_grad()
            if a_opt is not None:
                a_opt.zero_grad()
            loss.backward()
            w_opt.step()
            if a_opt is not None and epoch >= warmup_epochs:
                a_opt.step()
            tot_loss += value * len(idx)
            tot_task += task.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        model.set_progress((epoch + 1) / cfg.epochs)
        with no_grad():
            cost_values = {k: float(v.item()) for k, v in model.get_costs().items()}
        entry = {"epoch": epoch, "loss": tot_loss / n, "task_loss": tot_task / n,
                 "train_accuracy": correct / n, "costs": cost_values}
        if val is not None:
            entry["val_accuracy"] = evaluate(model, val, cfg.eval_batch_size)
        history.append(entry)
        if callback is not None:
            callback(entry)
    return TrainResult(model, history, time.perf_counter() - start)


def config_dict(cfg: TrainConfig) -> Dict[str, Any]:
    return asdict(cfg)
