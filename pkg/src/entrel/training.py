"""Shared mini-batch SGD engine used by the relevance model and the baselines.

Gradients for embedding tables arrive as sparse (row, value) chunks from the
autograd tape; momentum for those rows is applied lazily (velocity decayed by
the number of optimizer steps since the row was last touched) so an update
never walks a full table.  Dense parameters use ordinary dense momentum.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .autograd import Var, backward
from .encoder import ScorerParams, lift_params


class TrainingDiverged(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainOptions:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    log_path: Union[str, Path, None] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size and lr positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


class _SgdState:
    def __init__(self, params: ScorerParams, opts: TrainOptions):
        self.opts = opts
        self.step = 0
        self._vel: dict[str, np.ndarray] = {}
        self._last: dict[str, np.ndarray] = {}
        self._shapes = {name: arr.shape for name, arr in params.arrays().items()}

    def apply(self, params: ScorerParams, leaves: Mapping[str, Var], scale: float) -> None:
        """One optimizer step from the gradients accumulated on the leaf Vars."""
        self.step += 1
        mu, lr = self.opts.momentum, self.opts.lr
        for name, leaf in leaves.items():
            arr = getattr(params, name)
            if leaf.grad is not None:
                g = leaf.grad * scale
                if leaf.chunks:
                    for idx, rows in leaf.chunks:
                        np.add.at(g, idx, rows * scale)
                vel = self._vel.get(name)
                if vel is None:
                    vel = self._vel[name] = np.zeros(self._shapes[name])
                vel *= mu
                vel += g
                arr -= lr * vel
            elif leaf.chunks:
                all_idx = np.concatenate([idx for idx, _ in leaf.chunks])
                uniq, inverse = np.unique(all_idx, return_inverse=True)
                g = np.zeros((len(uniq),) + self._shapes[name][1:])
                offset = 0
                for idx, rows in leaf.chunks:
                    np.add.at(g, inverse[offset:offset + len(idx)], rows * scale)
                    offset += len(idx)
                vel = self._vel.get(name)
                if vel is None:
                    vel = self._vel[name] = np.zeros(self._shapes[name])
                    self._last[name] = np.zeros(self._shapes[name][0], dtype=np.int64)
                last = self._last[name]
                vel[uniq] *= mu ** (self.step - last[uniq])[:, None]
                vel[uniq] += g
                arr[uniq] -= lr * vel[uniq]
                last[uniq] = self.step


PairLoss = Callable[[Mapping[str, Var], object], "Var | float"]


def sgd_fit(
    params: ScorerParams,
    examples: Sequence,
    pair_loss: PairLoss,
    opts: TrainOptions,
    dev_eval: Callable[[ScorerParams], dict] | None = None,
    epoch_extras: Callable[[], dict] | None = None,
) -> tuple[ScorerParams, list[dict]]:
    """Fit a copy of the parameters by seeded mini-batch SGD with momentum.

    pair_loss returns either a taped scalar Var (backpropagated) or a plain
    float (a constant loss contribution with no gradient).  When dev_eval is
    given, the epoch checkpoint with the best dev macro_f1 is returned;
    otherwise the final parameters are.
    """
    params = params.copy()
    if opts.epochs == 0 or not examples:
        return params, []

    order = list(range(len(examples)))
    shuffle_rng = random.Random(opts.seed)
    state = _SgdState(params, opts)

    best_params = None
    best_f1 = -1.0
    log: list[dict] = []

    for epoch in range(opts.epochs):
        shuffle_rng.shuffle(order)
        total_loss = 0.0
        for start in range(0, len(order), opts.batch_size):
            batch = order[start:start + opts.batch_size]
            leaves = lift_params(params)
            batch_loss = 0.0
            for i in batch:
                loss = pair_loss(leaves, examples[i])
                if isinstance(loss, Var):
                    batch_loss += float(loss.value)
                    backward(loss)
                else:
                    batch_loss += float(loss)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"epoch {epoch}, batch at {start}: loss {batch_loss}"
                )
            state.apply(params, leaves, 1.0 / len(batch))
            total_loss += batch_loss

        record = {"epoch": epoch, "train_loss": total_loss / len(order)}
        if epoch_extras is not None:
            record.update(epoch_extras())
        if dev_eval is not None:
            dev_metrics = dev_eval(params)
            record.update({f"dev_{k}": v for k, v in dev_metrics.items()})
            f1 = dev_metrics.get("macro_f1", 0.0)
            if f1 > best_f1:
                best_f1 = f1
                best_params = params.copy()
        log.append(record)

    if opts.log_path is not None:
        with open(opts.log_path, "w", encoding="utf-8") as handle:
            for record in log:
                handle.write(json.dumps(record, sort_keys=True) + "\n")

    return (best_params if best_params is not None else params), log
