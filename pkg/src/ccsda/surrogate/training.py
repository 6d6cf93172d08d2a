"""Surrogate training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..optim import Adam
from .data import Dataset, Normalizer, split_indices
from .fno import FNO, FnoConfig, SurrogateWeights, init_weights, loss_and_backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    split_fraction: float = 0.8
    seed: int = 0
    lr_final_fraction: float = 0.1
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.compute_dtype == "float32" else np.float64


@dataclass
class TrainResult:
    weights: SurrogateWeights
    initial: SurrogateWeights
    history: list[dict] = field(default_factory=list)

    @property
    def final_rmse(self) -> dict:
        return self.history[-1] if self.history else {}


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Cosine decay from ``lr`` to ``lr * lr_final_fraction`` over the run."""
    if cfg.epochs <= 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    lo = cfg.lr * cfg.lr_final_fraction
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + np.cos(np.pi * frac))


def predict_batches(model: FNO, w: SurrogateWeights, inputs: np.ndarray, batch_size: int,
                    dtype=np.float32) -> np.ndarray:
    outs = [model.forward(w, inputs[i:i + batch_size], dtype=dtype)[0]
            for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs) if outs else np.empty((0,))


def rmse_report(model: FNO, w: SurrogateWeights, data: Dataset, idx: np.ndarray,
                batch_size: int = 8, dtype=np.float32) -> dict:
    """De-normalized RMSE over every cell and frame, per output channel."""
    if len(idx) == 0:
        return {"rmse_p": float("nan"), "rmse_f": float("nan")}
    sq = np.zeros(2)
    count = 0
    for i in range(0, len(idx), batch_size):
        sel = idx[i:i + batch_size]
        pred = model.forward(w, data.inputs[sel], dtype=dtype)[0].astype(float)
        err = data.out_norm.denormalize(pred) - data.out_norm.denormalize(data.targets[sel].astype(float))
        sq += np.sum(err * err, axis=(0, 2, 3, 4))
        count += err[:, 0].size
    rmse = np.sqrt(sq / count)
    return {"rmse_p": float(rmse[0]), "rmse_f": float(rmse[1])}


def mean_predictor_rmse(data: Dataset) -> dict:
    """RMSE of predicting the training-set mean trajectory for every test sample."""
    mean = data.targets[data.train_idx].astype(float).mean(axis=0, keepdims=True)
    err = data.out_norm.denormalize(np.broadcast_to(mean, data.targets[data.test_idx].shape)) \
        - data.out_norm.denormalize(data.targets[data.test_idx].astype(float))
    rmse = np.sqrt(np.mean(err * err, axis=(0, 2, 3, 4)))
    return {"rmse_p": float(rmse[0]), "rmse_f": float(rmse[1])}


def train(data: Dataset, fno_cfg: FnoConfig, train_cfg: TrainConfig,
          init: SurrogateWeights | None = None) -> TrainResult:
    if len(data.train_idx) + len(data.test_idx) < 10:
        raise ValueError(f"need at least 10 samples to train, got {data.n_samples}")
    shape = data.inputs.shape[2:]
    model = FNO(fno_cfg, shape)
    w = init.copy() if init is not None else init_weights(fno_cfg, train_cfg.seed)
    initial = w.copy()
    opt = Adam(train_cfg.lr, train_cfg.adam_betas, train_cfg.adam_eps)
    dtype = train_cfg.dtype
    history = []
    for epoch in range(train_cfg.epochs):
        opt.lr = lr_at(train_cfg, epoch)
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = data.train_idx[rng.permutation(len(data.train_idx))]
        total, n_batches = 0.0, 0
        for i in range(0, len(order), train_cfg.batch_size):
            sel = np.sort(order[i:i + train_cfg.batch_size])
            value = loss_and_backward(w, model, data.inputs[sel], data.targets[sel],
                                      train_cfg.weight_decay, dtype=dtype)
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch)
            opt.step(w.params, w.grads)
            total += value
            n_batches += 1
        rec = {"epoch": epoch, "train_loss": total / n_batches}
        rec.update(rmse_report(model, w, data, data.test_idx, dtype=dtype))
        log.info("epoch %d loss %.4g rmse_p %.3f rmse_f %.4f", epoch, rec["train_loss"],
                 rec["rmse_p"], rec["rmse_f"])
        history.append(rec)
    return TrainResult(w, initial, history)


def write_history(path, history: list[dict]) -> None:
    lines = ["epoch,train_loss,test_rmse_p,test_rmse_f"]
    for rec in history:
        lines.append(f"{rec['epoch']},{rec['train_loss']!r},{rec['rmse_p']!r},{rec['rmse_f']!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def size_study(raw_inputs: np.ndarray, raw_targets: np.ndarray, sizes, fno_cfg: FnoConfig,
               train_cfg: TrainConfig, init_seed: int = 0) -> list[dict]:
    """Test RMSE as a function of the number of training samples.

    The held-out set is the test split of the full data and stays fixed;
    each run trains on the first ``n`` samples of the training split with
    normalization refitted on those samples.
    """
    n_total = len(raw_inputs)
    train_idx, test_idx = split_indices(n_total, train_cfg.split_fraction, train_cfg.seed)
    rows = []
    for n in sizes:
        if n > len(train_idx):
            raise ValueError(f"size {n} exceeds the {len(train_idx)} available training samples")
        sel = train_idx[:n]
        in_norm = Normalizer.fit(raw_inputs[sel])
        out_norm = Normalizer.fit(raw_targets[sel], pointwise=True)
        idx = np.concatenate([sel, test_idx])
        data = Dataset(in_norm.normalize(raw_inputs[idx]).astype(train_cfg.dtype),
                       out_norm.normalize(raw_targets[idx]).astype(train_cfg.dtype),
                       in_norm, out_norm, np.arange(n), np.arange(n, len(idx)))
        result = train(data, fno_cfg, train_cfg, init=init_weights(fno_cfg, init_seed))
        rec = {"n_train": int(n)}
        rec.update(result.history[-1] if result.history else
                   rmse_report(FNO(fno_cfg, data.inputs.shape[2:]), result.weights, data,
                               data.test_idx, dtype=train_cfg.dtype))
        rec.pop("epoch", None)
        rec.pop("train_loss", None)
        rows.append(rec)
        log.info("size %d: rmse_p %.3f rmse_f %.4f", n, rec["rmse_p"], rec["rmse_f"])
    return rows
