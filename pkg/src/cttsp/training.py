"""Loss, the batched training loop with early stopping, and checkpoints."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, SplitPlan
from .evaluation import DEFAULT_KS, MetricReport, evaluate
from .memory import HistoryIndex, MemoryBank
from .model import CTTSP, ForwardPass, ModelConfig
from .numerics import Adam, CosineSchedule, NonFiniteError, OptimizerState, Tape, Tensor, as_tensor, ops
from .numerics.io import atomic_write_text, load_arrays, save_arrays
from .setbatch import BatchPlan, build_batch_plan


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 2000
    patience: int = 100
    seed: int = 0
    min_lr: float = 0.0
    ks: tuple[int, ...] = DEFAULT_KS
    reset_memory: bool = True  # False carries the bank into the next epoch


def training_loss(probs, targets) -> Tensor:
    """Summed binary cross-entropy over every scored event and element."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        return as_tensor(0.0)
    return ops.bce_loss(probs, targets)


def target_matrix(ds: Dataset, targets: Sequence[int]) -> np.ndarray:
    y = np.zeros((len(targets), ds.num_elements))
    for r, k in enumerate(targets):
        y[r, list(ds.events[k].elements)] = 1.0
    return y


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    validation: dict[str, float]
    avg_ndcg: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: CTTSP
    optimizer: OptimizerState
    bank: MemoryBank
    history: HistoryIndex
    best_epoch: int
    best_score: float
    best_report: Optional[MetricReport]
    log: list[EpochLog] = field(default_factory=list)
    seconds: float = 0.0


def train_epoch(model: CTTSP, ds: Dataset, plan: BatchPlan, split_plan: SplitPlan, optimizer: Adam,
                lr: float, rng: np.random.Generator, epoch: int = 0,
                bank: Optional[MemoryBank] = None) -> tuple[float, MemoryBank, HistoryIndex]:
    """One pass over the training events, one Adam step per batch with a loss.

    The pass starts from zero memory unless ``bank`` is given; a given bank
    keeps its vectors and only has its clock restarted.
    """
    successor = dict(split_plan.train_pairs)
    fresh, history = model.new_state()
    bank = fresh if bank is None else bank.restart_clock()
    fp = ForwardPass(model, ds.events, plan.batches, bank, history, score=successor.keys())
    total = 0.0
    for b in range(len(plan.batches)):
        try:
            with Tape() as tape:
                out = fp.run_batch(b, training=True, rng=rng)
                if not out.events:
                    continue
                loss = training_loss(out.probs, target_matrix(ds, [successor[k] for k in out.events]))
            value = float(loss.value)
            if not np.isfinite(value):
                raise NonFiniteError("loss")
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step(lr)
        except NonFiniteError as err:
            raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {err}") from None
        total += value
    return total, bank, history


def run_training(ds: Dataset, split_plan: SplitPlan, model_config: ModelConfig, config: TrainConfig,
                 plan: Optional[BatchPlan] = None, log_path=None,
                 on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train with early stopping on the mean validation NDCG over ``config.ks``.

    Stops once ``patience`` epochs pass without improvement (so patience 0
    runs one epoch) or at ``max_epochs``; returns the best epoch's model.
    """
    start = time.perf_counter()
    model = CTTSP(ds.num_users, ds.num_elements, model_config, seed=config.seed)
    plan = plan if plan is not None else build_batch_plan(ds.events, index=split_plan.train_events)
    val_plan = build_batch_plan(ds.events, index=split_plan.val_context)
    optimizer = Adam(model.params, lr=config.lr)
    schedule = CosineSchedule(config.lr, config.min_lr, max(config.max_epochs, 1))
    rng = np.random.default_rng(config.seed)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(log_path), "")

    best = None
    log: list[EpochLog] = []
    lines: list[str] = []
    carried: Optional[MemoryBank] = None
    for epoch in range(config.max_epochs):
        lr = schedule(epoch)
        loss, bank, history = train_epoch(model, ds, plan, split_plan, optimizer, lr, rng, epoch, carried)
        if not config.reset_memory:
            carried = MemoryBank(ds.num_users, ds.num_elements, model.dim).restore(bank.snapshot())
        report = evaluate(model, ds, split_plan, "validation", ks=config.ks, plan=val_plan)
        entry = EpochLog(epoch, lr, loss, report.flat(), report.average_ndcg())
        log.append(entry)
        if log_path is not None:
            lines.append(entry.to_json())
            atomic_write_text(Path(log_path), "\n".join(lines) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
        if best is None or entry.avg_ndcg > best["score"]:
            best = {"score": entry.avg_ndcg, "epoch": epoch, "report": report,
                    "params": model.parameter_values(), "optimizer": _copy_state(optimizer.state),
                    "bank": bank, "history": history}
        if epoch - best["epoch"] >= config.patience:
            break

    if best is None:
        raise TrainingError("max_epochs must be at least 1")
    model.load_parameter_values(best["params"])
    return TrainResult(model, best["optimizer"], best["bank"], best["history"], best["epoch"], best["score"],
                       best["report"], log, time.perf_counter() - start)


def _copy_state(s: OptimizerState) -> OptimizerState:
    return OptimizerState({k: v.copy() for k, v in s.first_moment.items()},
                          {k: v.copy() for k, v in s.second_moment.items()},
                          dict(s.updates), s.step, s.beta1, s.beta2, s.eps)


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: CTTSP
    optimizer: OptimizerState
    bank: MemoryBank
    history: HistoryIndex
    meta: dict


def save_checkpoint(stem, model: CTTSP, optimizer: OptimizerState, bank: MemoryBank, history: HistoryIndex,
                    meta: Optional[dict] = None) -> None:
    """Parameters, Adam moments, memory bank and history in one binary blob with a JSON index."""
    arrays = {f"param/{k}": v for k, v in model.parameter_values().items()}
    arrays.update({f"adam_m/{k}": v for k, v in optimizer.first_moment.items()})
    arrays.update({f"adam_v/{k}": v for k, v in optimizer.second_moment.items()})
    arrays.update({f"bank/{k}": v for k, v in bank.snapshot().items()})
    arrays.update(history.to_arrays())
    doc = dict(meta or {})
    doc.update({
        "num_users": model.num_users, "num_elements": model.num_elements, "model": model.config_dict(),
        "optimizer": {"step": optimizer.step, "updates": optimizer.updates,
                      "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps},
    })
    save_arrays(Path(stem), arrays, doc)


def load_checkpoint(stem) -> Checkpoint:
    arrays, meta = load_arrays(Path(stem))
    cfg = ModelConfig(**meta["model"])
    model = CTTSP(meta["num_users"], meta["num_elements"], cfg)
    model.load_parameter_values({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    o = meta["optimizer"]
    opt = OptimizerState({k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                         {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
                         {k: int(v) for k, v in o["updates"].items()}, int(o["step"]),
                         o["beta1"], o["beta2"], o["eps"])
    bank = MemoryBank(model.num_users, model.num_elements, cfg.dim)
    bank.restore({k[5:]: v for k, v in arrays.items() if k.startswith("bank/")})
    history = HistoryIndex.from_arrays(model.num_users, arrays)
    return Checkpoint(model, opt, bank, history, meta)
