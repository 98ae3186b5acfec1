"""Wall-clock comparison of set-batch plans against one-event-per-batch processing."""
from __future__ import annotations

import time

import numpy as np

from .data import Dataset, SplitPlan
from .evaluation import score_queries
from .model import CTTSP, ModelConfig
from .numerics import Adam
from .setbatch import build_batch_plan, sequential_plan
from .training import train_epoch


def _time_train(ds, split_plan, plan, model_config, lr, seed) -> float:
    model = CTTSP(ds.num_users, ds.num_elements, model_config, seed=seed)
    opt = Adam(model.params, lr=lr)
    start = time.perf_counter()
    train_epoch(model, ds, plan, split_plan, opt, lr, np.random.default_rng(seed))
    return time.perf_counter() - start


def _time_eval(ds, split_plan, plan, model_config, seed) -> float:
    model = CTTSP(ds.num_users, ds.num_elements, model_config, seed=seed)
    context, pairs = split_plan.stage("test")
    start = time.perf_counter()
    score_queries(model, ds.events, context, [q for q, _ in pairs], plan)
    return time.perf_counter() - start


def run_bench(ds: Dataset, split_plan: SplitPlan, model_config: ModelConfig, lr: float = 1e-3,
              seed: int = 0, repeats: int = 1) -> dict:
    """Minimum over ``repeats`` of one training epoch and one test pass, both ways."""
    train_idx = split_plan.train_events
    test_idx, _ = split_plan.stage("test")
    plans = {
        "train": (build_batch_plan(ds.events, index=train_idx), sequential_plan(ds.events, index=train_idx)),
        "eval": (build_batch_plan(ds.events, index=test_idx), sequential_plan(ds.events, index=test_idx)),
    }
    report: dict = {
        "events": len(train_idx),
        "batch_num": plans["train"][0].batch_num,
        "eval_events": len(test_idx),
        "eval_batch_num": plans["eval"][0].batch_num,
    }
    for stage, (batched, sequential) in plans.items():
        times = {"set_batch": [], "sequential": []}
        for _ in range(repeats):
            for name, plan in (("set_batch", batched), ("sequential", sequential)):
                if stage == "train":
                    times[name].append(_time_train(ds, split_plan, plan, model_config, lr, seed))
                else:
                    times[name].append(_time_eval(ds, split_plan, plan, model_config, seed))
        best = {k: min(v) for k, v in times.items()}
        report[f"{stage}_seconds"] = best
        report[f"{stage}_speedup"] = best["sequential"] / best["set_batch"]
    return report
