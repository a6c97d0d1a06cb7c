"""Rehearsal against forgetting.

Each site keeps a small memory of prototypes chosen closest to their identity
centres and mixes them into later batches. Turning that off lets old tasks
fade. We run both variants on the same seeds and compare the average drop
from each old task's best score to its final score.

    python demos/03_what_rehearsal_buys.py
"""
import dataclasses

from fedstil.config import ExperimentConfig
from fedstil.runner import run_experiment

print("seed  with_memory  without_memory   (forgetting, lower is better)")
for seed in (1, 2, 3):
    base = ExperimentConfig().with_seed(seed)
    row = []
    for strategy in ("fedstil", "fedstil_no_rehearsal"):
        summary = run_experiment(dataclasses.replace(base, strategy=strategy)).summary
        row.append(summary["final_forgetting"])
    print(f"{seed:4d}  {row[0]:11.4f}  {row[1]:14.4f}")
