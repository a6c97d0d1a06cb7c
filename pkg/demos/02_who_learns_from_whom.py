"""Which neighbours does the server trust?

Identities walk along a ring of sites, so neighbouring cameras tend to see
overlapping people. The server never sees images; it only compares the mean
prototype each site reports for its current task, discounted over recent
rounds. This demo prints the resulting weights, one matrix per round.

    python demos/02_who_learns_from_whom.py
"""
import numpy as np

from fedstil.config import ExperimentConfig
from fedstil.runner import run_experiment

cfg = ExperimentConfig().with_seed(2)
state = run_experiment(cfg).state
n = cfg.stream.num_clients

for r in range(1, cfg.stream.num_rounds):
    w = np.zeros((n, n))
    for rnd, c, j, weight in state.relevance:
        if rnd == r:
            w[c, j] = weight
    print(f"round {r}  (row = receiving client, column = neighbour)")
    for c in range(n):
        print("   " + " ".join(f"{x:5.2f}" if x else "    ." for x in w[c]))
    print()

# With a soft temperature the weights stay close to uniform: on this stream,
# averaging away noise is worth more than specialising on one neighbour.
