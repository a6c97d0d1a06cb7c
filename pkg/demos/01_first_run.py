"""A first federated run, start to finish.

Five simulated camera sites each see a drifting slice of the same population
of identities. Every round they train their small adaptive head on new
prototypes plus a little rehearsal, upload it, and receive a relevance-weighted
base from the server. At the end we look at how retrieval quality evolved.

    python demos/01_first_run.py
"""
from fedstil.config import ExperimentConfig
from fedstil.runner import run_experiment

cfg = ExperimentConfig().with_seed(1)
print(f"{cfg.stream.num_clients} clients, {cfg.stream.num_rounds} rounds, "
      f"{cfg.shapes.param_count} adaptive parameters per client\n")

result = run_experiment(cfg)
timeline = result.state.timeline

# Per-client mAP on the task each client just learned, round by round.
print("round  " + "  ".join(f"client{c}" for c in range(cfg.stream.num_clients)))
for r in range(cfg.stream.num_rounds):
    cells = []
    for c in range(cfg.stream.num_clients):
        v = timeline.value(c, r, r)
        cells.append(f"{v:7.3f}" if v is not None else "      -")
    print(f"{r:5d}  " + "  ".join(cells))

s = result.summary
print(f"\nfinal averaged mAP {s['final_map']:.4f}, rank-1 {s['final_rank1']:.4f}, "
      f"forgetting {s['final_forgetting']:.4f}")
print(f"traffic: {s['s2c_bytes']:,} bytes down, {s['c2s_bytes']:,} bytes up")
