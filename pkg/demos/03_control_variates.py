"""What the control parameters do, checked numerically.

Each client keeps a correction that estimates how its own gradient differs
from the population average. Because every correction is built from
deviations around the mean update, the corrections always sum to zero.
"""

import numpy as np

from fedrule.datagen import GenConfig, generate
from fedrule.train import ClientStates, TrainConfig, fed_train, init_params

ds = generate(GenConfig(n_users=12, n_clusters=3, alpha=0.1, seed=7))
cfg = TrainConfig(mode="fedrule", rounds=15, eval_every=0)
states = ClientStates.zeros(init_params(ds, cfg), len(ds))


def report(entry, params):
    total = max(float(np.abs(a).max()) for a in states.control_sum().values())
    size = np.mean([np.linalg.norm(states.control["phi1"][k]) for k in range(len(ds))])
    print(f"round {entry.round:2d}  loss {entry.train_loss:.4f}  |sum of controls| {total:.1e}  "
          f"mean |control(phi1)| {size:.4f}")


fed_train(ds, cfg, on_round=report, states=states)

# %%
# With the correction switched off the run is plain FedAvg, bit for bit.
a, _ = fed_train(ds, TrainConfig(mode="fedrule", rounds=5, lambda_theta=0, lambda_phi=0, eval_every=0))
b, _ = fed_train(ds, TrainConfig(mode="fedavg", rounds=5, eval_every=0))
print("\nlambda=0 equals FedAvg:", a == b)
