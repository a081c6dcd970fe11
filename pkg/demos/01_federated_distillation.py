# %% [markdown]
# Federated distillation on a synthetic Gaussian mixture.
#
# Ten clients hold Dirichlet-skewed shards. Each round they train locally,
# share outputs on a public sample, and distil towards the aggregate.

# %%
import numpy as np

from fdprivlab.data import dirichlet_partition, label_distribution, split_train_public, synth_gaussian_mixture
from fdprivlab.fd import FDConfig, FederatedDistillation
from fdprivlab.nn import TrainConfig

full = synth_gaussian_mixture(10, 32, 20_000, 2.5, seed=0)
test = synth_gaussian_mixture(10, 32, 2_000, 2.5, seed=0, draw="test")
train, public = split_train_public(full, 0.8, seed=0)
part = dirichlet_partition(train, 10, alpha=1.0, seed=0)
print("shard sizes", part.sizes())
print("client 0 labels", np.round(label_distribution(train.labels[part.client_shards[0]], 10), 2))

# %%
for framework in ("fedmd", "dsfl", "cronus"):
    cfg = FDConfig(framework=framework, num_clients=10, rounds=5, round_public_count=2000,
                   train=TrainConfig(learning_rate=0.2, batch_size=32), seed=0)
    trace = FederatedDistillation(cfg, train, part, public, test).run()
    local = np.mean(trace.entries[0].local_accuracy)
    fed = [np.mean(e.federated_accuracy) for e in trace]
    print(f"{framework:7s} local {local:.3f}  federated by round", np.round(fed, 3))
