# %% [markdown]
# Membership inference against round-0 shared outputs.
#
# Co-op references are peers with a similar inferred label mix. Distillation
# references are students trained on the target's own shared outputs, so they
# also work when no peer looks alike.

# %%
from fdprivlab.harness import run_experiment, spec_from_dict


def attack(alpha, k_sweep=()):
    spec = spec_from_dict({
        "seed": 0,
        "data": {"alpha": alpha},
        "fd": {"rounds": 1},
        "attacks": {"coop": {}, "distillation": {"num_reference_models": 32}},
        "k_sweep": list(k_sweep),
    })
    return run_experiment(spec, timestamp=False)["attacks"]


for alpha in (10.0, 0.1):
    res = attack(alpha)
    for name in ("coop", "distillation"):
        sec = res[name]["0"]
        m = sec["effective_mean"]
        print(f"alpha={alpha:5} {name:13s} coverage {sec['coverage']:.1f}  AUC {m['auc']:.3f}  "
              f"TPR@1%FPR {m['tpr@1%fpr']:.3f}")

# %% [markdown]
# More students give a tighter reference distribution.

# %%
res = attack(1.0, k_sweep=(4, 8, 16))
for k in (4, 8, 16, 32):
    name = "distillation" if k == 32 else f"distillation@K={k}"
    m = res[name]["0"]["mean"]
    print(f"K={k:2d}  AUC {m['auc']:.3f}  TPR@1%FPR {m['tpr@1%fpr']:.3f}")
