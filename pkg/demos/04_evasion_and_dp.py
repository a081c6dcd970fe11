# %% [markdown]
# Two defences and two ways around them.
#
# A client that withholds outputs on sensitive rows is still exposed by a
# shadow student or by querying noisy neighbours. DP-SGD in local training
# trades accuracy for lower attack success.

# %%
from fdprivlab.harness import run_experiment, run_sweep, spec_from_dict

spec = spec_from_dict({
    "seed": 0,
    "data": {"alpha": 10.0},
    "fd": {"rounds": 1},
    "attacks": {"coop": {}, "evade_shadow": {}, "evade_indirect": {"noise_scale": 0.5, "count": 8}},
})
res = run_experiment(spec, timestamp=False)["attacks"]
for name in ("coop", "evade_shadow", "evade_indirect"):
    m = res[name]["0"]["effective_mean"]
    print(f"{name:15s} AUC {m['auc']:.3f}  TPR@1%FPR {m['tpr@1%fpr']:.3f}")

# %%
base = spec_from_dict({"seed": 0, "data": {"alpha": 10.0}, "fd": {"rounds": 1}, "attacks": ["coop"]})
for report in run_sweep(base, "dp_noise", [0.0, 0.5, 1.0], timestamp=False):
    m = report["attacks"]["coop"]["0"]["effective_mean"]
    print(f"noise {report['sweep']['value']}: local accuracy {report['fd']['local_accuracy_round0']:.3f}  "
          f"co-op AUC {m['auc']:.3f}")
