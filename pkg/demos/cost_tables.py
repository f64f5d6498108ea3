# %% [markdown]
# # Cost tables
#
# Parameter and FLOP totals for the shipped configurations, next to the
# published reference values. Every number is computed statically from the
# compiled graph, so this runs in well under a second.

# %%
from hierlight import analyze, apply_scale, compile_model, override_args
from hierlight.cli import load_graph


def row(label, rep, ref_params, ref_gflops):
    dp = 100 * (rep.params_m / ref_params - 1)
    df = 100 * (rep.gflops / ref_gflops - 1)
    print(f"{label:<22} {rep.params_m:6.2f}M ({dp:+5.1f}%)  {rep.gflops:6.1f}G ({df:+5.1f}%)")


# %% [markdown]
# ## Size profiles of the full model

# %%
for scale, ref in {"n": (2.2, 11.7), "s": (7.8, 33.7), "m": (17.9, 88.2)}.items():
    row(f"hierlight-{scale}", analyze(load_graph("hierlight", scale)), *ref)

# %% [markdown]
# ## Ablation trajectory at the S profile
#
# Baseline, then a stride-4 head, then the extended neck with C2f blocks,
# then IRDCB blocks, and finally the lightweight downsample.

# %%
for model, ref in [
    ("yolov8", (11.1, 28.5)),
    ("yolov8-p2", (10.6, 36.7)),
    ("hepan-c2f", (11.3, 38.1)),
    ("hepan-irdcb", (8.8, 34.5)),
    ("hierlight", (7.8, 33.7)),
]:
    row(model, analyze(load_graph(model, "s")), *ref)

# %% [markdown]
# ## Expansion factor and depthwise layer count
#
# Extra depthwise layers cost about 11 parameters per hidden channel, so
# `n` barely moves the total while `t` scales every pointwise stage.

# %%
base = load_graph("hepan-irdcb").spec
for (n, t), ref in {(1, 2): (8.8, 34.5), (1, 4): (9.4, 35.4), (2, 2): (8.8, 34.5),
                    (2, 3): (9.1, 35.0), (2, 4): (9.4, 35.4)}.items():
    spec = apply_scale(override_args(base, "IRDCB", n=n, t=t), "s")
    row(f"IRDCB n={n} t={t}", analyze(compile_model(spec, 640)), *ref)
