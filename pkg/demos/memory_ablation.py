# %% [markdown]
# The loop-trap scenes: a dead-end pocket sits between the start and the
# goal's room. Without visitation memory the greedy explorer keeps picking
# the pocket and burns its whole budget.

# %%
from egonav import trap_manifest
from egonav.harness import LoopConfig, load_suite, run_suite
from egonav.policy import FrontierGreedy

traps = load_suite(trap_manifest(), max_steps=500)

for label, config in [("with memory", LoopConfig()), ("without memory", LoopConfig(use_visitation_memory=False))]:
    summary = run_suite(traps, FrontierGreedy(), config=config)
    steps = [r.steps for r in summary.results]
    print(f"{label:>15}: SR={summary.sr:.2f} steps={steps}")
