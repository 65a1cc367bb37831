"""Per-token training cost and compute-matched step counts for the two presets.

Run with ``python3 demos/flops_budgets.py``.  Nothing is trained here; the
numbers come straight from the cost model and the planner.
"""

import numpy as np

from hldlab.flops import cost_per_token, ot_tokens, ot_budget, plan, preset_cost_model

# The 123M-class student, priced once per method.  HLDC uses a single matrix
# regressor, the hint phase uses the wider MLP regressor.
kd = preset_cost_model("gemma3_123m", "kd")
hldc = preset_cost_model("gemma3_123m", "hldc")
hint = preset_cost_model("gemma3_123m", "hldf")

c_data = cost_per_token("nll", kd)
print("123M student, FLOPs per token relative to plain next-token training")
for label, value in [
    ("kd", cost_per_token("kd", kd)),
    ("hldc", cost_per_token("hldc", hldc)),
    ("hldf hint phase", cost_per_token("hldf", hint, "hint")),
]:
    print(f"  {label:16s} {value / c_data:.4f}")

# One overtraining unit is twenty tokens per backbone parameter.
print(f"\n1 OT unit = {ot_tokens(1, kd):.3g} tokens = {ot_budget(1, kd):.3g} FLOPs")

# Split a 4-unit budget between hint and KD phases for a few P1 fractions.
tokens_per_step = 64 * 2048
budget = ot_budget(4, kd)
print(f"\nbudget {budget:.3g} FLOPs, {tokens_per_step} tokens per step")
print("  P1     hint steps   kd steps   forfeited FLOPs")
for p1 in np.array([0.0, 0.01, 0.05, 0.2]):
    p = plan("hldf", hint, budget, tokens_per_step, p1=float(p1))
    steps = {ph.name: ph.steps for ph in p.phases}
    print(f"  {p1:<5.2f}  {steps.get('hint', 0):>10d}   {steps['kd']:>8d}   {p.forfeited_flops:.3g}")

# A cheaper hint step buys more optimizer updates than the KD phase it replaces.
kd_plan = plan("kd", kd, budget, tokens_per_step)
hl_plan = plan("hldf", hint, budget, tokens_per_step, p1=0.2)
print(f"\nsteps under KD only: {kd_plan.total_steps}, with a 20% hint phase: {hl_plan.total_steps}")

# The large preset shows how the hint discount scales with model size.
big = preset_cost_model("gemma3_27b", "hldf")
ratio = cost_per_token("hldf", big, "hint") / cost_per_token("nll", big)
print(f"\n27B-class student, hint phase / NLL cost = {ratio:.4f}")
