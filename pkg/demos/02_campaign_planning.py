"""Statistical sizing of injection campaigns.

The per-layer injection count follows the finite-population formula
n = N / (1 + e^2 (N-1) / (t^2 p (1-p))) with e=0.025, t=1.96, p=0.5,
capped at 1550.  Exhaustive injection is only needed for tiny layers.
"""

from seusim import build_unet, sample_size
from seusim.campaign import CampaignConfig, plan

print("fault-space size N -> planned injections n")
for N in (1, 10, 100, 1000, 10_000, 100_000, 1_000_000, 10_000_000):
    n = sample_size(N)
    note = "(exhaustive)" if n == N else f"({100 * n / N:.2f}% of N)"
    print(f"  {N:>10,} -> {n:>5} {note}")

print()
print("the curve saturates: t^2 p(1-p)/e^2 = 1536.64, so n never needs to")
print(f"exceed 1537 (cap 1550 is never binding: n(10^9) = {sample_size(10 ** 9)})")
print()

model = build_unet(depth=2, base_channels=8, n_input_channels=3, n_classes=6, seed=0)
config = CampaignConfig(inputs=())
print("per-layer plan for a depth-2 synthetic model (default parameter kinds):")
print("  layer     N      n")
for entry in plan(model, config).entries:
    print(f"  {entry.layer_id:>5} {entry.fault_space:>8} {entry.injections:>6}")
