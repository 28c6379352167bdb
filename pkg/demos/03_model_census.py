"""Where the fault space lives and what the parameters look like.

Builds a synthetic encoder-decoder model, enumerates its fault space,
and runs the value-range and partial-exponent censuses that explain the
error patterns seen in campaigns.
"""

from seusim import build_unet, enumerate_fault_space
from seusim.inject import partial_exponent_census, value_range_census
from seusim.model import ALL_PARAM_KINDS

model = build_unet(depth=2, base_channels=8, n_input_channels=3, n_classes=6,
                   activation_kind="hard_sigmoid", seed=0)
space = enumerate_fault_space(model, ALL_PARAM_KINDS)

print(f"model: {len(model.nodes)} nodes, fault space {space.total():,} bit positions")
print()
print("layer  N_layer   kinds")
for lid in space.layer_ids():
    kinds = ",".join(e.kind.value for e in space.layer_entries(lid))
    print(f"{lid:>5}  {space.layer_total(lid):>7}  {kinds}")
print()

print("value-range census (fractions per layer):")
print("layer  |x|<1   1<=|x|<2  |x|>=2  zeros")
for lid, c in sorted(value_range_census(model).items()):
    print(f"{lid:>5}  {c.frac_lt1:.4f}  {c.frac_1to2:.4f}    {c.frac_ge2:.4f}  {c.frac_zero:.4f}")
print()
print("almost everything sits below 2, so a 0->1 flip of exponent bit 30")
print("always produces a huge value; the [1,2) sliver becomes NaN/Inf.")
print()

print("partial-exponent census at bit 26 (exposure to one-flip completion):")
print("layer  frac '0' at bit  frac one-flip-from-filled")
for lid, c in sorted(partial_exponent_census(model, 26).items()):
    print(f"{lid:>5}  {c.frac_zero_at_bit:>15.4f}  {c.frac_one_flip_from_filled:>25.4f}")
