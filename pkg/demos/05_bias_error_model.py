"""Closed-form bias-flip error model vs. a measured campaign.

A flipped exponent MSB in a final-layer bias either bans a class (bias
negative -> error = class frequency) or forces it everywhere (positive
-> error = 1 - frequency).  A probe model with engineered golden
frequencies lets the analytical expectation be checked end to end.
"""

import numpy as np

from seusim import (
    bias_signs,
    build_bias_probe_model,
    expected_bias_msb_error,
    expected_quantized_bias_error,
)
from seusim.campaign import CampaignConfig, run_campaign
from seusim.errormodel import SaturationProfile, contributions
from seusim.model import ParamKind

FREQS = [0.0, 0.4491, 0.0441, 0.2695, 0.0747, 0.1627]
BIASES = [-0.85, 0.32, -0.03, 0.04, -0.17, 0.11]

signs = bias_signs(BIASES)
print("class  freq    bias    sign      contribution")
for j, (f, b) in enumerate(zip(FREQS, BIASES)):
    c = contributions(FREQS, signs)[j]
    print(f"{j:>5}  {f:.4f}  {b:>5.2f}  {signs[j]:>8}  {c:.4f}")

expected = expected_bias_msb_error(FREQS, signs)
print(f"\nexpected error for a uniform flip over the six biases: {expected:.2%}")

model, image = build_bias_probe_model(BIASES, FREQS, seed=0, image_hw=(64, 64))
config = CampaignConfig(included_kinds=frozenset({ParamKind.ConvBias}),
                        bits=(30,), seed=1, inputs=(image,))
records, matrix = run_campaign(model, config)
measured = matrix.cells[(model.nodes[-1].id, 30)].mean
print(f"measured on the probe model (bit-30, bias-only campaign): {measured:.2%}")
print(f"absolute deviation: {abs(measured - expected):.4%}")
print()

print("quantized-bias variant: flips at or above the saturation bit behave")
print("like the MSB case; a linear ramp models the lower bits:")
for weighting in ("saturated_only", "linear_ramp"):
    profile = SaturationProfile(k_sat=17, bit_range=(0, 30), weighting=weighting)
    v = expected_quantized_bias_error(FREQS, signs, profile)
    print(f"  {weighting:>15}: {v:.2%}")
