"""A full injection campaign, and what bounded activations buy.

Runs matched campaigns against exponent bits of interior conv weights in
two models that differ only in activation function, then prints the
layer x bit error matrix of the ReLU model.
"""

import numpy as np

from seusim import build_unet, synthetic_input
from seusim.campaign import CampaignConfig, run_campaign
from seusim.model import ParamKind

EXPONENT_BITS = tuple(range(23, 31))

matrices = {}
for act in ("relu", "hard_sigmoid"):
    model = build_unet(depth=1, base_channels=6, n_input_channels=3, n_classes=6,
                       activation_kind=act, seed=0)
    image = synthetic_input(model, 32, 32, seed=100)
    interior = tuple(n.id for n in model.nodes[:-1] if n.kind == "conv")
    config = CampaignConfig(
        included_kinds=frozenset({ParamKind.ConvWeight}),
        bits=EXPONENT_BITS, layers=interior, cap=100, seed=0, inputs=(image,),
    )
    records, matrix = run_campaign(model, config)
    matrices[act] = matrix
    print(f"{act:>12}: {matrix.count} injections, mean error {matrix.mean:.2%}, "
          f"mean nonzero {matrix.mean_nonzero:.2%}")

print()
print("bounded activations squash corrupted feature maps before they reach")
print("the classifier, so the hard-sigmoid model's mean error is lower.")
print()

print("ReLU model, per (layer, bit) mean error:")
cells = matrices["relu"].cells
layers = sorted({lid for lid, _ in cells})
print("layer " + " ".join(f"bit{b:>2}" for b in EXPONENT_BITS))
for lid in layers:
    row = [cells.get((lid, b)) for b in EXPONENT_BITS]
    print(f"{lid:>5} " + " ".join(f"{c.mean:5.2f}" if c else "    -" for c in row))
print()
print("bit 30 dominates; lower exponent bits only hurt where the census")
print("says many parameters have a '0' there (see demo 03).")
