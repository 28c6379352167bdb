"""Prune -> fold -> quantize, and how compression moves the fault space.

Sweeps one layer's prune ratio against segmentation quality, applies a
plan, folds batch norm, quantizes to int8, and re-runs a small campaign
on each stage of the pipeline.
"""

import numpy as np

from seusim import (
    apply_prune,
    build_unet,
    enumerate_fault_space,
    fold_batch_norm,
    predict_classes,
    quantize_model,
    sensitivity_sweep,
    stopping_check,
    synthetic_input,
)
from seusim.campaign import CampaignConfig, run_campaign
from seusim.compress import PruningPlan, evaluate_model
from seusim.model import ALL_PARAM_KINDS, ParamKind

model = build_unet(depth=1, base_channels=8, n_input_channels=3, n_classes=6, seed=0)
image = synthetic_input(model, 32, 32, seed=1)
labels = predict_classes(model, image)  # self-labels: quality of the transform itself

curve = sensitivity_sweep(model, [image], [labels], layer_id=0)
print("sensitivity of layer 0 (GIoU at prune ratios 0.0 .. 0.9):")
print("  " + "  ".join(f"{r:.1f}:{v:5.1f}" for r, v in zip(curve.ratios, curve.giou_values)))
print()

plan = PruningPlan({0: 0.25, 4: 0.25, 9: 0.25})
pruned = apply_prune(model, plan)
baseline = evaluate_model(model, [image], [labels])
after = evaluate_model(pruned, [image], [labels])
print(f"pruned @0.25 on three conv layers: GIoU/WIoU {after[0]:.2f}/{after[1]:.2f} "
      f"(baseline {baseline[0]:.2f}/{baseline[1]:.2f}) -> {stopping_check(baseline, after)}")

folded = fold_batch_norm(pruned)
quantized = quantize_model(folded, [image])

stages = {"float32": model, "pruned": pruned, "pruned+folded": folded, "int8": quantized}
print()
print("stage            params  fault-space N   campaign mean error")
for name, g in stages.items():
    space = enumerate_fault_space(g, ALL_PARAM_KINDS).total()
    params = sum(t.size for n in g.nodes for t in n.params.values())
    config = CampaignConfig(
        included_kinds=frozenset({ParamKind.ConvWeight, ParamKind.ConvBias}),
        cap=40, seed=7, inputs=(image,),
    )
    _, matrix = run_campaign(g, config)
    print(f"{name:<15} {params:>7} {space:>14,}   {matrix.mean:.2%}")
print()
print("integer graphs cannot mint NaN/Inf, and pruning shrinks N, so the")
print("compressed model trades per-fault sensitivity against exposure.")
