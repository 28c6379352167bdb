"""Anatomy of a single-bit upset in float32.

Flips individual bits of a few representative values and shows how the
exponent MSB turns ordinary parameters into huge values, infinities, or
NaNs, and why values sitting in [1, 2) are the risky ones.
"""

import numpy as np

from seusim import flip_bit

print("=== exponent MSB (bit 30) flips ===")
for v in (0.5, 0.9, 1.0, 1.5, 1.9999, -1.25):
    out, cls = flip_bit(np.float32(v), "f32", 30)
    print(f"  {v:>8} -> {out!r:>14}  ({cls.field}, {cls.direction}, {cls.post_kind})")

print()
print("values in [1,2) have exponent 0111_1111: setting bit 30 makes it all")
print("ones, which encodes Inf (zero mantissa) or NaN (non-zero mantissa).")
print()

print("=== lower exponent bits: partial-exponent completion ===")
# 0.5 has exponent 0111_1110; bit 23 is its only zero below the MSB
v = np.float32(0.5)
step1, _ = flip_bit(v, "f32", 23)
print(f"  0.5 --bit23--> {step1}  (partial exponent now filled, |x| in [1,2))")
step2, cls = flip_bit(step1, "f32", 30)
print(f"  {step1} --bit30--> {step2}  ({cls.post_kind})")
print()

print("=== mantissa flips barely matter ===")
for bit in (0, 10, 22):
    out, _ = flip_bit(np.float32(1.5), "f32", bit)
    print(f"  1.5 with mantissa bit {bit:>2} flipped -> {out:.8f}")
print()

print("=== integers cannot produce NaN/Inf ===")
for bit in (0, 6, 7):
    out, cls = flip_bit(np.int8(1), "i8", bit)
    print(f"  int8 1 with bit {bit} flipped -> {int(out):>5}  ({cls.field})")
