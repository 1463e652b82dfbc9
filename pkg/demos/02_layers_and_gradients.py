"""Layers from scratch: convolution geometry, depthwise vs standard cost, and a
finite-difference check of every backward pass.

Run: python demos/02_layers_and_gradients.py
"""
import numpy as np

from lwmscnn import gradcheck
from lwmscnn.layers import Conv2D, DepthwiseConv2D, conv2d_forward, depthwise_conv2d_forward

rng = np.random.default_rng(0)

# "same" padding keeps ceil(size / stride); the odd pad row goes to the bottom
x = rng.standard_normal((1, 7, 7, 3))
print("conv 3x3 stride 2 on 7x7:", conv2d_forward(x, rng.standard_normal((3, 3, 3, 8)), 2).shape)
print("depthwise 5x5 on 7x7:   ", depthwise_conv2d_forward(x, rng.standard_normal((5, 5, 3))).shape)

# a depthwise 5x5 has k*k*c weights, a standard 5x5 has k*k*c*c
for c in (32, 64, 128):
    dw = DepthwiseConv2D("dw", c, 5).param_count()
    std = Conv2D("conv", c, c, 5).param_count()
    print(f"c={c:<4} depthwise {dw:>7,}  standard {std:>8,}  ratio {std / dw:.0f}x")
print()

# central differences in float64 against the analytic gradients
results = gradcheck.check_layers()
results += gradcheck.check_model(max_per_tensor=8)
print(gradcheck.format_table(results))
worst = max(results, key=lambda r: r.rel_error)
print(f"\nworst relative error {worst.rel_error:.2e} ({worst.name} / {worst.tensor})")
