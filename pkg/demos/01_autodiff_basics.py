"""
Autodiff basics
===============

Tensors record operations on a tape; ``Tape.backward`` fills ``.grad`` on the
leaves. Here we fit a single 3x3 convolution kernel to a known blur with Adam,
then confirm the tape gradients against finite differences.
"""

import numpy as np

from foldless import ndtensor as nt
from foldless.gradcheck import check_op

rng = np.random.default_rng(0)
image = nt.Tensor(rng.random((1, 32, 32)))
true_kernel = np.full((1, 1, 3, 3), 1.0 / 9.0)
target = nt.conv_nd(image, nt.Tensor(true_kernel))

###############################################################################
# Fit the kernel. Each step records a fresh tape.

kernel = nt.Tensor(rng.standard_normal((1, 1, 3, 3)) * 0.1, requires_grad=True)
opt = nt.Adam({"k": kernel}, lr=1e-2)
for step in range(301):
    with nt.Tape() as tape:
        loss = nt.mean(nt.square(nt.sub(nt.conv_nd(image, kernel), target)))
    tape.backward(loss)
    opt.step()
    if step % 100 == 0:
        print(f"step {step:3d}  mse {loss.item():.3e}")

print("learned kernel (x9):")
print(np.round(kernel.data[0, 0] * 9, 3))

###############################################################################
# Compare tape gradients with central differences in 64-bit.

res = check_op("conv + leaky_relu", lambda x, k: nt.mean(nt.square(nt.leaky_relu(nt.conv_nd(x, k, stride=2)))),
               [rng.standard_normal((2, 8, 8)), rng.standard_normal((3, 2, 3, 3))])
print(res.line())
