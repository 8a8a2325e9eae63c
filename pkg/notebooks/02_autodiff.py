"""
Reverse-mode autodiff and gradient checking
===========================================

Every model component is built from a small numpy autodiff core. Central
differences confirm the backward passes.
"""

import numpy as np

from dynllm import diffmath as dm

rng = np.random.default_rng(0)
x = dm.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
W = dm.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
b = dm.Tensor(np.zeros(2), requires_grad=True)

# a tiny network: tanh(xW + b), squared and summed
loss = dm.sum(dm.square(dm.tanh(dm.affine(x, W, b))))
loss.backward()
print("loss", loss.data, "\ndL/db", b.grad)

# relative error between the backward pass and central differences
f = lambda: dm.sum(dm.square(dm.tanh(dm.affine(x, W, b))))  # noqa: E731
print("element-wise error %.2e" % dm.grad_check(f, [x, W, b]))
print("per-tensor error   %.2e" % dm.grad_check(f, [x, W, b], per_tensor=True))

# the checker notices a wrong gradient: here b's gradient is doubled
b.grad = None
dm.sum(dm.square(dm.tanh(dm.affine(x.data, W.data, b)))).backward()
wrong = {id(b): 2 * b.grad}
print("doubled gradient error %.2f" % dm.grad_check(f, [x, W, b], analytic=wrong))

# softmax is invariant to a shift of its logits, so a bias added to every
# logit gets an exactly zero gradient
s = dm.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
shift = dm.Tensor(np.zeros((2, 1)), requires_grad=True)
dm.sum(dm.square(dm.softmax(dm.add(s, shift), axis=-1))).backward()
print("shift gradient", shift.grad.ravel())
