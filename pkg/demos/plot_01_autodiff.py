"""
Reverse-mode gradients on numpy arrays
======================================

The model is built on a small tape-free autodiff: every op returns a Tensor
that remembers its parents and a closure for the backward pass.
"""

# %%
# A scalar function of a matrix, and its gradient.
import numpy as np

from mixtable.nn import Tensor, backward, check_gradients, ops

rng = np.random.default_rng(0)
w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
x = Tensor(rng.standard_normal((5, 3)))
loss = ops.mean(ops.square(ops.gelu(ops.matmul(x, w))))
backward(loss)
print("loss", float(loss.data))
print("dloss/dw\n", np.round(w.grad, 4))

# %%
# Central differences agree with the analytic gradient.
errors = check_gradients(
    lambda d: ops.sum_(ops.mul(ops.softmax(ops.matmul(d["x"], d["w"])), Tensor(np.arange(20.0).reshape(5, 4)))),
    {"x": x.data, "w": w.data},
)
print("max relative error per input:", {k: f"{v:.1e}" for k, v in errors.items()})

# %%
# Fit a two-layer MLP to a sine with Adam and a cosine learning-rate decay.
from mixtable.nn import MLP, Adam, ParameterStore, cosine_lr

store = ParameterStore(np.float64)
net = MLP(store, "f", 1, 32, 1, rng)
for name, p in store.items():
    p.data *= 25  # leave the tiny default init for a faster toy fit

xs = np.linspace(-3, 3, 128)[:, None]
ys = np.sin(xs)
opt = Adam()
for step in range(600):
    store.zero_grad()
    err = ops.mean(ops.square(ops.sub(net(store, Tensor(xs)), Tensor(ys))))
    backward(err)
    opt.step(store, store.grads(), cosine_lr(step, 600, 1e-2))
    if step % 150 == 0:
        print(f"step {step:3d}  mse {float(err.data):.4f}")
print("final mse", float(err.data))
