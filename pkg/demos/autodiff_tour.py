"""A short tour of the tensor engine: ops, backward, and the finite-difference check."""

import numpy as np

from almt import tensor as T
from almt.tensor import Tensor

rng = np.random.default_rng(0)

# leaves that want gradients
x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

# a tiny attention-like block
scores = T.matmul(x, w)
probs = T.softmax_rows(scores)
loss = T.mean_all(T.gelu(probs))
print("loss:", float(loss.data))

# the tape is a topological order of everything that fed the loss
tape = T.ComputationTape.trace(loss)
print("ops on tape:", [e._op for e in tape.entries])

T.backward(loss)
print("grad shapes:", x.grad.shape, w.grad.shape)


# compare with central differences, in float64 so the check is tight
def f(params):
    return T.mean_all(T.gelu(T.softmax_rows(T.matmul(params[0], params[1]))))


with T.default_dtype(np.float64):
    x64 = Tensor(x.data, requires_grad=True)
    w64 = Tensor(w.data, requires_grad=True)
    print("max relative error:", T.finite_diff_check(f, [x64, w64], h=1e-4))

# non-finite values are caught at the op that produced them
try:
    with np.errstate(over="ignore"):
        T.mul(Tensor([1e38]), Tensor([1e38]))
except T.NonFiniteError as exc:
    print("caught:", exc)
