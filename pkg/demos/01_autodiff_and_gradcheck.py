"""A tour of the tensor engine: forward graphs, backward, and the
finite-difference oracle that keeps every operation honest."""

import numpy as np

from germeval_mtl import autodiff as ad

rng = np.random.default_rng(0)

print("== building a small graph ==")
x = ad.parameter(rng.standard_normal((3, 4)))
w = ad.parameter(rng.standard_normal((4, 2)))
b = ad.parameter(np.zeros(2))
logits = ad.add(ad.matmul(ad.gelu(x), w), b)
probs = ad.softmax_rows(logits)
print("probs rows sum to:", probs.data.sum(axis=1))

loss = ad.cross_entropy(logits, [0, 1, 0])
print("cross-entropy loss:", float(loss.data))

print("\n== reverse-mode gradients ==")
loss.backward()
print("dL/db =", b.grad)

print("\n== the oracle: central finite differences ==")
b.zero_grad()


def f(bias):
    return ad.cross_entropy(ad.add(ad.matmul(ad.gelu(x), w), bias), [0, 1, 0])


numeric = ad.finite_diff_grad(f, b, h=1e-5)
analytic = f(b)
analytic.backward()
print("numeric  dL/db =", numeric.data)
print("analytic dL/db =", b.grad)
print("max abs difference:", float(np.abs(numeric.data - b.grad).max()))

print("\n== packaged gradient checks ==")
for name, build in {
    "matmul": lambda: (ad.matmul, [ad.parameter(rng.standard_normal((3, 4))),
                                   ad.parameter(rng.standard_normal((4, 2)))]),
    "layer_norm": lambda: (
        lambda t, g, bb: ad.layer_norm(t, g, bb),
        [ad.parameter(rng.standard_normal((2, 6))),
         ad.parameter(np.ones(6)), ad.parameter(np.zeros(6))],
    ),
    "softmax_rows": lambda: (ad.softmax_rows, [ad.parameter(rng.standard_normal((4, 5)))]),
}.items():
    fn, inputs = build()
    report = ad.grad_check(name, fn, inputs, tolerance=1e-4)
    print(f"{report.op_name:14s} max rel error {report.max_rel_error:.2e}  "
          f"(tolerance {report.tolerance:g}) -> {'ok' if report.passed else 'FAILED'}")
