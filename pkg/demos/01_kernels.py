"""The numeric kernels on a toy problem: scores, softmax, KL and its gradient."""

import numpy as np

from refeed.vecmath import distillation_loss, kl_gradient, min_max_normalize, softmax

rng = np.random.default_rng(0)
P = rng.standard_normal((5, 4)).astype(np.float32)  # five candidate passages
q = rng.standard_normal(4).astype(np.float32)

raw = P.astype(np.float64) @ q
print("retriever scores      ", np.round(raw, 4))
print("min-max normalized    ", np.round(min_max_normalize(raw), 4))
print("retriever distribution", np.round(softmax(min_max_normalize(raw), 1.0), 4))

# pretend the re-ranker prefers passage 3
teacher = softmax(min_max_normalize(np.array([0.1, 0.2, 0.0, 3.0, 0.5])), 2.0)
print("teacher distribution  ", np.round(teacher, 4))

loss = distillation_loss(teacher, q, P, 1.0, True)
grad = kl_gradient(teacher, q, P, 1.0, True)
print(f"KL = {loss:.6f}")

# check the analytic gradient against central differences
eps = 1e-6
q64 = q.astype(np.float64)
fd = np.array([
    (distillation_loss(teacher, q64 + eps * e, P, 1.0, True)
     - distillation_loss(teacher, q64 - eps * e, P, 1.0, True)) / (2 * eps)
    for e in np.eye(4)
])
print("analytic gradient", np.round(grad, 6))
print("finite difference", np.round(fd, 6))

# a few plain descent steps
for step in range(5):
    q64 = q64 - 0.5 * kl_gradient(teacher, q64, P, 1.0, True)
    print(step, round(distillation_loss(teacher, q64, P, 1.0, True), 6))
