"""Central finite-difference oracle used by the gradient tests."""
import numpy as np

from patchforge.tensor import Tensor, backward


def numeric_grad(fn, arrays, k, eps=1e-5):
    """d fn(*arrays) / d arrays[k] by central differences; fn returns a float."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[k])
    it = np.nditer(base[k], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[k][i]
        base[k][i] = orig + eps
        hi = fn(*base)
        base[k][i] = orig - eps
        lo = fn(*base)
        base[k][i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return num / den


def tape_grads(build, arrays, projection):
    """Gradients of sum(build(*tensors) * projection) w.r.t. every input array."""
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    loss = (out * Tensor(projection, dtype=np.float64)).sum()
    backward(loss)
    return [t.grad for t in ts]


def max_grad_error(build, arrays, seed=0, eps=1e-5):
    """Largest relative error between tape and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    probe = build(*[Tensor(a, dtype=np.float64) for a in arrays])
    proj = rng.normal(size=probe.shape)

    def scalar(*arrs):
        return float((build(*[Tensor(a, dtype=np.float64) for a in arrs]).data * proj).sum())

    analytic = tape_grads(build, arrays, proj)
    worst = 0.0
    for k in range(len(arrays)):
        worst = max(worst, rel_error(analytic[k], numeric_grad(scalar, arrays, k, eps)))
    return worst
