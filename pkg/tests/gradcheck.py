"""Central finite-difference gradient checking shared by the test modules."""
import numpy as np

from ectraj import autograd as ag


def numeric_grad(f, arrays, index, h=1e-5):
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def check_op(build, arrays, h=1e-5):
    """``build(*tensors) -> scalar Tensor``; returns the worst relative error over inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        return float(build(*[ag.Tensor(a) for a in arrs]).data)

    ts = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = ag.grad(build(*ts), ts)
    return max(rel_error(analytic[i], numeric_grad(value, arrays, i, h)) for i in range(len(arrays)))
