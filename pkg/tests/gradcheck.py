"""Central finite-difference gradient checks in float64."""
import numpy as np

from hvqcodec import autograd as ag
from hvqcodec.autograd import Tensor


def numeric_grad(f, arrays, index, h=1e-3):
    """d f / d arrays[index] by central differences; ``f`` maps numpy arrays to a float."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[i]
        base[i] = old + h
        up = f(arrays)
        base[i] = old - h
        down = f(arrays)
        base[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(build, arrays, h=1e-3):
    """``build`` maps a list of Tensors to a scalar Tensor; returns the worst relative error."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    build(tensors).backward()
    analytic = [t.grad for t in tensors]

    def value(arrs):
        return build([Tensor(a, dtype=np.float64) for a in arrs]).item()

    worst = 0.0
    for k in range(len(arrays)):
        num = numeric_grad(value, arrays, k, h)
        worst = max(worst, relative_error(analytic[k], num))
    return worst


def module_gradcheck(module, x, g, h=1e-3):
    """Worst relative error over the input and every parameter of ``module`` (float64)."""
    module.astype(np.float64)
    params = module.parameters()

    def loss(xarr):
        return ag.tsum(ag.mul(module(Tensor(xarr, dtype=np.float64)), Tensor(g, dtype=np.float64)))

    xt = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
    ag.zero_grad(params)
    ag.tsum(ag.mul(module(xt), Tensor(g, dtype=np.float64))).backward()
    worst = relative_error(xt.grad, numeric_grad(lambda a: loss(a[0]).item(), [x.copy()], 0, h))
    for p in params:
        analytic = p.grad.copy()

        def f(arrs, p=p):
            saved = p.data
            p.data = arrs[0]
            try:
                with ag.no_grad():
                    return loss(x).item()
            finally:
                p.data = saved

        worst = max(worst, relative_error(analytic, numeric_grad(f, [p.data.copy()], 0, h)))
    return worst
