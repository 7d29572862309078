import numpy as np

from pase.diffcore import Graph


def fd_abs_error(f, params, h=1e-6):
    """Largest absolute gap between backward() and central differences over all coordinates."""
    g = Graph()
    ids = params.bind(g)
    g.backward(f(g, ids))
    analytic = {n: g.grad(i).copy() for n, i in ids.items()}
    worst = 0.0
    for name in params.names():
        flat = params[name].value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            vals = []
            for step in (h, -h):
                flat[j] = orig + step
                gg = Graph()
                vals.append(gg.scalar(f(gg, params.bind(gg))))
            flat[j] = orig
            num = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(num - analytic[name].reshape(-1)[j]))
    return worst
