import numba as nb
import numpy as np


@nb.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    # element-wise in float64, one pass over flat views
    for k in range(p.size):
        gk = np.float64(g[k])
        mk = beta1 * np.float64(m[k]) + (1.0 - beta1) * gk
        vk = beta2 * np.float64(v[k]) + (1.0 - beta2) * gk * gk
        m[k] = mk
        v[k] = vk
        p[k] = p[k] - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)


def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-15):
    """One bias-corrected Adam update, in place. ``step`` is 1-based."""
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, moments {m.shape}/{v.shape}")
    if param.size:
        views = [a.reshape(-1) for a in (param, m, v)]
        if any(not np.shares_memory(a, b) for a, b in zip(views, (param, m, v))):
            raise ValueError("parameters and moments must be contiguous arrays")
        _adam_kernel(views[0], np.ascontiguousarray(grad).reshape(-1), views[1], views[2], float(lr),
                     float(beta1), float(beta2), float(eps), 1.0 - beta1 ** step, 1.0 - beta2 ** step)
    return param, m, v


class Adam:
    """Adam over a dict of named arrays with one step counter per name.

    Per-name counters let groups join late (the deformation field only starts
    training in the fine stage) and still get a proper bias correction.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: dict, grads: dict, lrs: dict):
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = 0
            self.steps[name] += 1
            adam_step(p, g, self.m[name], self.v[name], self.steps[name], lrs[name],
                      self.beta1, self.beta2, self.eps)

    def reindex(self, names, index, n_new):
        """Keep moment rows ``index`` and append ``n_new`` zero rows for each name."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                kept = store[name][index]
                store[name] = np.concatenate([kept, np.zeros((n_new,) + kept.shape[1:], dtype=kept.dtype)])

    def state_dict(self):
        return {"m": self.m, "v": self.v, "steps": self.steps}
