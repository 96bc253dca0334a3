"""Central finite-difference gradient oracle, independent of the tape.

Evaluates the forward function twice per perturbed coordinate at float64 and
compares against the analytic gradient from backward().
"""
import numpy as np

from fsids.numcore import Tensor, backward


def finite_difference(f, arrays, h=1e-5, coords=None, rng=None):
    """Gradients of scalar f(*arrays) w.r.t. each float64 array.

    coords: number of randomly sampled coordinates per array to probe
    (None = all).  Returns a list of (grad_array, probed_mask) pairs where
    unprobed entries of grad_array are NaN.
    """
    out = []
    for ai, a in enumerate(arrays):
        flat = a.ravel()
        n = flat.size
        if coords is None or coords >= n:
            probe = np.arange(n)
        else:
            probe = rng.choice(n, size=coords, replace=False)
        g = np.full(n, np.nan)
        for k in probe:
            orig = flat[k]
            flat[k] = orig + h
            fp = f(*arrays)
            flat[k] = orig - h
            fm = f(*arrays)
            flat[k] = orig
            g[k] = (fp - fm) / (2.0 * h)
        mask = np.zeros(n, dtype=bool)
        mask[probe] = True
        out.append((g.reshape(a.shape), mask.reshape(a.shape)))
    return out


def assert_matches_fd(build_loss, arrays, h=1e-5, rtol=1e-4, coords=None, rng=None):
    """build_loss(*tensors) -> scalar Tensor; arrays are float64 ndarrays."""
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build_loss(*tensors)
    backward(loss)
    analytic = [t.grad for t in tensors]

    def forward(*arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(build_loss(*ts).data)

    fd = finite_difference(forward, [a.copy() for a in arrays], h=h, coords=coords, rng=rng)
    for ag, (fg, mask) in zip(analytic, fd):
        a = ag[mask]
        f = fg[mask]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3)
        rel = np.abs(a - f) / denom
        assert np.all(rel < rtol), f"max relative gradient error {rel.max():.3e} exceeds {rtol}"
