"""Central finite-difference gradient checking, independent of the tape.

The oracle perturbs raw numpy buffers and re-runs the forward function; it
never inspects analytic gradients, so it stays a true second route.
"""

import numpy as np

from neuroprog.tensor import Tensor, backward


def numerical_grad(f, arrays, idx, h=1e-5, coords=None):
    """Central differences of scalar f(arrays) w.r.t. arrays[idx].

    coords limits the check to a subset of flat coordinates (for large
    operands); default checks every coordinate.
    """
    a = arrays[idx]
    flat = a.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    g = np.zeros(a.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arrays)
        flat[i] = orig - h
        fm = f(arrays)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(a.shape)


def check_model_grads(loss_fn, tensors, rel_tol=1e-4, h=1e-5, max_coords=6,
                      rng=None, atol=1e-8, fd_fn=None):
    """Spot-check tape gradients of in-place parameter tensors.

    `loss_fn()` rebuilds the forward pass from the tensors' current data.
    A random subset of coordinates per tensor is perturbed centrally.
    `fd_fn` (scalar float function) overrides the finite-difference
    target when the backward root intentionally differs from the scalar
    the gradients realize (adversarial min-max objectives).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if fd_fn is None:
        fd_fn = lambda: loss_fn().item()  # noqa: E731
    for t in tensors:
        t.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        coords = (range(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        for i in coords:
            ana = t.grad.reshape(-1)[i]
            err = np.inf
            # shrink the step on failure: kink/tie crossings (max-pool
            # argmax flips, leaky-relu corners) poison central differences
            # in an O(h) window, while genuine gradient bugs persist at
            # every step size
            for step in (h, h / 8, h / 64, h / 512):
                orig = flat[i]
                flat[i] = orig + step
                fp = fd_fn()
                flat[i] = orig - step
                fm = fd_fn()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                if abs(num - ana) < atol:
                    # structurally-zero gradients: central differences
                    # only measure roundoff noise there
                    err = 0.0
                    break
                err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
                if err < rel_tol:
                    break
            worst = max(worst, err)
            assert err < rel_tol, (
                f"coord {i} of tensor shape {t.data.shape}: analytic {ana:.8g} "
                f"vs numeric {num:.8g} (rel err {err:.3e})")
    return worst


def check_grads(build, arrays, rel_tol=1e-4, h=1e-5, max_coords=None, rng=None):
    """Compare tape gradients of `build` against central differences.

    `build(tensors) -> scalar Tensor` runs the differentiable path on
    Tensor-wrapped copies of `arrays`. Returns the worst relative error.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    for t in tensors:
        t.zero_grad()
    backward(loss)

    def f(arrs):
        ts = [Tensor(a, requires_grad=False) for a in arrs]
        return build(ts).item()

    worst = 0.0
    work = [a.copy() for a in arrays]
    for i, t in enumerate(tensors):
        coords = None
        if max_coords is not None and work[i].size > max_coords:
            r = rng if rng is not None else np.random.default_rng(0)
            coords = r.choice(work[i].size, size=max_coords, replace=False)
        num = numerical_grad(f, work, i, h=h, coords=coords)
        ana = t.grad
        sel = slice(None) if coords is None else np.asarray(coords)
        nf = num.reshape(-1)[sel]
        af = ana.reshape(-1)[sel]
        denom = max(np.abs(nf).max(), np.abs(af).max(), 1e-8)
        err = np.abs(nf - af).max() / denom
        worst = max(worst, err)
        assert err < rel_tol, f"operand {i}: rel err {err:.3e} >= {rel_tol}"
    return worst
