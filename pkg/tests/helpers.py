"""Shared test oracles: finite differences and gradient comparison.

The finite-difference side only re-runs forward passes, keeping it
independent of the reverse-mode implementation it checks.
"""

import numpy as np

from yieldgraph.autodiff import Tensor


def fd_gradient(f, arrays, h=1e-5):
    """Central finite differences of a scalar-valued f(*arrays) w.r.t. each
    array, elementwise."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def fd_directional(f, arrays, direction, h=1e-6):
    """Central finite difference of f along a unit direction split across
    the arrays (a list matching shapes)."""
    saved = [a.copy() for a in arrays]
    for a, d in zip(arrays, direction):
        a += h * d
    up = f(*arrays)
    for a, s, d in zip(arrays, saved, direction):
        a[...] = s - h * d
    down = f(*arrays)
    for a, s in zip(arrays, saved):
        a[...] = s
    return (up - down) / (2.0 * h)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_param_gradients(params, forward, rtol=1e-4, h_schedule=(1e-5, 1e-6, 1e-7)):
    """Compare analytic parameter gradients against central differences.

    ``params`` are live requires_grad Tensors used by the zero-argument
    ``forward`` callable (define-by-run: each call rebuilds the graph).
    """
    for p in params:
        p.zero_grad()
    forward().backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    errs = []
    for h in h_schedule:
        worst = 0.0
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = forward().item()
                flat[i] = orig - h
                down = forward().item()
                flat[i] = orig
                num[i] = (up - down) / (2.0 * h)
            worst = max(worst, rel_err(an.reshape(-1), num))
        errs.append(worst)
        if worst <= rtol:
            return worst
    raise AssertionError(
        f"parameter gradient mismatch: best rel err {min(errs):.3e} over h={list(h_schedule)}"
    )


def check_tensor_gradients(build_loss, arrays, rtol=1e-4, h_schedule=(1e-5, 1e-6, 1e-7)):
    """Compare analytic gradients of build_loss against central differences.

    ``build_loss(*tensors)`` maps leaf Tensors to a scalar Tensor;
    ``arrays`` are the leaf values. Retries with smaller h so an isolated
    kink crossing (relu/max) is not mistaken for a wrong gradient: a real
    bug fails at every h.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*leaves)
    loss.backward()
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(a)
                for lf, a in zip(leaves, arrays)]

    def forward(*arrs):
        return build_loss(*[Tensor(a) for a in arrs]).item()

    errs = []
    for h in h_schedule:
        numeric = fd_gradient(forward, [a.copy() for a in arrays], h=h)
        err = max(rel_err(an, nu) for an, nu in zip(analytic, numeric))
        errs.append(err)
        if err <= rtol:
            return err
    raise AssertionError(
        f"gradient mismatch: best rel err {min(errs):.3e} over h={list(h_schedule)}"
    )
