"""Shared test oracles, kept independent of the code paths they check."""

import numpy as np

from graphprune import autodiff as ad


def central_diff(loss_fn, p, flat_index, eps=1e-5):
    """Central finite difference of loss_fn() w.r.t. one coordinate of p."""
    flat = p.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + eps
    hi = loss_fn()
    flat[flat_index] = orig - eps
    lo = loss_fn()
    flat[flat_index] = orig
    return (hi - lo) / (2.0 * eps)


def check_gradients(loss_builder, params, rng, n_coords=12, eps=1e-5, rel_tol=1e-4):
    """Compare backward() gradients against central differences.

    loss_builder: () -> scalar Tensor, rebuilding the graph from params.
    params: iterable of Tensors with requires_grad.
    Checks ``n_coords`` randomly chosen coordinates per parameter tensor and
    returns the worst relative error seen.  Relative error uses a 1e-6 floor
    so near-zero gradients compare on an absolute scale.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = loss_builder()
    ad.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]

    def loss_value():
        with ad.no_grad():
            return loss_builder().item()

    worst = 0.0
    for p, g in zip(params, analytic):
        n = min(n_coords, p.size)
        coords = rng.choice(p.size, size=n, replace=False)
        for idx in coords:
            fd = central_diff(loss_value, p, int(idx), eps=eps)
            an = g.reshape(-1)[int(idx)]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, err)
            assert err < rel_tol, (
                f"gradient mismatch for {p.name or p.shape}[{idx}]: "
                f"analytic {an:.10g} vs central-diff {fd:.10g} (rel {err:.3g})"
            )
    for p in params:
        p.grad = None
    return worst
