"""Shared test utilities: the central finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from neuralmesh import autodiff as ad


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(
    build_loss,
    tensors,
    h: float = 1e-5,
    rtol: float = 1e-5,
    fd_floor: float = 1e-8,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Compare tape gradients of ``build_loss(*tensors)`` against central FD.

    Every tensor must be float64 and require grad.  ``sample`` limits the
    number of probed entries per tensor (all entries when None).  Relative
    error is checked only where |FD| exceeds ``fd_floor``, and mismatches
    smaller than the central-difference cancellation error (eps * |f| / h)
    are accepted: FD cannot resolve differences below its own noise.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradient harness runs in double precision"
        t.zero_grad()
    loss = build_loss()
    ad.backward(loss)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.ravel()
        gflat = g.ravel()
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=sample, replace=False)
        for i in idx:
            orig = flat[i]
            with ad.no_grad():
                flat[i] = orig + h
                fp = build_loss().item()
                flat[i] = orig - h
                fm = build_loss().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            if abs(fd) <= fd_floor:
                continue
            noise = 16.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / h
            diff = abs(gflat[i] - fd)
            if diff <= noise:
                continue
            rel = diff / abs(fd)
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at flat index {i}: analytic {gflat[i]!r}, "
                f"fd {fd!r}, rel err {rel:.3e}"
            )
    return worst
