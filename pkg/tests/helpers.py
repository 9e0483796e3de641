"""Shared test utilities: observation fixtures and parameter-space
finite-difference gradient checks."""

import numpy as np

from weavecoord import autodiff as ad
from weavecoord.nets import NetConfig, ParamStore


def tiny_config(rng=None, m=3, k=2, **kw):
    dims = dict(d_e=4, d_n=4, d_t=3, d_c=4, hidden=4, M=m, K=k, pos_scale=5.0)
    if rng is not None:
        dims.update(
            d_e=int(rng.integers(3, 6)),
            d_n=int(rng.integers(3, 6)),
            d_t=int(rng.integers(2, 5)),
            d_c=int(rng.integers(3, 6)),
            hidden=int(rng.integers(3, 6)),
        )
    dims.update(kw)
    return NetConfig(**dims)


def random_obs(rng, b, m, n_valid=None):
    ego = rng.normal(size=(b, 5))
    nbr = rng.normal(scale=2.0, size=(b, m, 5))
    nbr[..., 4] = 1.0
    for row in range(b):
        nv = n_valid if n_valid is not None else int(rng.integers(0, m + 1))
        if nv < m:
            nbr[row, nv:, :] = 0.0
    return ego, nbr


def grad_check(make_scalar, store: ParamStore, names=None, h=1e-6, tol=1e-4):
    """Compare tape gradients of make_scalar(params) with coordinate-wise
    central finite differences over every trainable parameter."""
    names = list(names or store.trainable_names())
    tensors = store.tensors()
    out = make_scalar(tensors)
    out.backward()
    analytic = []
    numeric = []
    arrays = {k: v.copy() for k, v in store.arrays.items()}
    for name in names:
        g = tensors[name].grad
        analytic.append(np.zeros(arrays[name].size) if g is None else g.ravel().copy())
        a = arrays[name]
        flat = a.ravel()
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(ad.val(make_scalar(arrays)))
            flat[i] = orig - h
            lo = float(ad.val(make_scalar(arrays)))
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * h)
        numeric.append(fd)
    ga = np.concatenate(analytic)
    gn = np.concatenate(numeric)
    rel = np.linalg.norm(ga - gn) / max(1e-10, np.linalg.norm(ga) + np.linalg.norm(gn))
    assert rel < tol, f"gradient mismatch: rel err {rel:.3e}"
    return rel
