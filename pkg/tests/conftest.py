import numpy as np

from screenalign import autodiff as ad


def fd_gradient(make_loss, param, h=1e-4, coords=None):
    """Central finite differences of a scalar-valued graph wrt one leaf.

    `make_loss` rebuilds the graph from the leaves' current .data each call,
    so perturbing param.data in place and re-evaluating gives an oracle that
    is independent of the backward implementation. Returns (coords, values).
    """
    base = param.data
    if coords is None:
        coords = [(i, j) for i in range(base.shape[0]) for j in range(base.shape[1])]
    vals = []
    for (i, j) in coords:
        orig = base[i, j]
        base[i, j] = orig + h
        up = make_loss().item()
        base[i, j] = orig - h
        down = make_loss().item()
        base[i, j] = orig
        vals.append((up - down) / (2.0 * h))
    return coords, np.array(vals, dtype=np.float64)


def worst_grad_err(analytic, numeric, atol):
    """Max relative error after discounting an absolute-noise floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _pick_coords(param, max_coords, rng):
    n = param.data.size
    if max_coords is None or n <= max_coords:
        return None
    flat = rng.choice(n, size=max_coords, replace=False)
    return [(int(k) // param.shape[1], int(k) % param.shape[1]) for k in sorted(flat)]


def assert_grads_match(make_loss, params, tol, h=1e-5, atol=1e-8, max_coords=None,
                       fd_make_loss=None, fd_params=None):
    """Backward vs finite differences for every leaf in `params` (name -> Tensor).

    When `fd_make_loss`/`fd_params` are given, the oracle is evaluated on that
    mirror graph instead (used to check float32 gradients against a float64
    oracle holding identical parameter values).
    """
    fd_make_loss = fd_make_loss or make_loss
    fd_params = fd_params or params
    rng = np.random.default_rng(1234)
    for p in params.values():
        p.zero_grad()
    ad.backward(make_loss())
    for name, p in params.items():
        fp = fd_params[name]
        coords = _pick_coords(fp, max_coords, rng)
        coords, numeric = fd_gradient(fd_make_loss, fp, h=h, coords=coords)
        if p.grad is None:
            # leaf does not feed the loss; the oracle must agree it is inert
            assert np.abs(numeric).max() < 1e-6, f"missing gradient for {name}"
            continue
        analytic = np.array([p.grad[i, j] for (i, j) in coords], dtype=np.float64)
        err = worst_grad_err(analytic, numeric, atol)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e} >= {tol}"


def assert_grads_match_dual(builder, tol64=1e-5, tol32=1e-3, h=1e-5, max_coords=None):
    """Run the f64 FD check, then check f32 gradients against the f64 oracle.

    `builder(dtype)` must return (make_loss, params) with identical parameter
    values regardless of dtype (generate in float32, cast up).
    """
    make64, params64 = builder(np.float64)
    assert_grads_match(make64, params64, tol=tol64, h=h, atol=1e-8, max_coords=max_coords)
    make32, params32 = builder(np.float32)
    for name in params32:
        assert np.array_equal(params32[name].data.astype(np.float64), params64[name].data), \
            f"builder produced different values for {name} across dtypes"
    assert_grads_match(make32, params32, tol=tol32, h=h, atol=1e-6, max_coords=max_coords,
                       fd_make_loss=make64, fd_params=params64)
