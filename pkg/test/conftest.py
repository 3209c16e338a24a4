import numpy as np
import pytest

import field as fld


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_extent():
    # 8 m cube, one border token on a 4-token grid
    return fld.SceneExtent(L=8.0, H_t=4, N=1, z_floor=-1.0)


def make_field(extent, res=8, channels=4, hidden=8, code_dim=3, n_codes=2, seed=0, density_bias=0.5,
               dtype=np.float64):
    """Random float64 field with visible density everywhere and non-zero border tokens."""
    rng = np.random.default_rng(seed)
    field = fld.TriPlaneField.create(extent, res=res, channels=channels, hidden=hidden, code_dim=code_dim,
                                     n_codes=n_codes, sky_shape=(6, 8), rng=rng, plane_scale=0.5, dtype=dtype)
    for name in fld.PARAM_GROUPS["planes"]:
        p = getattr(field, name)
        p[...] = rng.normal(0.0, 0.5, p.shape)
    field.decoder.b_sigma[...] = density_bias
    field.decoder.b_c[...] = rng.normal(0.0, 0.3, 3)
    field.sky.grid[...] = rng.uniform(0.2, 0.8, field.sky.grid.shape)
    field.codes[...] = rng.normal(0.0, 0.5, field.codes.shape)
    return field


@pytest.fixture
def small_field(small_extent):
    return make_field(small_extent)


def _fd_entry(loss_fn, field, grads, name, i, step, rtol, atol):
    flat = field.parameters()[name].reshape(-1)
    old = flat[i]
    flat[i] = old + step
    up = loss_fn()
    flat[i] = old - step
    down = loss_fn()
    flat[i] = old
    numeric = (up - down) / (2.0 * step)
    analytic = grads[name].reshape(-1)[i]
    assert abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric)), \
        f"{name}[{i}]: analytic {analytic:.3e} vs numeric {numeric:.3e}"


def fd_check(loss_fn, field, grads, rng, per_param=12, step=1e-4, rtol=1e-3, atol=1e-7, names=None,
             per_group=None):
    """Central differences on randomly picked entries of each parameter.

    With ``per_group`` the picks are drawn jointly over the arrays of each
    parameter group; a group with fewer entries is checked entry by entry.
    """
    params = field.parameters()
    names = list(names or params)
    if per_group is None:
        for name in names:
            size = params[name].size
            for i in rng.choice(size, size=min(per_param, size), replace=False):
                _fd_entry(loss_fn, field, grads, name, i, step, rtol, atol)
        return
    for members in fld.PARAM_GROUPS.values():
        entries = [(name, i) for name in members if name in names for i in range(params[name].size)]
        if not entries:
            continue
        for k in rng.choice(len(entries), size=min(per_group, len(entries)), replace=False):
            _fd_entry(loss_fn, field, grads, *entries[k], step, rtol, atol)
