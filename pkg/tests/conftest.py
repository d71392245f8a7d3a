import numpy as np
import pytest

from cfscm import ladder
from cfscm.nets import flatten, unflatten, value_and_grad


def small_spec(variant=ladder.MEDIATOR, x_dim=6, pa_dim=2):
    return ladder.LadderSpec(variant, x_dim=x_dim, pa_dim=pa_dim, z_dims=(2, 3), h_dim=4, bu_dim=4, hidden=5)


def fd_check(loss_fn, params, keys, h=1e-5, n_coords=None, seed=0):
    """Max relative error between tape gradients and central differences."""
    _, grads = value_and_grad(loss_fn, params, keys)
    g = flatten(grads, keys)
    theta = flatten(params, keys)
    coords = np.arange(theta.size)
    if n_coords is not None and n_coords < theta.size:
        coords = np.random.default_rng(seed).choice(theta.size, n_coords, replace=False)
    worst = 0.0
    for c in coords:
        up, dn = theta.copy(), theta.copy()
        up[c] += h
        dn[c] -= h
        fu = loss_fn(unflatten(up, params, keys)).value
        fd = loss_fn(unflatten(dn, params, keys)).value
        num = (float(fu) - float(fd)) / (2 * h)
        worst = max(worst, abs(num - g[c]) / max(1.0, abs(num), abs(g[c])))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
