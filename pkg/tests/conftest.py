import numpy as np
import pytest

from icer.forward import FrameConstraint, FrameState, make_model


def random_spd(rng, dim, spread=2.0):
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (Q * np.exp(rng.uniform(-spread, spread, dim))) @ Q.T


def random_psd(rng, dim, rank=None):
    G = rng.standard_normal((rank or dim, dim))
    return G.T @ G


def planted_frames(model, v_star, n, rng, supervised=True, mask=None):
    """Frames whose targets are rendered from ``v_star`` (clean planted edits)."""
    frames = []
    r = model.code_dim
    for t in range(1, n + 1):
        state = FrameState(t, rng.uniform(-1, 1, 2), model.obs_dim)
        msk = model.edit_region(state) if mask is None else mask
        y_base = model.eval(np.zeros(r), state)
        y_edit = model.eval(v_star, state) if supervised else None
        frames.append(FrameConstraint(state, msk, y_base, y_edit, supervised))
    return frames


def fd_jacobian(fun, v, h=1e-6):
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(len(v)):
        e = np.zeros_like(v)
        e[i] = h
        cols.append((np.asarray(fun(v + e)) - np.asarray(fun(v - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_grad(fun, v, h=1e-6):
    return fd_jacobian(lambda x: np.atleast_1d(fun(x)), v, h)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_model():
    return make_model("linear", (3, 12), seed=4, params={"mask_frac": 1.0})


ACCEPTANCE_LINES: list[str] = []


def verdict(number, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
