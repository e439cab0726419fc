import numpy as np
import pytest

FD_STEP = 1e-5
ACCEPTANCE_LINES = []


def numeric_grad(fn, arr, step=FD_STEP):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + step
        lp = fn()
        arr[idx] = old - step
        lm = fn()
        arr[idx] = old
        out[idx] = (lp - lm) / (2 * step)
    return out


def max_rel(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor),
                        initial=0.0))


def norm_rel(a, b):
    """Array-wise relative error; robust to entries below the finite-difference noise floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def loop_conv(x, w, b, stride, pad):
    """Six nested loops; the independent convolution oracle."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for i in range(n):
        for co in range(c_out):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[co, ci, ky, kx] * xp[i, ci, oy * stride + ky, ox * stride + kx]
                    out[i, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
