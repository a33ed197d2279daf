import math

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def loop_conv2d(x, k, dh=1, dw=1, pad=(0, 0, 0, 0)):
    """Nested-loop cross-correlation oracle, independent of the library code."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    top, bottom, left, right = pad
    hp, wp = h + top + bottom, w + left + right
    xp = [[[0.0] * wp for _ in range(hp)] for _ in range(c_in)]
    for c in range(c_in):
        for i in range(h):
            for j in range(w):
                xp[c][i + top][j + left] = float(x[c, i, j])
    h_out = hp - dh * (kh - 1)
    w_out = wp - dw * (kw - 1)
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                s = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            s += xp[c][i + dh * a][j + dw * b] * float(k[o, c, a, b])
                out[o, i, j] = s
    return out


def tally(y_hat, y, threshold=0.5):
    """Frame-by-frame, class-by-class counting with plain Python integers."""
    tp = fp = fn = n_ref = s = d = i = 0
    for t in range(len(y)):
        fn_t = fp_t = 0
        for c in range(len(y[t])):
            p = y_hat[t][c] >= threshold
            r = y[t][c] == 1
            n_ref += r
            if p and r:
                tp += 1
            elif p:
                fp_t += 1
            elif r:
                fn_t += 1
        fp += fp_t
        fn += fn_t
        s += min(fn_t, fp_t)
        d += max(0, fn_t - fp_t)
        i += max(0, fp_t - fn_t)
    return tp, fp, fn, n_ref, s, d, i


def adam_oracle(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
