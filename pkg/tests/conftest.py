import itertools

import numpy as np
import pytest

from rankcompress.architectures import build_arch

ACCEPTANCE_LINES: list[str] = []


def naive_conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """Straight six-loop convolution, used as an oracle for the fast path."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cg + ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc + (0.0 if bias is None else bias[oc])
    return out


def brute_force_plans(values, weights, cap):
    """Every feasible assignment as a sorted list of (-obj, size, choice) keys."""
    import math

    keys = []
    for choice in itertools.product(*[range(len(v)) for v in values]):
        size = sum(weights[r][c] for r, c in enumerate(choice))
        if size > cap:
            continue
        obj = math.fsum(values[r][c] for r, c in enumerate(choice))
        keys.append((-obj, size, choice))
    return sorted(keys)


@pytest.fixture(scope="session")
def testnet():
    return build_arch("testnet_small", num_classes=10, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
