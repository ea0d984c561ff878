import numpy as np
import pytest

from mfcl.data import make_blobs


def quadratic_loss(seed):
    """A fixed random quadratic ``sum(c*y) + 0.5*sum(y**2)`` closure for
    finite-difference checks."""
    def loss_fn(out, trace):
        c = np.random.default_rng(seed + 1000).normal(size=out.shape)
        return float((c * out).sum() + 0.5 * (out * out).sum()), c + out, None
    return loss_fn


@pytest.fixture(scope="session")
def blobs4():
    """Four well-separated classes on 1x4x4 images."""
    return make_blobs(num_classes=4, samples_per_class=60, shape=(1, 4, 4), seed=3,
                      test_per_class=20, std=0.3)


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2d} {title}: {detail}")
