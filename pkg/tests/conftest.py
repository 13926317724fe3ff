"""Shared helpers for the test suite.

The central one is ``check_grad``, a finite-difference comparison used by
every gradient test. It treats the graph builder as a black box: the builder
reads the leaves' current ``data`` arrays, so perturbing a coordinate in
place and rebuilding gives the perturbed loss value.
"""

import numpy as np

from mixvae.autodiff import no_grad

# One line per shipping criterion, appended by test_acceptance.py and echoed
# after the run so the verdicts survive output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def fd_loss_value(build) -> float:
    """Evaluate the scalar loss once without recording onto the tape."""
    with no_grad():
        return build().item()


def check_grad(build, leaves, nprng, coords_per_leaf=3, rtol=1e-3, atol=1e-5,
               eps=1e-6) -> int:
    """Compare autodiff gradients of ``build()`` against central differences.

    ``build`` must reconstruct the scalar loss from the leaves' current data
    every time it is called. Samples ``coords_per_leaf`` coordinates per leaf
    with ``nprng`` and returns how many coordinates were compared, so callers
    can tally case counts.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = build()
    loss.backward()
    checked = 0
    for leaf in leaves:
        assert leaf.grad is not None, f"leaf of shape {leaf.shape} got no gradient"
        flat = leaf.data.reshape(-1)
        grad = leaf.grad.reshape(-1)
        picks = nprng.choice(flat.size, size=min(coords_per_leaf, flat.size),
                             replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + eps
            up = fd_loss_value(build)
            flat[i] = keep - eps
            down = fd_loss_value(build)
            flat[i] = keep
            fd = (up - down) / (2.0 * eps)
            np.testing.assert_allclose(
                grad[i], fd, rtol=rtol, atol=atol,
                err_msg=f"coordinate {i} of leaf with shape {leaf.shape}")
            checked += 1
    return checked
