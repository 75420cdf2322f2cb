import warnings

import numpy as np
import pytest

from profiscan.mesh import TriangleMesh
from profiscan.raycast import build_accel

warnings.filterwarnings("ignore", message=".*TBB.*")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


def plane_mesh(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), half=3000.0):
    """Two-triangle square through ``point`` with unit ``normal``."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    p = np.asarray(point, dtype=float)
    v = [p + half * (sa * a + sb * b) for sa, sb in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
    return TriangleMesh.from_arrays(np.array(v), [[0, 1, 2], [0, 2, 3]], reference_normals=[n, n])


def random_soup(rng, n_tri, scale=100.0):
    v = rng.uniform(-scale, scale, (3 * n_tri, 3))
    # shrink each triangle around its centroid so the soup is not a solid blob
    c = v.reshape(n_tri, 3, 3).mean(axis=1)
    s = rng.uniform(0.05, 0.3, n_tri)[:, None, None]
    v = (c[:, None, :] + s * (v.reshape(n_tri, 3, 3) - c[:, None, :])).reshape(-1, 3)
    return TriangleMesh.from_arrays(v, np.arange(3 * n_tri).reshape(n_tri, 3))


@pytest.fixture(scope="session")
def flat_accel():
    return build_accel(plane_mesh())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
