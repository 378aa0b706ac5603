"""The numba kernels and the pure-numpy fallback (selected by
OSDFUSION_DISABLE_NUMBA) must agree."""

import json
import os
import subprocess
import sys

import numpy as np

from osdfusion._accel import NUMBA_ENABLED
from osdfusion.matching import _lapjv_kernel, solve_assignment

_SNIPPET = """
import json
import numpy as np
from osdfusion._accel import NUMBA_ENABLED
from osdfusion.matching import solve_assignment
from osdfusion.density import ClassDensityModel, gmm_log_likelihoods_batch

rng = np.random.default_rng(17)
cost = rng.uniform(0, 1, (12, 9))
pairs = solve_assignment(cost)
model = ClassDensityModel(
    class_names=("a", "b"),
    priors=np.array([0.5, 0.5]),
    weights=[np.array([1.0]), np.array([0.4, 0.6])],
    means=[np.zeros((1, 3)), rng.standard_normal((2, 3))],
    covariances=[np.eye(3)[None], np.stack([np.eye(3), 2 * np.eye(3)])],
)
values = gmm_log_likelihoods_batch(model, rng.standard_normal((20, 3)))
print(json.dumps({
    "numba_enabled": NUMBA_ENABLED,
    "pairs": pairs,
    "values": values.tolist(),
}))
"""


def _run_snippet(disable_numba):
    env = dict(os.environ)
    if disable_numba:
        env["OSDFUSION_DISABLE_NUMBA"] = "1"
    else:
        env.pop("OSDFUSION_DISABLE_NUMBA", None)
    out = subprocess.run(
        [sys.executable, "-c", _SNIPPET], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout)


def test_env_flag_selects_fallback_with_identical_results():
    fallback = _run_snippet(disable_numba=True)
    assert fallback["numba_enabled"] is False
    primary = _run_snippet(disable_numba=False)
    assert [tuple(p) for p in fallback["pairs"]] == [tuple(p) for p in primary["pairs"]]
    np.testing.assert_allclose(
        np.asarray(fallback["values"]), np.asarray(primary["values"]), rtol=1e-12
    )


def test_jit_and_python_function_agree_in_process():
    if not NUMBA_ENABLED:
        return
    py_func = _lapjv_kernel.py_func
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(n, 10))
        cost = rng.uniform(-1, 1, (n, m))
        np.testing.assert_array_equal(_lapjv_kernel(cost), py_func(cost))


def test_solve_assignment_usable_under_both_backends():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert solve_assignment(cost) == [(0, 0), (1, 1)]
