import os
import subprocess
import sys

import numpy as np
import pytest

from liftrec import kernels


def test_fallback_always_available():
    assert "python" in kernels.BACKENDS
    assert kernels.BACKEND in kernels.BACKENDS


def test_env_forces_pure_python():
    env = dict(os.environ, LIFTREC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from liftrec import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError, match="unavailable"):
        kernels.get_topk("fortran")


@pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled kernel not built")
def test_backends_agree_on_random_indexes(rng):
    for _ in range(20):
        n, m, k = int(rng.integers(1, 300)), int(rng.integers(1, 5)), int(rng.integers(1, 12))
        n_terms = int(rng.integers(1, 40))
        offsets = np.sort(rng.integers(0, n * m + 1, size=n_terms - 1))
        offsets = np.concatenate([[0], offsets, [n * m]]).astype(np.int64)
        # each term's posting list holds distinct positions
        postings = np.concatenate([np.sort(rng.choice(n, size=min(offsets[t + 1] - offsets[t], n), replace=False))
                                   for t in range(n_terms)]).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum([min(offsets[t + 1] - offsets[t], n) for t in range(n_terms)])])
        weights = rng.normal(size=n_terms)
        terms = rng.integers(-1, n_terms, size=(15, m)).astype(np.int64)
        a = kernels.BACKENDS["python"](terms, offsets.astype(np.int64), postings, weights, n, k)
        b = kernels.BACKENDS["cython"](terms, offsets.astype(np.int64), postings, weights, n, k)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
