import os
import subprocess
import sys

import numpy as np
import pytest

from dmqca.kernels import _numba, _numpy

CASES = [
    ((1, 4, 16, 16), (4, 1, 3, 3, 3), (1, 2, 2), (1, 1, 1)),
    ((3, 2, 9, 8), (2, 3, 2, 3, 3), (1, 1, 1), (1, 1, 1)),
    ((2, 1, 12, 12), (3, 2, 1, 3, 3), (1, 1, 1), (1, 2, 2)),
    ((2, 3, 7, 7), (2, 2, 3, 3, 3), (2, 2, 3), (1, 1, 1)),
]


@pytest.mark.parametrize("xs,ks,stride,dil", CASES)
def test_forward_backends_bitwise_equal(xs, ks, stride, dil, rng):
    x, k = rng.normal(size=xs), rng.normal(size=ks)
    a = _numba.conv_forward(x, k, stride, dil)
    b = _numpy.conv_forward(x, k, stride, dil)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("xs,ks,stride,dil", CASES)
def test_backward_backends_agree(xs, ks, stride, dil, rng):
    x, k = rng.normal(size=xs), rng.normal(size=ks)
    dy = rng.normal(size=_numpy.conv_forward(x, k, stride, dil).shape)
    np.testing.assert_allclose(_numba.conv_grad_input(dy, k, stride, dil, x.shape),
                               _numpy.conv_grad_input(dy, k, stride, dil, x.shape), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(_numba.conv_grad_weight(dy, x, k.shape, stride, dil),
                               _numpy.conv_grad_weight(dy, x, k.shape, stride, dil), rtol=1e-12, atol=1e-12)


def test_matmul_backends_bitwise_equal(rng):
    a, b = rng.normal(size=(3, 5, 17)), rng.normal(size=(3, 17, 4))
    assert _numba.matmul(a, b).tobytes() == _numpy.matmul(a, b).tobytes()


def test_env_flag_selects_numpy():
    env = dict(os.environ, DMQCA_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import dmqca.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
