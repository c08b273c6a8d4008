"""Both kernel backends against each other and against plain-Python oracles."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainalign import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def fnv_oracle(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) % 2**64
    return h


def lcs_oracle(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


@pytest.mark.parametrize("data,expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv_published_vectors(data, expected):
    assert K.fnv1a64(data) == expected
    assert int(K.fnv1a64_np(np.frombuffer(data, np.uint8))) == expected


@given(st.binary(max_size=300))
@settings(max_examples=60, deadline=None)
def test_fnv_backends_agree(data):
    arr = np.frombuffer(data, dtype=np.uint8)
    want = fnv_oracle(data)
    assert int(K.fnv1a64_np(arr)) == want
    if K.HAVE_NUMBA:
        assert int(K.fnv1a64_nb(arr)) == want


@given(st.lists(st.integers(0, 5), max_size=25), st.lists(st.integers(0, 5), max_size=25))
@settings(max_examples=80, deadline=None)
def test_lcs_backends_agree(a, b):
    want = lcs_oracle(a, b)
    aa, bb = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    assert K.lcs_length_np(aa, bb) == want
    if K.HAVE_NUMBA:
        assert K.lcs_length_nb(aa, bb) == want


def test_paired_iou_backends_agree(rng):
    from conftest import random_boxes
    a, b = random_boxes(rng, 500), random_boxes(rng, 500)
    ref = K.paired_iou_np(a, b)
    assert np.all((ref >= 0) & (ref <= 1))
    if K.HAVE_NUMBA:
        np.testing.assert_array_equal(K.paired_iou_nb(a, b), ref)


@pytest.mark.parametrize("pool", [1, 2, 17, 40])
def test_pool_hits_backends_agree(rng, pool):
    n = 40
    sim = rng.standard_normal((n, n))
    sim[3, 3] = sim[3, 5]  # a tie, which must count as a miss
    pools = np.stack([rng.choice(np.delete(np.arange(n), i), pool - 1, replace=False) for i in range(n)])
    pools = pools.reshape(n, pool - 1).astype(np.int64)
    probes = np.arange(n, dtype=np.int64)
    want = sum(all(sim[i, i] > sim[i, j] for j in pools[i]) for i in range(n))
    assert K.pool_top1_hits_np(sim, probes, pools) == want
    if K.HAVE_NUMBA:
        assert K.pool_top1_hits_nb(sim, probes, pools) == want


def test_env_flag_selects_numpy():
    env = dict(os.environ, BRAINALIGN_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from brainalign import _kernels as k; print(k.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_default_backend_is_numba():
    if os.environ.get("BRAINALIGN_NUMBA", "1") != "0":
        assert K.backend() == "numba"


def test_numpy_backend_end_to_end():
    """Metric results do not depend on the backend."""
    code = (
        "import numpy as np\n"
        "from brainalign.eval import retrieval_forward, rouge_l, grounding_accuracy\n"
        "r = np.random.default_rng(0)\n"
        "b = r.standard_normal((60, 8)); i = b + 0.8 * r.standard_normal((60, 8))\n"
        "print(repr(retrieval_forward(b, i, 20, 5, np.random.default_rng(1))))\n"
        "print(repr(rouge_l('a b c d e', 'a c e f')))\n"
        "rep = grounding_accuracy([('dog', (0.1, 0.1, 0.5, 0.5))], [('dog', (0.2, 0.2, 0.6, 0.6))])\n"
        "print(repr(rep.categories['A'].mean_iou))\n"
    )
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, BRAINALIGN_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                   check=True).stdout)
    assert outs[0] == outs[1]
