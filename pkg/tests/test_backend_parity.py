"""The numba kernels must agree with the numpy reference to float64 noise."""

import numpy as np
import pytest

from specdec import kernels

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA,
                                reason="numba not importable")


@pytest.fixture
def both_backends():
    yield
    kernels.set_backend("numba" if kernels.HAS_NUMBA else "numpy")


def _run_both(fn_name, *args):
    prev = kernels.set_backend("numpy")
    try:
        a = getattr(kernels, fn_name)(*args)
    finally:
        kernels.set_backend(prev)
    kernels.set_backend("numba")
    b = getattr(kernels, fn_name)(*args)
    return a, b


def test_attend_heads_parity(both_backends):
    rng = np.random.default_rng(0)
    for heads, m, n, dh in ((1, 3, 7, 4), (2, 5, 12, 8), (4, 1, 1, 4)):
        q = rng.normal(size=(heads, m, dh))
        k = rng.normal(size=(heads, n, dh))
        v = rng.normal(size=(heads, n, dh))
        mask = rng.random((m, n)) < 0.7
        mask[:, 0] = True  # keep every row alive
        (oa, la), (ob, lb) = _run_both("attend_heads", q, k, v, mask, 0.5)
        assert np.max(np.abs(oa - ob)) < 1e-12
        assert np.max(np.abs(la - lb)) < 1e-12


def test_attend_heads_parity_unmasked(both_backends):
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(2, 4, 8)) for _ in range(3))
    (oa, la), (ob, lb) = _run_both("attend_heads", q, k, v, None, 0.3)
    assert np.max(np.abs(oa - ob)) < 1e-12
    assert np.max(np.abs(la - lb)) < 1e-12


def test_attend_heads_masked_rows_agree(both_backends):
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(1, 2, 4)) for _ in range(3))
    mask = np.zeros((2, 2), dtype=bool)
    mask[0, :] = True  # row 1 fully masked
    (oa, la), (ob, lb) = _run_both("attend_heads", q, k, v, mask, 1.0)
    assert not np.isfinite(la[0, 1]) and not np.isfinite(lb[0, 1])
    assert np.array_equal(oa[0, 1], np.zeros(4))
    assert np.array_equal(ob[0, 1], np.zeros(4))


def test_rope_rotate_parity(both_backends):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 16))
    pos = np.array([0, 1, 5, 9, 2, 7], dtype=np.int64)
    a, b = _run_both("rope_rotate", x, pos, 8, 10000.0)
    assert np.max(np.abs(a - b)) < 1e-12


def test_rmsnorm_rows_parity(both_backends):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 12))
    w = rng.normal(size=12)
    a, b = _run_both("rmsnorm_rows", x, w, 1e-6)
    assert np.max(np.abs(a - b)) < 1e-12


def test_set_backend_validates():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_decode_identical_across_backends(both_backends):
    from specdec.drafttree import DispatchTable, parse_tree
    from specdec.engine import Engine, EngineConfig
    from specdec.model import ModelConfig, init_base, init_draft
    from specdec.sampling import SamplerConfig

    cfg = ModelConfig(vocab_size=32, dim=16, n_heads=2, head_dim=8,
                      n_layers=2, ffn_hidden=24)
    dcfg = ModelConfig(vocab_size=32, dim=16, n_heads=2, head_dim=8,
                       n_layers=1, ffn_hidden=24)
    base = init_base(cfg, 0)
    draft = init_draft(dcfg, 1, base)

    def run():
        eng = Engine(base, draft, EngineConfig(
            sampler=SamplerConfig(temperature=1.0, top_p=0.9, seed=5),
            dispatch_table=DispatchTable(((None, parse_tree("chain:3")),)),
            cache_blocks=64, max_context=256))
        out, _ = eng.run(eng.new_session([3, 1, 4, 1, 5]), 16)
        return out

    kernels.set_backend("numpy")
    a = run()
    kernels.set_backend("numba")
    b = run()
    assert a == b
