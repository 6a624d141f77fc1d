import numpy as np
import pytest

from tiger.separator import (F3A, MSA, FFIBlock, Separator, SeparatorConfig, f3a_forward, ffi_block,
                             msa_forward, sa_fuse, separate)
from tiger.tensor import ParameterStore, Tensor, count_macs, grad_check, no_grad

TINY = SeparatorConfig(n_channels=8, hidden=16, depth=2, n_blocks=2, n_heads=2, head_dim=2)


def store64(seed=0):
    return ParameterStore(seed, dtype=np.float64)


def zero(store, suffix):
    for name in store:
        if name.endswith(suffix):
            store[name].data[:] = 0


def test_sa_fuse_cases():
    y = np.array([1.0, -2.0, 3.0])
    z = np.array([0.5, 0.5, -1.0])
    out = sa_fuse(Tensor(np.zeros(3)), Tensor(y), Tensor(z))
    np.testing.assert_allclose(out.data, 0.5 * y + z)
    assert sa_fuse(Tensor(np.zeros(1)), Tensor(np.full(1, 2.0)), Tensor(np.ones(1))).item() == 2.0
    sat = sa_fuse(Tensor(np.full(3, 40.0)), Tensor(y), Tensor(z))
    np.testing.assert_allclose(sat.data, y + z, atol=1e-12)
    with pytest.raises(ValueError):
        sa_fuse(Tensor(np.zeros(2)), Tensor(y), Tensor(z))


def test_msa_shapes_and_internal_resolutions():
    msa = MSA(store64(), "m", 8, 16, 2)
    x = np.random.default_rng(0).standard_normal((8, 16, 10))
    assert msa_forward(x, "frequency", msa).shape == (8, 16, 10)
    assert msa.last_lengths == [16, 8, 4]


def test_msa_pads_to_multiple_of_two_to_the_depth():
    msa = MSA(store64(), "m", 4, 8, 4)
    out = msa_forward(np.random.default_rng(1).standard_normal((4, 67, 3)), "frequency", msa)
    assert out.shape == (4, 67, 3)
    assert msa.last_lengths == [80, 40, 20, 10, 5]


def test_msa_zero_in_zero_out():
    store = store64()
    msa = MSA(store, "m", 8, 16, 2)
    zero(store, ".bias")
    for axis in ("frequency", "time"):
        assert not np.any(msa_forward(np.zeros((8, 12, 6)), axis, msa))


def test_msa_time_axis_is_frequency_axis_transposed():
    msa = MSA(store64(), "m", 4, 8, 2)
    x = np.random.default_rng(2).standard_normal((4, 6, 9))
    a = msa_forward(x, "time", msa)
    b = msa_forward(x.transpose(0, 2, 1), "frequency", msa).transpose(0, 2, 1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_msa_equivariant_along_other_axis():
    msa = MSA(store64(), "m", 4, 8, 2)
    x = np.random.default_rng(3).standard_normal((4, 8, 12))
    shifted = np.roll(x, 3, axis=2)
    a = msa_forward(x, "frequency", msa)
    b = msa_forward(shifted, "frequency", msa)
    np.testing.assert_allclose(np.roll(a, 3, axis=2), b, atol=1e-12)


def test_f3a_single_position_is_value_projection():
    store = store64()
    f3a = F3A(store, "f", 8, 2, 2)
    x = np.random.default_rng(4).standard_normal((8, 1, 5))
    out = f3a_forward(x, "frequency", f3a)
    np.testing.assert_allclose(f3a.last_attention, 1.0)
    v = f3a.v.weight.data.reshape(8, 8) @ x[:, 0] + f3a.v.bias.data[:, None]
    expect = f3a.out.weight.data.reshape(8, 8) @ v + f3a.out.bias.data[:, None]
    np.testing.assert_allclose(out[:, 0], expect, atol=1e-12)


def test_f3a_shapes_and_attention_rows():
    f3a = F3A(store64(), "f", 16, 4, 4)
    x = np.random.default_rng(5).standard_normal((16, 8, 10))
    with count_macs() as macs:
        out = f3a_forward(x, "frequency", f3a)
    assert out.shape == (16, 8, 10)
    assert f3a.last_attention.shape == (1, 4, 8, 8)
    np.testing.assert_allclose(f3a.last_attention.sum(-1), 1.0, atol=1e-6)
    # Q, K: 16->16 ch; V, out: 16->16 ch; scores 4*8*8*40; mixing 4*8*8*40
    grid = 8 * 10
    assert macs.total == 4 * 16 * 16 * grid + 2 * 4 * 8 * 8 * 40


def test_f3a_matches_naive_attention():
    rng = np.random.default_rng(6)
    n, a, e, k, t = 6, 2, 3, 5, 4
    f3a = F3A(store64(), "f", n, a, e)
    x = rng.standard_normal((n, k, t))
    out = f3a_forward(x, "frequency", f3a)

    def proj(conv):
        return np.einsum("oc,ckt->okt", conv.weight.data.reshape(conv.weight.shape[0], -1), x) \
            + conv.bias.data[:, None, None]

    q, kk, v = proj(f3a.q), proj(f3a.k), proj(f3a.v)
    heads = []
    for i in range(a):
        qi = q[i * e:(i + 1) * e].transpose(1, 0, 2).reshape(k, e * t)
        ki = kk[i * e:(i + 1) * e].transpose(1, 0, 2).reshape(k, e * t)
        vi = v[i * n // a:(i + 1) * n // a].transpose(1, 0, 2).reshape(k, -1)
        s = qi @ ki.T / np.sqrt(e * t)
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        heads.append((p @ vi).reshape(k, n // a, t).transpose(1, 0, 2))
    o = np.concatenate(heads)
    expect = np.einsum("oc,ckt->okt", f3a.out.weight.data.reshape(n, n), o) + f3a.out.bias.data[:, None, None]
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_f3a_constant_values_give_constant_output():
    store = store64()
    f3a = F3A(store, "f", 8, 2, 2)
    x = np.random.default_rng(7).standard_normal((8, 6, 4))
    f3a.v.weight.data[:] = 0  # V = bias only: identical rows along the attended axis
    out = f3a_forward(x, "frequency", f3a)
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-12)


def test_f3a_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        F3A(store64(), "f", 10, 4, 2)
    with pytest.raises(ValueError):
        SeparatorConfig(n_channels=10, n_heads=4)


def test_ffi_block_residual_identity():
    store = store64()
    block = FFIBlock(store, TINY)
    for name in store:
        if ".out." in name:
            store[name].data[:] = 0
    x = np.random.default_rng(8).standard_normal((8, 8, 12))
    np.testing.assert_allclose(ffi_block(x, block), x, atol=1e-12)


@pytest.mark.parametrize("order", ["F-T", "T-T", "F-F"])
def test_path_orders_share_parameter_count(order):
    base = ParameterStore(0)
    Separator(base, TINY)
    store = ParameterStore(0)
    sep = Separator(store, SeparatorConfig(**{**TINY.__dict__, "path_order": order}))
    assert store.count() == base.count()
    assert len({p.axis for p in sep.block.paths}) == (2 if order == "F-T" else 1)
    out = separate(np.random.default_rng(9).standard_normal((8, 8, 12)), sep.cfg, sep)
    assert out.shape == (8, 8, 12)


def test_block_count_does_not_change_parameters():
    counts, names = [], []
    for b in (1, 4, 8):
        store = ParameterStore(0)
        Separator(store, SeparatorConfig(**{**TINY.__dict__, "n_blocks": b}))
        counts.append(store.count())
        names.append(store.names())
    assert counts[0] == counts[1] == counts[2]
    assert names[0] == names[1] == names[2]


def test_single_block_equals_one_ffi_call():
    store = store64()
    cfg = SeparatorConfig(**{**TINY.__dict__, "n_blocks": 1})
    sep = Separator(store, cfg)
    x = np.random.default_rng(10).standard_normal((8, 8, 12))
    np.testing.assert_array_equal(separate(x, cfg, sep), ffi_block(x, sep.block))


def test_doubling_blocks_doubles_macs():
    x = Tensor(np.random.default_rng(11).standard_normal((1, 8, 8, 12)))
    totals = []
    for b in (4, 8):
        sep = Separator(store64(), SeparatorConfig(**{**TINY.__dict__, "n_blocks": b}))
        with no_grad(), count_macs() as m:
            sep(x)
        totals.append(m.total)
    assert totals[1] == 2 * totals[0]


def test_separator_gradient_tiny_config():
    store = store64(3)
    sep = Separator(store, TINY)
    rng = np.random.default_rng(12)
    z = Tensor(rng.standard_normal((1, 8, 8, 12)), requires_grad=True)
    probe = rng.standard_normal((1, 8, 8, 12))

    def f():
        return (sep(z) * probe).sum()

    # a key bias shifts every score of a query equally, so softmax ignores it
    keys = [t for t in store.tensors() if t.name.endswith("key.bias")]
    rest = [t for t in store.tensors() if not t.name.endswith("key.bias")]
    assert grad_check(f, [z] + rest, eps=1e-4, samples=250) < 1e-4
    f().backward()
    assert max(np.abs(t.grad).max() for t in keys) < 1e-10
