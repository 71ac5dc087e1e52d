"""Block topology, scale geometry, window maps, receptive fields."""

import numpy as np
import pytest

from hfmca import autodiff as ad
from hfmca import network as nw


def _plain_block(kernel, in_ch, out_ch, pre_pad=0, norm=False, act=None, **kw):
    return nw.BlockSpec(
        layers=[nw.ConvLayerSpec(kernel, in_ch, out_ch, norm, act)], pre_pad=pre_pad, **kw
    )


def test_param_count_single_block():
    spec = nw.NetworkSpec(input_channels=3, blocks=[_plain_block(1, 3, 4)])
    net = nw.build_network(spec, np.random.default_rng(0))
    assert sum(p.size for p in net.params()) == 3 * 4 + 4


def test_param_count_with_norm_affine():
    spec = nw.NetworkSpec(
        input_channels=3, blocks=[_plain_block(1, 3, 4, norm=True, act="sigmoid")]
    )
    net = nw.build_network(spec, np.random.default_rng(0))
    assert sum(p.size for p in net.params()) == (3 * 4 + 4) + (4 + 4)


def test_entry_block_shape_keeps_spatial_dims():
    # 3-channel image in, feature channels out, same spatial dims (all 1x1)
    spec = nw.desk_network_spec()
    net = nw.build_network(spec, np.random.default_rng(0))
    feats, _ = net.forward_all(np.random.default_rng(1).random((2, 3, 16, 16)), train=False)
    assert feats[0].shape == (2, 16, 16)[:1] + (spec.feature_width, 16, 16)


def test_build_determinism():
    spec = nw.desk_network_spec()
    a = nw.build_network(spec, np.random.default_rng(123))
    b = nw.build_network(spec, np.random.default_rng(123))
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa.data, pb.data)


def test_invalid_channel_chain_rejected():
    bad = nw.NetworkSpec(
        input_channels=3,
        blocks=[_plain_block(1, 5, 4)],  # expects 5 input channels, gets 3
    )
    with pytest.raises(nw.NetworkError):
        bad.validate()


def test_identity_configured_block_passthrough():
    # two blocks of 1x1 convs; second initialized to the identity map
    spec = nw.NetworkSpec(
        input_channels=2,
        blocks=[_plain_block(1, 2, 2), _plain_block(1, 2, 2)],
    )
    net = nw.build_network(spec, np.random.default_rng(3))
    ident = net.blocks[1].layers[0]
    ident.kernel.data = np.eye(2).reshape(2, 2, 1, 1)
    ident.bias.data = np.zeros(2)
    x = np.random.default_rng(4).random((3, 2, 5, 5))
    feats, _ = net.forward_all(x, train=False)
    assert np.allclose(feats[1].data, feats[0].data, atol=1e-14)


def test_forward_dims_with_between_block_pool():
    # 3 blocks on 16x16, pool-2 between block 2 and 3: dims 16,16 / 16,16 / 8,8
    blocks = [
        _plain_block(1, 3, 4),
        nw.BlockSpec(
            layers=[
                nw.ConvLayerSpec(1, 4, 6, False, None),
                nw.ConvLayerSpec(3, 6, 6, False, None),
                nw.ConvLayerSpec(1, 6, 4, False, None),
            ],
            pre_pad=1,
        ),
        nw.BlockSpec(
            layers=[
                nw.ConvLayerSpec(1, 4, 6, False, None),
                nw.ConvLayerSpec(3, 6, 6, False, None),
                nw.ConvLayerSpec(1, 6, 4, False, None),
            ],
            pre_pool=2,
            pre_pad=1,
        ),
    ]
    spec = nw.NetworkSpec(input_channels=3, blocks=blocks)
    geom = nw.geometry(spec, (16, 16))
    assert geom.dims == {1: (16, 16), 2: (16, 16), 3: (8, 8)}
    net = nw.build_network(spec, np.random.default_rng(0))
    feats, lowers = net.forward_all(np.zeros((2, 3, 16, 16)), train=False)
    assert [f.shape[2:] for f in feats] == [(16, 16), (16, 16), (8, 8)]
    assert lowers[1].shape[2:] == (18, 18)
    assert lowers[2].shape[2:] == (10, 10)


def test_head_grid_reshape():
    # 9 views of K=8 features -> 8 channels on a 3x3 grid per source image
    head = nw.BlockSpec(
        layers=[
            nw.ConvLayerSpec(1, 8, 12, False, "relu"),
            nw.ConvLayerSpec(3, 12, 12, False, "relu"),
            nw.ConvLayerSpec(1, 12, 8, False, "sigmoid"),
        ]
    )
    spec = nw.NetworkSpec(input_channels=3, blocks=[_plain_block(1, 3, 8)], head=head)
    net = nw.build_network(spec, np.random.default_rng(0))
    views = [ad.constant(np.random.default_rng(l).random((5, 8, 1, 1))) for l in range(9)]
    out = net.forward_head(views, train=False)
    assert out.shape == (5, 8, 1, 1)
    assert nw.head_grid(9) == (3, 3)
    assert nw.head_grid(4) == (2, 2)
    assert nw.head_grid(1) == (1, 1)


def test_head_grid_mismatch_raises():
    head = nw.BlockSpec(layers=[nw.ConvLayerSpec(1, 8, 8, False, None)])
    spec = nw.NetworkSpec(input_channels=3, blocks=[_plain_block(1, 3, 8)], head=head)
    net = nw.build_network(spec, np.random.default_rng(0))
    views = [ad.constant(np.zeros((2, 8, 1, 1))) for _ in range(4)]
    with pytest.raises(nw.NetworkError):
        net.forward_head(views, train=False)  # 1x1 coverage cannot collapse 2x2


def test_geometry_receptive_fields():
    # 1x1 first layer: pixels; then 3x3: 3; pool-2 + 3x3: 8
    blocks = [
        _plain_block(1, 3, 4),
        _plain_block(3, 4, 4, pre_pad=1),
        nw.BlockSpec(layers=[nw.ConvLayerSpec(3, 4, 4, False, None)], pre_pool=2, pre_pad=1),
    ]
    geom = nw.geometry(nw.NetworkSpec(input_channels=3, blocks=blocks), (16, 16))
    assert geom.receptive[1] == 1
    assert geom.receptive[2] == 3
    assert geom.receptive[3] == 8


def test_geometry_rejects_interior_pool():
    bad = nw.NetworkSpec(
        input_channels=3,
        blocks=[_plain_block(1, 3, 4), _plain_block(1, 4, 4, post_pool=2)],
    )
    with pytest.raises(nw.NetworkError):
        nw.geometry(bad, (8, 8))


def test_receptive_field_matches_brute_force():
    spec = nw.desk_network_spec(with_head=False)
    net = nw.build_network(spec, np.random.default_rng(5))
    geom = nw.geometry(spec, (16, 16))
    base = np.random.default_rng(6).random((1, 3, 16, 16))
    rng_noise = np.random.default_rng(7)
    with ad.no_grad():
        feats0, _ = net.forward_all(base, train=False, noise_rng=np.random.default_rng(7))
    # perturb one interior pixel; changed outputs must fall inside the
    # receptive-field box predicted by the geometry
    pi, pj = 7, 9
    bumped = base.copy()
    bumped[0, :, pi, pj] += 0.5
    with ad.no_grad():
        feats1, _ = net.forward_all(bumped, train=False, noise_rng=np.random.default_rng(7))
    for s in (1, 2, 3):
        diff = np.abs(feats1[s - 1].data - feats0[s - 1].data).sum(axis=(0, 1)) > 1e-12
        rf, jump = geom.receptive[s], geom.pool_acc[s]
        changed = np.argwhere(diff)
        assert changed.size, f"scale {s} saw no change"
        for (i, j) in changed:
            # the (i, j) output reads input rows [i*jump - pad_total, ...]; the
            # pixel must lie within rf of the window start
            assert pi >= i * jump - (rf - 1) and pi <= i * jump + rf - 1
            assert pj >= j * jump - (rf - 1) and pj <= j * jump + rf - 1


def test_window_map_examples():
    blocks = [
        _plain_block(1, 3, 4),
        _plain_block(3, 4, 4, pre_pad=1),
    ]
    geom = nw.geometry(nw.NetworkSpec(input_channels=3, blocks=blocks), (5, 5))
    # lower is the padded 7x7, upper 5x5, window 3x3
    assert geom.window[1] == (3, 3)
    (r0, r1), (c0, c1) = nw.window_map(geom, 1, 0, 0, "down")
    assert (r0, r1) == (0, 2) and (c0, c1) == (0, 2)
    (r0, r1), (c0, c1) = nw.window_map(geom, 1, 0, 0, "up")
    assert (r0, r1) == (0, 0) and (c0, c1) == (0, 0)


def test_window_map_center_covering():
    # 3x3 kernel, lower 5x5, upper 3x3: lower element (2,2) is covered by all 9
    blocks = [_plain_block(1, 3, 4), _plain_block(3, 4, 4, pre_pad=0)]
    geom = nw.geometry(nw.NetworkSpec(input_channels=3, blocks=blocks), (5, 5))
    assert geom.lower_dims[1] == (5, 5) and geom.dims[2] == (3, 3)
    rows, cols = nw.window_map(geom, 1, 2, 2, "up")
    assert rows == (0, 2) and cols == (0, 2)
    rows, cols = nw.window_map(geom, 1, 0, 0, "up")
    assert rows == (0, 0) and cols == (0, 0)


def test_window_map_one_by_one_kernel():
    blocks = [_plain_block(1, 3, 4), _plain_block(1, 4, 4)]
    geom = nw.geometry(nw.NetworkSpec(input_channels=3, blocks=blocks), (4, 4))
    assert nw.window_map(geom, 1, 2, 3, "down") == ((2, 2), (3, 3))
    assert nw.window_map(geom, 1, 2, 3, "up") == ((2, 2), (3, 3))
    with pytest.raises(nw.NetworkError):
        nw.window_map(geom, 1, 4, 0, "down")


@pytest.mark.parametrize("dims,mid", [((6, 6), 3), ((9, 12), 2), ((12, 9), 3)])
def test_window_membership_symmetry_exhaustive(dims, mid):
    blocks = [_plain_block(1, 3, 4), _plain_block(mid, 4, 4, pre_pad=1)]
    geom = nw.geometry(nw.NetworkSpec(input_channels=3, blocks=blocks), dims)
    hl, wl = geom.lower_dims[1]
    hu, wu = geom.dims[2]
    for i in range(hu):
        for j in range(wu):
            (r0, r1), (c0, c1) = nw.window_map(geom, 1, i, j, "down")
            for a in range(r0, r1 + 1):
                for b in range(c0, c1 + 1):
                    (u0, u1), (v0, v1) = nw.window_map(geom, 1, a, b, "up")
                    assert u0 <= i <= u1 and v0 <= j <= v1
    for a in range(hl):
        for b in range(wl):
            (u0, u1), (v0, v1) = nw.window_map(geom, 1, a, b, "up")
            for i in range(u0, u1 + 1):
                for j in range(v0, v1 + 1):
                    (r0, r1), (c0, c1) = nw.window_map(geom, 1, i, j, "down")
                    assert r0 <= a <= r1 and c0 <= b <= c1


def test_forward_eval_is_pure():
    spec = nw.desk_network_spec()
    net = nw.build_network(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).random((2, 3, 16, 16))
    with ad.no_grad():
        a, _ = net.forward_all(x, train=False, noise_rng=np.random.default_rng(9))
        b, _ = net.forward_all(x, train=False, noise_rng=np.random.default_rng(9))
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.data, tb.data)


def test_spec_json_round_trip():
    spec = nw.desk_network_spec(views=9)
    again = nw.NetworkSpec.from_json(spec.to_json())
    assert again.to_json() == spec.to_json()
    with pytest.raises(nw.NetworkError):
        nw.NetworkSpec.from_json({"input_channels": 3, "blocks": [], "bogus": 1})
