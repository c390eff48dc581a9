import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transinv import model as M
from transinv import tensor as T
from transinv.model import Conv, Flatten, Linear, MaxPool, ModelSpec, ReLU


@pytest.fixture
def mini():
    return M.build(M.preset("vgg-mini", 10), seed=3)


def test_vgg_mini_geometry(mini):
    spec = mini.spec
    assert spec.input_shape == (1, 64, 64)
    assert spec.penultimate_width == 256
    assert isinstance(spec.layers[spec.penultimate_index], ReLU)
    assert spec.shapes()[-1] == (10,)
    assert sum(isinstance(l, Conv) for l in spec.layers) == 4


def test_vgg16_topology():
    spec = M.preset("vgg16", num_classes=7)
    assert sum(isinstance(l, Conv) for l in spec.layers) == 13
    assert sum(isinstance(l, Linear) for l in spec.layers) == 3
    assert spec.input_shape == (3, 224, 224)
    assert spec.layers[-1].out_features == 7
    assert spec.shapes()[spec.layers.index(Flatten())] == (512 * 7 * 7,)
    assert spec.penultimate_width == 4096


def test_unknown_preset_lists_available():
    with pytest.raises(M.SpecError, match="vgg-mini.*vgg16"):
        M.preset("resnet")


def test_custom_preset():
    spec = M.preset("custom", 3, layers="conv5-4 relu pool2 flatten fc8 relu fc", input_shape=(1, 12, 12))
    assert spec.layers[0] == Conv(4, 5, 1, 2)
    assert spec.penultimate_width == 8


@pytest.mark.parametrize("layers", [
    (Linear(4), ReLU(), Linear(2)),  # linear on a feature map
    (Conv(4), Flatten(), Flatten(), Linear(3), ReLU(), Linear(2)),
    (Conv(4), Flatten(), Linear(3), ReLU(), Linear(5)),  # head width != K
    (Conv(4), Flatten(), Linear(2)),  # no hidden linear
    (MaxPool(9), Flatten(), Linear(3), Linear(2)),  # window larger than input
    (Conv(4, kernel=11, padding=0), Flatten(), Linear(3), Linear(2)),
])
def test_inconsistent_specs_rejected(layers):
    with pytest.raises(M.SpecError):
        ModelSpec(layers, 1, 8, 8, 2)


_layer = st.one_of(
    st.builds(Conv, st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 2)),
    st.builds(MaxPool, st.integers(1, 4), st.integers(1, 3)),
    st.just(ReLU()), st.just(Flatten()), st.builds(Linear, st.integers(1, 6)),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(_layer, min_size=1, max_size=8), st.integers(4, 16))
def test_random_specs_validate_before_allocation(layers, size):
    """Either the chain validates and every op runs with matching shapes, or SpecError is raised."""
    try:
        spec = ModelSpec(tuple(layers), 1, size, size, 2)
    except M.SpecError:
        return
    model = M.build(spec, 0)
    out = M.forward(model, np.zeros((1, 1, size, size), np.float32))
    assert out.shape == (1, 2)


def test_kaiming_biases_zero_and_variance():
    spec = ModelSpec((Conv(350, 3, 1, 1), ReLU(), Flatten(), Linear(4), ReLU(), Linear(2)), 32, 3, 3, 2)
    model = M.build(spec, seed=11)
    w = model.params["weight0"].data
    assert w.size == 350 * 288 and w.size > 1e5
    assert np.var(w) == pytest.approx(2 / 288, rel=0.05)
    assert abs(np.mean(w)) < 3 * np.sqrt(2 / 288 / w.size) * 2
    assert all(not p.data.any() for k, p in model.params.items() if k.startswith("bias"))


def test_kaiming_determinism():
    spec = M.preset("vgg-mini", 10)
    a, b, c = M.build(spec, 5), M.build(spec, 5), M.build(spec, 6)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_batch_independence(mini, rng):
    x = rng.random((2, 1, 64, 64)).astype(np.float32)
    one = M.forward(mini, x[:1]).data
    two = M.forward(mini, x).data
    np.testing.assert_allclose(one[0], two[0], rtol=1e-5, atol=1e-6)


def test_zero_weights_give_bias_logits(rng):
    model = M.Model(M.preset("vgg-mini", 10))
    model.params["bias14"].data[:] = np.arange(10)
    out = M.forward(model, rng.random((3, 1, 64, 64))).data
    np.testing.assert_array_equal(out, np.tile(np.arange(10, dtype=np.float32), (3, 1)))


def test_penultimate_capture(mini, rng):
    x = rng.random((2, 1, 64, 64)).astype(np.float32)
    logits, pen = M.forward(mini, x, capture_penultimate=True)
    assert pen.shape == (2, 256)
    assert (pen >= 0).all()
    np.testing.assert_array_equal(logits.data, M.forward(mini, x).data)


def test_geometry_mismatch_message(mini):
    with pytest.raises(T.ShapeError, match=r"\(1, 32, 32\).*\(1, 64, 64\)"):
        M.forward(mini, np.zeros((1, 1, 32, 32), np.float32))


def test_checkpoint_roundtrip(mini, tmp_path, rng):
    path = M.save_checkpoint(mini, tmp_path / "m.ckpt")
    loaded = M.load_checkpoint(path)
    assert loaded.spec == mini.spec
    for k in mini.params:
        assert loaded.params[k].data.tobytes() == mini.params[k].data.tobytes()
    x = rng.random((3, 1, 64, 64)).astype(np.float32)
    assert M.forward(loaded, x).data.tobytes() == M.forward(mini, x).data.tobytes()


def test_checkpoint_bad_magic(mini, tmp_path):
    path = M.save_checkpoint(mini, tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[0:2] = b"XX"
    path.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointError, match="magic"):
        M.load_checkpoint(path)


def test_checkpoint_version_and_truncation(mini, tmp_path):
    path = M.save_checkpoint(mini, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(M.CheckpointError, match="version 99"):
        M.load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(M.CheckpointError, match="truncated"):
        M.load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_double_precision(tmp_path):
    with T.precision("double"):
        model = M.build(M.preset("vgg-mini", 2), 0)
    loaded = M.load_checkpoint(M.save_checkpoint(model, tmp_path / "d.ckpt"))
    assert loaded.dtype == np.float64


@pytest.mark.slow
def test_vgg_mini_grad_check_two_samples():
    """Analytic vs central-difference gradients for every parameter tensor, batch of two.

    A freshly initialised net sits with many units within eps of a ReLU or
    pooling kink, so the net is first trained briefly and coordinates whose
    finite-difference probe crosses a kink are skipped (and counted).
    """
    from transinv import data as D
    from transinv import protocol as P
    cfg = D.DESK
    bank = D.synth_glyph_bank(10, 1, 16, seed=5)
    with T.precision("double"):
        model = M.build(M.preset("vgg-mini", 10), seed=1)
        stream = D.BatchStream(bank, D.FullyTranslated(), cfg, 8, seed=0, samples_per_epoch=64)
        model, _ = P.train_to_criterion(model, stream, stop=P.StopCriterion(3, 1.1))
        x = D.compose_batch(bank.items[[3, 7]], [(20, 30), (40, 25)], cfg)
        labels = np.array([3, 7])
        for name in model.params:
            def loss(p, name=name):
                params = dict(model.params)
                params[name] = p
                return T.softmax_cross_entropy(M.forward(M.Model(model.spec, params), x), labels)
            res = T.grad_check_detail(loss, model.params[name], eps=1e-4, samples=40, seed=2, skip_kinks=True)
            assert res.checked > 0, name
            assert res.max_rel_error < 1e-3, (name, res)
