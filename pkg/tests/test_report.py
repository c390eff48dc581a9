import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transinv import report as R


def test_constant_one_raster_is_all_white(tmp_path):
    path = R.write_pgm(np.ones((4, 6)), tmp_path / "w.pgm")
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n6 4\n255\n")
    assert raw[len(b"P5\n6 4\n255\n"):] == b"\xff" * 24


def test_zero_is_black_and_header_fields(tmp_path):
    path = R.write_pgm(np.zeros((2, 3)), tmp_path / "b.pgm")
    header = path.read_bytes().split(b"\n")[:3]
    assert header == [b"P5", b"3 2", b"255"]
    assert (R.read_pgm(path) == 0).all()


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 20), w=st.integers(1, 20), seed=st.integers(0, 1000))
def test_pgm_roundtrip_reproduces_quantized_raster(tmp_path_factory, h, w, seed):
    raster = np.random.default_rng(seed).random((h, w))
    path = R.write_pgm(raster, tmp_path_factory.mktemp("pgm") / "r.pgm")
    back = R.read_pgm(path)
    np.testing.assert_array_equal(back, R.quantize(raster))
    assert np.abs(back / 255.0 - raster).max() <= 0.5 / 255 + 1e-12


def test_reader_skips_comments_and_rejects_other_formats(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\x80")
    assert R.read_pgm(p).tolist() == [[0, 128]]
    p.write_bytes(b"P2\n2 1\n255\n0 128\n")
    with pytest.raises(ValueError, match="P5"):
        R.read_pgm(p)


def test_csv_is_dot_decimal_even_under_comma_locale(tmp_path, monkeypatch):
    import locale
    for name in ("de_DE.UTF-8", "de_DE.utf8", "fr_FR.UTF-8"):
        try:
            locale.setlocale(locale.LC_NUMERIC, name)
            break
        except locale.Error:
            continue
    try:
        path = R.write_csv(tmp_path / "t.csv", ["a", "b"], [[R._fmt(0.001), R._fmt(12.5, 2)]])
    finally:
        locale.setlocale(locale.LC_NUMERIC, "C")
    assert path.read_text() == "a,b\n0.001000,12.50\n"


MANIFEST = """\
name: t
finetune:
  bank: {kind: glyph, classes: 3}
  policy: {kind: fixed}
evaluation:
  grid: 1
"""


def test_schema_error_names_field_and_line():
    with pytest.raises(R.ManifestError, match=r"<manifest>:6: field 'evaluation.grid'"):
        R.parse_manifest(MANIFEST)


def test_unknown_key_and_bad_policy_reported():
    with pytest.raises(R.ManifestError, match=r":3: field 'finetune.colour'.*colour"):
        R.parse_manifest("name: t\nfinetune:\n  colour: red\n  bank: {kind: glyph}\n")
    text = "finetune:\n  bank: {kind: glyph}\n  policy: {kind: fully-translated}\n"
    with pytest.raises(R.ManifestError, match=r":3: field 'finetune.policy.kind'"):
        R.parse_manifest(text)


def test_idx_bank_requires_paths_and_yaml_errors_have_lines():
    with pytest.raises(R.ManifestError, match="'finetune.bank'.*images"):
        R.parse_manifest("finetune:\n  bank: {kind: idx}\n")
    with pytest.raises(R.ManifestError, match=r":3: not valid YAML"):
        R.parse_manifest("finetune:\n  bank: [unclosed\n")


def test_bundled_manifests_validate():
    from importlib import resources
    for entry in resources.files("transinv").joinpath("manifests").iterdir():
        if entry.name.endswith(".yaml"):
            R.parse_manifest(entry.read_text(), entry.name)
