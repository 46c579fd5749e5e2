import dataclasses
import hashlib
import os

import numpy as np
import pytest

from canet.netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm
from canet.synthdata import (
    DatasetFormatError,
    DatasetSpec,
    StyleSpec,
    build_split,
    coarsen_label,
    generate_pair,
    load_dataset,
    load_pair,
    make_dataset_family,
    read_manifest,
    save_dataset,
    save_pair,
)


def spec(**kw):
    kw.setdefault("name", "t")
    kw.setdefault("seed", 3)
    kw.setdefault("n_train", 8)
    kw.setdefault("n_val", 2)
    kw.setdefault("n_test", 2)
    return DatasetSpec(**kw)


def dilate_oracle(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            for yy in range(h):
                for xx in range(w):
                    if mask[yy, xx] and (yy - y) ** 2 + (xx - x) ** 2 <= r * r:
                        out[y, x] = 1
    return out


# -- generation ---------------------------------------------------------------


def test_no_change_limit():
    s = spec(change_rate=0.0)
    for i in range(5):
        p = generate_pair(s, i)
        assert not p.label.any()
        assert all(not o.changed for o in p.provenance)
        # only the per-frame style jitter and noise separate the frames
        assert np.abs(p.x1 - p.x2).mean() < 0.12


def test_changed_non_interest_objects_are_unlabelled():
    s = spec(interest_classes=("box",), change_rate=1.0, n_train=30)
    seen = False
    for i in range(30):
        p = generate_pair(s, i)
        h, w = p.label.shape
        for o in p.provenance:
            if o.cls != "box":
                seen = True
                assert not p.label[o.footprint(h, w)].any()
    assert seen


def test_determinism_and_split_independence():
    s = spec()
    a, b = generate_pair(s, 4), generate_pair(s, 4)
    assert a.x1.tobytes() == b.x1.tobytes() and a.x2.tobytes() == b.x2.tobytes()
    assert a.label.tobytes() == b.label.tobytes()
    assert generate_pair(s, 0, "val").x1.tobytes() != generate_pair(s, 0, "train").x1.tobytes()
    with pytest.raises(IndexError):
        generate_pair(s, 8)


def test_label_soundness_against_provenance():
    for gran in ("fine", "coarse"):
        s = spec(label_granularity=gran, n_train=20)
        for i in range(20):
            p = generate_pair(s, i)
            h, w = p.label.shape
            fine = np.zeros((h, w), bool)
            for o in p.provenance:
                if o.changed and o.cls in s.interest_classes:
                    fine |= o.footprint(h, w)
            expected = coarsen_label(fine, s.coarse_radius) if gran == "coarse" else fine
            assert np.array_equal(p.label, expected.astype(np.uint8))


def test_style_never_alters_label():
    base = spec()
    styled = dataclasses.replace(base, style=StyleSpec(brightness=0.2, gain=(1.2, 0.8, 1.0), noise=0.08))
    for i in range(6):
        assert np.array_equal(generate_pair(base, i).label, generate_pair(styled, i).label)


def test_pixels_in_unit_interval_and_quantized():
    p = generate_pair(spec(style=StyleSpec(brightness=0.3, gain=(1.3, 1.3, 1.3), noise=0.1)), 0)
    for x in (p.x1, p.x2):
        assert x.dtype == np.float32 and x.shape == (3, 64, 64)
        assert x.min() >= 0 and x.max() <= 1
        assert np.allclose(x * 255, np.round(x * 255), atol=1e-4)


def test_spec_validation():
    with pytest.raises(ValueError, match="label_granularity"):
        spec(label_granularity="medium")
    with pytest.raises(ValueError, match="interest_classes"):
        spec(interest_classes=())
    with pytest.raises(ValueError, match="multiples"):
        spec(image_size=(60, 64))
    with pytest.raises(ValueError, match="brightness"):
        StyleSpec(brightness=0.5)
    with pytest.raises(ValueError, match="gain"):
        StyleSpec(gain=(1.0, 1.5, 1.0))


def test_spec_key_value_round_trip():
    s = spec(style=StyleSpec(0.1, (0.9, 1.1, 1.2), 0.05, 0.12), interest_classes=("bar", "disc"), label_granularity="coarse")
    assert DatasetSpec.from_kv(s.to_kv()) == s
    with pytest.raises(KeyError):
        DatasetSpec.from_kv({**s.to_kv(), "colour": "red"})


# -- coarsening -----------------------------------------------------------------


def test_coarsen_identity_and_plus_shape():
    rng = np.random.default_rng(0)
    m = rng.integers(0, 2, (7, 7)).astype(np.uint8)
    assert np.array_equal(coarsen_label(m, 0), m)
    dot = np.zeros((5, 5), np.uint8)
    dot[2, 2] = 1
    plus = coarsen_label(dot, 1)
    assert plus.sum() == 5
    assert np.array_equal(plus, dilate_oracle(dot, 1))


@pytest.mark.parametrize("r", [1, 2, 3])
def test_coarsen_matches_oracle_and_is_superset(r):
    m = (np.random.default_rng(r).random((9, 9)) > 0.85).astype(np.uint8)
    c = coarsen_label(m, r)
    assert np.array_equal(c, dilate_oracle(m, r))
    assert (c >= m).all()


# -- family -----------------------------------------------------------------------


def test_family_axes():
    hist, style, label, both = make_dataset_family(2)
    assert (hist.interest_classes, hist.label_granularity) == (style.interest_classes, style.label_granularity)
    assert label.style == hist.style
    assert label.label_granularity == "coarse" and label.interest_classes != hist.interest_classes
    assert both.style == style.style and both.interest_classes == label.interest_classes
    assert len({hist.seed, style.seed, label.seed, both.seed}) == 4


def test_family_style_histograms_differ():
    hist, style, _, _ = make_dataset_family(0, n_train=100)
    bins = np.linspace(0, 1, 33)

    def histogram(s):
        d = build_split(s, "train")
        h, _ = np.histogram(np.concatenate([d.x1.ravel(), d.x2.ravel()]), bins=bins)
        return h / h.sum()

    assert np.abs(histogram(hist) - histogram(style)).mean() > 0.01


# -- on-disk format ------------------------------------------------------------------


def test_netpbm_round_trip_and_errors(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    g = rgb[..., 0]
    write_pgm(tmp_path / "g.pgm", g)
    assert np.array_equal(read_pgm(tmp_path / "g.pgm"), g)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0, 255]]
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(NetpbmError):
        read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(NetpbmError, match="expected 16 bytes"):
        read_pgm(tmp_path / "short.pgm")
    with pytest.raises(NetpbmError):
        read_ppm(tmp_path / "g.pgm")


def test_pair_round_trip(tmp_path):
    p = generate_pair(spec(), 1)
    save_pair(p, tmp_path, 1)
    q = load_pair(tmp_path, 1)
    assert q.label.tobytes() == p.label.tobytes()
    assert q.x1.tobytes() == p.x1.tobytes() and q.x2.tobytes() == p.x2.tobytes()
    assert set(np.unique(read_pgm(tmp_path / "label" / "00001.pgm"))) <= {0, 255}


def test_dimension_mismatch_names_index(tmp_path):
    save_pair(generate_pair(spec(), 0), tmp_path, 7)
    write_ppm(tmp_path / "B" / "00007.ppm", np.zeros((32, 64, 3), np.uint8))
    with pytest.raises(DatasetFormatError, match="sample 7"):
        load_pair(tmp_path, 7)


def test_dataset_round_trip_and_manifest(tmp_path):
    s = spec(image_size=(32, 32))
    save_dataset(s, tmp_path)
    assert read_manifest(tmp_path) == s
    for split in ("train", "val", "test"):
        n = s.split_size(split)
        for sub, ext in (("A", "ppm"), ("B", "ppm"), ("label", "pgm")):
            assert sorted(os.listdir(tmp_path / split / sub)) == [f"{i:05d}.{ext}" for i in range(n)]
        disk, mem = load_dataset(tmp_path, split), build_split(s, split)
        assert disk.name == "t"
        for a in ("x1", "x2", "label"):
            assert getattr(disk, a).tobytes() == getattr(mem, a).tobytes()


def test_regeneration_is_bitwise_stable(tmp_path):
    s = spec(image_size=(32, 32), n_train=3, n_val=1, n_test=1)

    def digest(root):
        h = hashlib.sha256()
        for dirpath, _, files in sorted(os.walk(root)):
            for f in sorted(files):
                h.update(f.encode())
                h.update(open(os.path.join(dirpath, f), "rb").read())
        return h.hexdigest()

    save_dataset(s, tmp_path / "a")
    save_dataset(s, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_loader_accepts_external_layout(tmp_path):
    rng = np.random.default_rng(9)
    root = tmp_path / "real"
    for i in (3, 10):
        for sub in ("A", "B", "label"):
            (root / "test" / sub).mkdir(parents=True, exist_ok=True)
        write_ppm(root / "test" / "A" / f"{i:05d}.ppm", rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        write_ppm(root / "test" / "B" / f"{i:05d}.ppm", rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        write_pgm(root / "test" / "label" / f"{i:05d}.pgm", (rng.random((16, 16)) > 0.5).astype(np.uint8) * 255)
    d = load_dataset(root, "test")
    assert d.name == "real" and len(d) == 2 and d.x1.shape == (2, 3, 16, 16)
    with pytest.raises(DatasetFormatError):
        load_dataset(root, "train")


def test_fraction_and_subset():
    d = build_split(spec(), "train")
    assert len(d.fraction(0.1)) == 1 and len(d.fraction(0.5)) == 4
    assert d.fraction(0.5).x1.tobytes() == d.x1[:4].tobytes()
