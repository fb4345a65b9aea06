import json
import os

import numpy as np
import pytest

import gdafas.data as D
from gdafas.rng import derive_seed


def test_render_is_deterministic():
    spec = D.DomainSpec(name="a", seed=7)
    img1, dep1 = D.render_sample(1, spec, 123)
    img2, dep2 = D.render_sample(1, spec, 123)
    assert np.array_equal(img1, img2)
    assert np.array_equal(dep1, dep2)
    img3, _ = D.render_sample(1, spec, 124)
    assert not np.array_equal(img1, img3)


def test_render_contract():
    spec = D.DomainSpec(name="a")
    live_img, live_dep = D.render_sample(1, spec, 5)
    spoof_img, spoof_dep = D.render_sample(0, spec, 5)
    for img in (live_img, spoof_img):
        assert img.shape == (3, 32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert live_dep.shape == (1, 8, 8)
    assert live_dep.max() > 0.5  # dome peak near the face center
    assert np.array_equal(spoof_dep, np.zeros((1, 8, 8)))


def test_spoof_has_high_frequency_energy():
    # the grating must dominate the upper frequency band for every seed,
    # in both domain styles, or the class signal is not learnable
    freqs = np.fft.fftfreq(32, d=1.0 / 32)
    fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
    high_band = np.sqrt(fx * fx + fy * fy) >= 8.0
    for spec in D.default_domain_specs(count_per_class=1)[:2]:
        for trial in range(50):
            live, _ = D.render_sample(1, spec, derive_seed(11, trial))
            spoof, _ = D.render_sample(0, spec, derive_seed(11, trial))

            def band_energy(img):
                f = np.fft.fft2(img, axes=(1, 2))
                return float((np.abs(f) ** 2)[:, high_band].sum())

            assert band_energy(spoof) > 1.5 * band_energy(live)


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(3, 32, 32))
    path = str(tmp_path / "x.ppm")
    D.ppm_write(path, img)
    back = D.ppm_read(path)
    assert back.shape == (3, 32, 32)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    dep = rng.uniform(size=(1, 8, 8))
    path = str(tmp_path / "x.pgm")
    D.pgm_write(path, dep)
    back = D.pgm_read(path)
    assert back.shape == (1, 8, 8)
    assert np.max(np.abs(back - dep)) <= 0.5 / 255 + 1e-12


def test_netpbm_extremes_exact(tmp_path):
    path = str(tmp_path / "x.ppm")
    D.ppm_write(path, np.zeros((3, 4, 4)))
    assert np.array_equal(D.ppm_read(path), np.zeros((3, 4, 4)))
    D.ppm_write(path, np.ones((3, 4, 4)))
    assert np.array_equal(D.ppm_read(path), np.ones((3, 4, 4)))


def test_netpbm_rejects_ascii_variants(tmp_path):
    p3 = tmp_path / "a.ppm"
    p3.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError, match="P3"):
        D.ppm_read(str(p3))
    p2 = tmp_path / "a.pgm"
    p2.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError, match="P2"):
        D.pgm_read(str(p2))


def test_netpbm_rejects_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"XX\n1 1\n255\n...")
    with pytest.raises(ValueError, match="magic"):
        D.ppm_read(str(bad))

    short = tmp_path / "short.ppm"
    D.ppm_write(str(short), np.ones((3, 4, 4)))
    blob = short.read_bytes()
    short.write_bytes(blob[:-5])
    with pytest.raises(ValueError, match="truncated"):
        D.ppm_read(str(short))


def test_netpbm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 64, 128, 255]))
    img = D.pgm_read(str(path))
    assert img.shape == (1, 2, 2)
    assert np.allclose(img * 255, [[[0, 64], [128, 255]]])


def test_generate_manifest_contract(tmp_path):
    spec = D.DomainSpec(name="src", count_per_class=10, seed=3)
    manifest = D.generate_domain_dataset(spec, str(tmp_path))
    records = manifest["records"]
    assert manifest["schema_version"] == 1
    assert len(records) == 20
    labels = [rec["label"] for rec in records]
    assert labels.count(1) == 10 and labels.count(0) == 10
    splits = [rec["split"] for rec in records]
    assert splits.count("test") == 4  # every fifth record
    for rec in records:
        assert os.path.exists(tmp_path / rec["image"])
        assert os.path.exists(tmp_path / rec["depth"])
    assert D.load_manifest(str(tmp_path)) == manifest


def test_manifest_rejects_duplicates_and_bad_version(tmp_path):
    spec = D.DomainSpec(name="src", count_per_class=5, seed=3)
    D.generate_domain_dataset(spec, str(tmp_path))
    path = tmp_path / "manifest.json"
    manifest = json.loads(path.read_text())

    broken = json.loads(path.read_text())
    broken["records"][1]["image"] = broken["records"][0]["image"]
    path.write_text(json.dumps(broken))
    with pytest.raises(ValueError, match="duplicate"):
        D.load_manifest(str(tmp_path))

    manifest["schema_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="schema version"):
        D.load_manifest(str(tmp_path))


def test_unlabeled_target_manifest(tmp_path):
    spec = D.DomainSpec(name="tgt", count_per_class=10, seed=4)
    manifest = D.generate_domain_dataset(
        spec, str(tmp_path), unlabeled_train=True
    )
    for rec in manifest["records"]:
        if rec["split"] == "train":
            assert "label" not in rec and "depth" not in rec
        else:
            assert "label" in rec and "depth" in rec

    data = D.load_dataset(str(tmp_path))
    train = data.subset("train")
    assert np.all(train.labels == -1)
    assert np.array_equal(train.depths, np.zeros_like(train.depths))
    test = data.subset("test")
    assert np.all(test.labels >= 0)


def test_regeneration_is_byte_identical(tmp_path):
    spec = D.DomainSpec(name="src", count_per_class=6, seed=9)
    D.generate_domain_dataset(spec, str(tmp_path / "a"))
    D.generate_domain_dataset(spec, str(tmp_path / "b"))
    manifest_a = (tmp_path / "a" / "manifest.json").read_bytes()
    manifest_b = (tmp_path / "b" / "manifest.json").read_bytes()
    assert manifest_a == manifest_b
    for rec in json.loads(manifest_a)["records"]:
        for key in ("image", "depth"):
            file_a = (tmp_path / "a" / rec[key]).read_bytes()
            file_b = (tmp_path / "b" / rec[key]).read_bytes()
            assert file_a == file_b


def test_load_dataset_and_merge(tmp_path):
    spec_a = D.DomainSpec(name="a", count_per_class=5, seed=1)
    spec_b = D.DomainSpec(name="b", count_per_class=5, seed=2)
    D.generate_domain_dataset(spec_a, str(tmp_path / "a"))
    D.generate_domain_dataset(spec_b, str(tmp_path / "b"))
    ds_a = D.load_dataset(str(tmp_path / "a"))
    ds_b = D.load_dataset(str(tmp_path / "b"))
    assert ds_a.images.shape == (10, 3, 32, 32)
    assert ds_a.depths.shape == (10, 1, 8, 8)
    merged = D.merge_datasets([ds_a, ds_b])
    assert merged.images.shape == (20, 3, 32, 32)
    assert merged.domains.count("a") == 10
    assert merged.domains.count("b") == 10


def test_batch_iterator_covers_epoch_deterministically(tmp_path):
    spec = D.DomainSpec(name="a", count_per_class=7, seed=1)
    D.generate_domain_dataset(spec, str(tmp_path))
    ds = D.load_dataset(str(tmp_path))

    batches = list(D.batch_iterator(ds, batch_size=4, seed=5))
    seen = np.concatenate([b["indices"] for b in batches])
    assert sorted(seen.tolist()) == list(range(14))
    assert batches[0]["images"].shape[0] == 4
    assert batches[-1]["images"].shape[0] == 2  # remainder kept

    again = list(D.batch_iterator(ds, batch_size=4, seed=5))
    for b1, b2 in zip(batches, again):
        assert np.array_equal(b1["indices"], b2["indices"])

    dropped = list(D.batch_iterator(ds, batch_size=4, seed=5, drop_last=True))
    assert all(b["images"].shape[0] == 4 for b in dropped)
    assert len(dropped) == 3


def test_default_domains_separate_in_channel_means():
    source, target = D.default_domain_specs(count_per_class=25)
    means = {}
    for spec in (source, target):
        imgs = [
            D.render_sample(1 - (i % 2), spec, derive_seed(spec.seed, i))[0]
            for i in range(50)
        ]
        means[spec.name] = np.stack(imgs).mean(axis=(0, 2, 3))
    gap = np.abs(means["source"] - means["target"])
    assert np.all(gap >= 0.05)
