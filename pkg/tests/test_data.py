import json

import numpy as np
import pytest

from jmap.data import (
    ClassLabel,
    CorpusConfig,
    Manifest,
    PhantomSpec,
    Sample,
    Subject,
    build_corpus,
    cdr_to_class,
    fuse_early,
    generate_phantom,
    kfold,
    read_manifest,
    smote_balance,
    split_by_subject,
    write_manifest,
)
from jmap.morphometry import standardize
from jmap.volume import Volume


def subjects(n, scans=1, labels=None):
    cdrs = [0.0, 0.5, 1.0, 2.0]
    return Manifest(tuple(
        Subject(f"s{i:02d}", cdrs[labels[i]] if labels else cdrs[i % 4],
                tuple(("MRI", f"s{i:02d}/scan{j}.nii") for j in range(scans)))
        for i in range(n)
    ))


def samples_of(sizes, shape=(1, 2, 2, 2), seed=0):
    r = np.random.default_rng(seed)
    out = []
    for label, n in enumerate(sizes):
        out += [Sample(r.normal(size=shape) + 3 * label, label, f"c{label}-{i}") for i in range(n)]
    return out


@pytest.mark.parametrize("cdr, label", [(0, ClassLabel.CN), (0.5, ClassLabel.MCI), (1, ClassLabel.MLD),
                                        (2, ClassLabel.MOD), (3, ClassLabel.MOD)])
def test_cdr_to_class(cdr, label):
    assert cdr_to_class(cdr) is label


@pytest.mark.parametrize("bad", [0.25, 4, -1, "mild", None])
def test_cdr_to_class_rejects(bad):
    with pytest.raises(ValueError, match="CDR"):
        cdr_to_class(bad)


def test_subject_invariants():
    with pytest.raises(ValueError, match="no scans"):
        Subject("a", 0.0, ())
    with pytest.raises(ValueError, match="duplicate"):
        Manifest((Subject("a", 0.0, (("MRI", "x"),)), Subject("a", 1.0, (("MRI", "y"),))))
    s = Subject("a", 2.0, (("mri", "x.nii"),))
    assert s.scan("MRI") == "x.nii" and s.label is ClassLabel.MOD
    with pytest.raises(KeyError):
        s.scan("CT")


def test_manifest_round_trip(tmp_path):
    m = subjects(6, scans=2)
    write_manifest(m, tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert back.subjects == m.subjects
    assert back.resolve("s00/scan0.nii") == tmp_path / "s00/scan0.nii"
    assert json.loads((tmp_path / "manifest.json").read_text())["subjects"][0]["id"] == "s00"


def test_kfold_exact_division():
    folds = kfold(subjects(10), 5, seed=0)
    assert [len(f) for f in folds] == [2] * 5


@pytest.mark.parametrize("n, k", [(11, 5), (13, 4), (7, 7), (48, 5)])
def test_kfold_partition(n, k):
    m = subjects(n)
    folds = kfold(m, k, seed=3)
    flat = [s for f in folds for s in f]
    assert sorted(flat) == sorted(s.id for s in m)
    assert len(set(flat)) == len(flat)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_keeps_scans_together():
    m = subjects(8, scans=3)
    folds = kfold(m, 4, seed=1)
    for f in folds:
        scans = [p for s in m.subset(f) for _, p in s.scans]
        assert len(scans) == 3 * len(f)


def test_kfold_stratifies():
    folds = kfold(subjects(20), 5, seed=2)
    labels = {s.id: int(s.label) for s in subjects(20)}
    for f in folds:
        assert sorted(labels[i] for i in f) == [0, 1, 2, 3]


def test_kfold_seeds():
    m = subjects(20)
    assert kfold(m, 5, seed=7) == kfold(m, 5, seed=7)
    splits = {json.dumps(kfold(m, 5, seed=s)) for s in range(20)}
    assert len(splits) == 20


def test_kfold_errors():
    with pytest.raises(ValueError, match="at least k"):
        kfold(subjects(3), 5)
    with pytest.raises(ValueError):
        kfold(subjects(10), 1)


def test_split_by_subject():
    m = subjects(10, scans=2)
    train, test = split_by_subject(m, 0.2, seed=0)
    assert len(test) == 2 and len(train) == 8
    assert not set(train) & set(test)
    assert split_by_subject(m, 0.2, seed=0) == (train, test)
    assert len({tuple(split_by_subject(m, 0.3, seed=s)[1]) for s in range(20)}) > 1


def test_smote_balanced_unchanged():
    s = samples_of([4, 4, 4, 4])
    assert smote_balance(s, 5, seed=0) == s


def test_smote_midpoint():
    a = Sample(np.zeros((1, 1, 1, 2)), 1, "a")
    b = Sample(np.ones((1, 1, 1, 2)), 1, "b")
    majority = [Sample(np.full((1, 1, 1, 2), 5.0 + i), 0, f"m{i}") for i in range(3)]
    from jmap.data.dataset import interpolate

    assert np.array_equal(interpolate(a.input, b.input, 0.5).ravel(), [0.5, 0.5])
    out = smote_balance(majority + [a, b], k_neighbors=1, seed=0)
    new = [s for s in out if s.synthetic]
    assert len(new) == 1
    x = new[0].input.ravel()
    assert x[0] == pytest.approx(x[1]) and 0 <= x[0] <= 1


def test_smote_segments():
    s = samples_of([8, 3, 5, 2], shape=(1, 3, 3, 3), seed=4)
    out = smote_balance(s, k_neighbors=5, seed=9)
    counts = np.bincount([x.label for x in out])
    assert counts.tolist() == [8, 8, 8, 8]
    assert out[: len(s)] == s
    assert all(a.input is b.input for a, b in zip(out, s))
    real = {x.subject_id: x.input.ravel() for x in s}
    labels = {x.subject_id: x.label for x in s}
    for x in out[len(s):]:
        assert x.synthetic and x.subject_id.startswith("synthetic")
        p, q = (real[i] for i in x.origin)
        assert {labels[i] for i in x.origin} == {x.label}
        # brute force: the closest point of segment pq to x must coincide with x
        d = q - p
        t = np.clip(np.dot(x.input.ravel() - p, d) / np.dot(d, d), 0, 1)
        assert np.linalg.norm(p + t * d - x.input.ravel()) <= 1e-9


def test_smote_neighbours_are_nearest():
    # class 1 on a line: the nearest neighbour of every point is adjacent
    pts = [0.0, 1.0, 10.0, 11.0]
    s = [Sample(np.full((1, 1, 1, 1), 100.0 + i), 0, f"m{i}") for i in range(8)]
    s += [Sample(np.full((1, 1, 1, 1), v), 1, f"p{i}") for i, v in enumerate(pts)]
    out = smote_balance(s, k_neighbors=1, seed=0)
    for x in out[len(s):]:
        assert sorted(x.origin) in (["p0", "p1"], ["p2", "p3"])


def test_smote_deterministic():
    s = samples_of([6, 2, 3, 4])
    a, b = smote_balance(s, 5, seed=1), smote_balance(s, 5, seed=1)
    assert all(np.array_equal(x.input, y.input) for x, y in zip(a, b))


def test_smote_errors():
    with pytest.raises(ValueError, match="single sample"):
        smote_balance(samples_of([4, 1]), 5)
    with pytest.raises(ValueError):
        smote_balance(samples_of([4, 4]), 0)


def test_sample_invariants():
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 2, 2, 2)), 0, "x")
    with pytest.raises(ValueError):
        Sample(np.zeros((2, 2, 2)), 0, "x")


def test_fuse_early(rng):
    a = Volume(rng.normal(size=(5, 6, 7)))
    fused = fuse_early(a, a)
    assert fused.shape == (2, 7, 6, 5)
    assert np.array_equal(fused[0], fused[1])
    assert np.array_equal(fused[0], standardize(a.data).transpose(2, 1, 0))
    with pytest.raises(ValueError, match="dims"):
        fuse_early(a, Volume(np.zeros((5, 6, 6))))


def test_fused_phantom_pair_shape(template):
    ph = generate_phantom(PhantomSpec(atrophy_factor=0.85, variation=0.5, seed=3), template)
    assert fuse_early(ph.images["MRI"], ph.images["CT"]).shape == (2, 32, 32, 32)


def test_identity_phantom(template):
    ph = generate_phantom(PhantomSpec(atrophy_factor=1.0, noise=0.0), template)
    for name, vol in ph.images.items():
        assert np.array_equal(vol.data, template.images[name].data)
    assert not ph.field.vectors.any()
    assert np.array_equal(ph.labels.labels, template.atlas.labels)


def test_phantom_region_shrinks(template):
    ph = generate_phantom(PhantomSpec(atrophy_region=5, atrophy_factor=0.7), template)
    before = int((template.atlas.labels == 5).sum())
    after = int((ph.labels.labels == 5).sum())
    assert abs(after / before - 0.7) <= 0.1 * 0.7


def test_phantom_deterministic(template):
    spec = PhantomSpec(atrophy_factor=0.8, noise=0.02, variation=0.5, seed=5)
    a, b = generate_phantom(spec, template), generate_phantom(spec, template)
    for name in a.images:
        assert a.images[name].data.tobytes() == b.images[name].data.tobytes()
    assert a.field.vectors.tobytes() == b.field.vectors.tobytes()
    c = generate_phantom(PhantomSpec(atrophy_factor=0.8, noise=0.02, variation=0.5, seed=6), template)
    assert not np.array_equal(a.images["MRI"].data, c.images["MRI"].data)


def test_phantom_spec_validation():
    for s in (0.0, 1.2):
        with pytest.raises(ValueError):
            PhantomSpec(atrophy_factor=s)
    with pytest.raises(ValueError):
        PhantomSpec(noise=-1)


def test_template_atlas(template):
    atlas = template.atlas
    assert set(np.unique(atlas.labels)) == set(range(13))
    assert len(atlas.names) == 12
    mri, ct = template.images["MRI"].data, template.images["CT"].data
    assert not np.allclose(mri, ct)


def test_build_corpus_tree(tmp_path, small_template):
    cfg = CorpusConfig(dims=(16, 16, 16), per_class=2)
    m = build_corpus(tmp_path, cfg, small_template)
    assert len(m) == 8
    assert np.bincount(m.labels()).tolist() == [2, 2, 2, 2]
    for s in m:
        for modality in ("MRI", "CT"):
            assert (tmp_path / s.id / f"{modality}.nii").is_file()
    assert read_manifest(tmp_path / "manifest.json").subjects == m.subjects
    assert (tmp_path / "template" / "atlas.nii").is_file()
