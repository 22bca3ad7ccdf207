import numpy as np
import pytest

from segqc.datagen import (CorruptionSpec, PhantomSpec, build_dataset, case_seed, corrupt,
                           generate_phantom, phantom_labels, random_phantom_spec, read_manifest,
                           write_manifest)
from segqc.errors import ConfigError, DataError
from segqc.metrics import dice_all
from segqc.volgrid import LabelMap, load_case, load_labels


def test_default_phantom_has_all_classes_inside_grid():
    img, lab = generate_phantom(PhantomSpec())
    assert img.dims == lab.dims == (32, 32, 8)
    assert img.voxels.dtype == np.float32
    assert set(np.unique(lab.classes)) == {0, 1, 2, 3}
    fg = lab.classes != 0
    assert not (fg[0].any() or fg[-1].any() or fg[:, 0].any() or fg[:, -1].any())
    # intensity follows the class means up to noise
    for c, mu in enumerate(PhantomSpec().intensities):
        assert abs(img.voxels[lab.classes == c].mean() - mu) < 0.03


def test_lv_cavity_is_surrounded_by_myocardium():
    lab = phantom_labels(PhantomSpec(slice_jitter=0.0))
    for z in range(lab.shape[2]):
        sl = lab[:, :, z]
        xs, ys = np.nonzero(sl == 1)
        # walking outward from the cavity along +x meets myocardium first
        row = sl[xs.max() + 1:, int(np.median(ys))]
        assert row[0] == 2


def test_random_phantoms_are_deterministic_and_varied():
    a = generate_phantom(random_phantom_spec(7))
    b = generate_phantom(random_phantom_spec(7))
    c = generate_phantom(random_phantom_spec(8))
    assert np.array_equal(a[0].voxels, b[0].voxels) and np.array_equal(a[1].classes, b[1].classes)
    assert not np.array_equal(a[1].classes, c[1].classes)
    for s in range(40):
        generate_phantom(random_phantom_spec(case_seed(0, s)))


def test_phantom_validation():
    with pytest.raises(ConfigError):
        PhantomSpec(lv_radius=-1).validate()
    with pytest.raises(DataError):
        phantom_labels(PhantomSpec(centre=(3.0, 16.0)))


def test_severity_zero_is_exact_copy():
    _, gt = generate_phantom(PhantomSpec())
    out = corrupt(gt, CorruptionSpec.from_severity(0, 3))
    assert np.array_equal(out.classes, gt.classes)
    assert dice_all(out, gt) == (1.0,) * 5


def test_corruption_is_deterministic():
    _, gt = generate_phantom(PhantomSpec())
    spec = CorruptionSpec.from_severity(5, 99)
    assert np.array_equal(corrupt(gt, spec).classes, corrupt(gt, spec).classes)


def test_mean_wh_dice_falls_with_severity():
    means = []
    for sev in range(10):
        vals = []
        for p in range(60):
            _, gt = generate_phantom(random_phantom_spec(case_seed(3, p)))
            vals.append(dice_all(corrupt(gt, CorruptionSpec.from_severity(sev, case_seed(p, sev))), gt).wh)
        means.append(np.mean(vals))
    assert means[0] == 1.0
    assert all(a > b for a, b in zip(means, means[1:]))


def test_individual_operators():
    _, gt = generate_phantom(PhantomSpec(slice_jitter=0.0))
    fg = (gt.classes != 0).sum()
    eroded = corrupt(gt, CorruptionSpec(1, (("erode", (1,)),), 0)).classes
    dilated = corrupt(gt, CorruptionSpec(1, (("dilate", (1,)),), 0)).classes
    assert (eroded != 0).sum() < fg < (dilated != 0).sum()
    # dilation never changes existing foreground
    assert np.array_equal(dilated[gt.classes != 0], gt.classes[gt.classes != 0])
    moved = corrupt(gt, CorruptionSpec(1, (("translate", (2, -1, 0)),), 0)).classes
    assert np.array_equal(moved[2:, :-1], gt.classes[:-2, 1:])
    dropped = corrupt(gt, CorruptionSpec(1, (("drop_class", (3, 1.0)),), 0)).classes
    assert not (dropped == 3).any()
    swapped = corrupt(gt, CorruptionSpec(1, (("swap_region", (1.0,)),), 0))
    assert dice_all(swapped, gt).wh == 1.0 and dice_all(swapped, gt).lvc == 0.0
    noisy = corrupt(gt, CorruptionSpec(1, (("boundary_noise", (1.0,)),), 0)).classes
    assert 0 < (noisy != gt.classes).sum()


def test_bad_operator_rejected():
    with pytest.raises(ConfigError):
        CorruptionSpec(1, (("melt", (1,)),)).validate()
    with pytest.raises(ConfigError):
        CorruptionSpec(1, (("erode", (99,)),)).validate()
    with pytest.raises(ConfigError):
        CorruptionSpec(-1).validate()


def test_dataset_manifest_roundtrip(tiny_dataset, tmp_path):
    recs = read_manifest(tiny_dataset)
    assert len(recs) % 10 == 0 and len(recs) >= 120
    root = tiny_dataset.parent
    for r in recs[:12]:
        img, seg = load_case(root / r.image, root / r.seg)
        gt = load_labels(root / r.gt)
        assert dice_all(seg, gt) == r.dsc
    write_manifest(tmp_path / "m.csv", recs)
    assert (tmp_path / "m.csv").read_bytes() == tiny_dataset.read_bytes()


def test_dataset_is_reproducible(tmp_path):
    m1 = build_dataset(tmp_path / "a", 12, seed=5)
    m2 = build_dataset(tmp_path / "b", 12, seed=5)
    assert m1.read_bytes() == m2.read_bytes()
    r = read_manifest(m1)[37]
    assert (m1.parent / f"{r.seg}.raw").read_bytes() == (m2.parent / f"{r.seg}.raw").read_bytes()


def test_coverage_failure_without_retry(tmp_path):
    with pytest.raises(DataError, match="empty"):
        build_dataset(tmp_path, 1, severity_ladder=(0.0,), require_coverage=False)
    with pytest.raises(ConfigError):
        build_dataset(tmp_path, 0)
