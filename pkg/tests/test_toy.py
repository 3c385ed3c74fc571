import json

import numpy as np
import pytest
import torch

from bitdistill.config import DistillConfig, load_config
from bitdistill.proposals import Region, crop_resize
from bitdistill.select import selection_size
from bitdistill.toy.data import GRID, N_CLASSES, Scene, encode_targets, gen_dataset, load_dataset
from bitdistill.toy.metrics import Prediction, score_predictions
from bitdistill.toy.model import NECK_CHANNELS, ToyDetector
from bitdistill.toy.train import (
    TeacherQualityError,
    choose_pairs,
    crop_patches,
    regions_from_objectness,
    train,
    train_all_modes,
    verify_packed_layers,
)

TINY = DistillConfig(n_train=32, n_eval=16, epochs=2, teacher_epochs=1, teacher_gate=0.0,
                     teacher_width=16, student_width=16)


def test_dataset_deterministic_and_seed_dependent():
    a, b = gen_dataset(1, 20), gen_dataset(1, 20)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert np.array_equal(x.boxes, y.boxes) and np.array_equal(x.classes, y.classes)
    c = gen_dataset(2, 20)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_dataset_invariants_and_class_balance():
    scenes = gen_dataset(3, 500)
    counts = np.zeros(N_CLASSES)
    for s in scenes:
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert 1 <= len(s.classes) <= 4
        assert np.all(s.boxes[:, :2] >= 0) and np.all(s.boxes[:, 2:] <= 64)
        assert len({tuple(c) for c in s.cells()}) == len(s.classes)
        np.add.at(counts, s.classes, 1)
    uniform = counts.sum() / N_CLASSES
    assert np.all(np.abs(counts - uniform) <= 0.1 * uniform)


def test_dataset_cache_round_trip(tmp_path):
    fresh = gen_dataset(4, 6, tmp_path)
    cached = gen_dataset(4, 6, tmp_path)
    assert (tmp_path / "scenes_seed4_n6" / "images.idat").exists()
    for x, y in zip(fresh, cached):
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.boxes, y.boxes)
    assert len(load_dataset(tmp_path / "scenes_seed4_n6")) == 6


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        gen_dataset(0, 0)


def perfect_prediction(scene) -> Prediction:
    obj, cls, box = encode_targets([scene])
    logits = np.full((N_CLASSES, GRID, GRID), -5.0)
    rows, cols = np.nonzero(cls[0] >= 0)
    logits[cls[0, rows, cols], rows, cols] = 5.0
    return Prediction(obj[0].astype(np.float64), logits, box[0].astype(np.float64))


def two_object_scene() -> Scene:
    boxes = np.array([[8.0, 8.0, 24.0, 24.0], [36.0, 30.0, 52.0, 46.0]])
    return Scene(np.zeros((3, 64, 64), np.float32), boxes, np.array([1, 3]))


def test_metric_perfect_and_background():
    scenes = [two_object_scene(), gen_dataset(5, 1)[0]]
    assert score_predictions([perfect_prediction(s) for s in scenes], scenes) == 1.0
    background = Prediction(np.zeros((GRID, GRID)), np.zeros((N_CLASSES, GRID, GRID)), np.zeros((4, GRID, GRID)))
    assert score_predictions([background] * 2, scenes) == 0.0


def test_metric_half_correct_fixture():
    scene = two_object_scene()
    pred = perfect_prediction(scene)
    # both objects found and classified, but the second box is shrunk to a quarter width
    row, col = scene.cells()[1]
    pred.boxes[2, row, col] -= np.log(4.0)
    assert score_predictions([pred], [scene]) == 0.5
    # one perfect scene plus one empty prediction also averages to 0.5
    other = two_object_scene()
    empty = Prediction(np.zeros((GRID, GRID)), np.zeros((N_CLASSES, GRID, GRID)), np.zeros((4, GRID, GRID)))
    assert score_predictions([perfect_prediction(other), empty], [other, other]) == 0.5


def test_metric_requires_scenes():
    with pytest.raises(ValueError):
        score_predictions([], [])


def test_regions_from_objectness():
    obj = np.zeros((GRID, GRID))
    obj[7, 3] = 0.9
    regions = regions_from_objectness(obj, 3, 5.0)
    assert len(regions) == 3
    assert regions[0] == Region(1.0, 5.0, 5.0, 5.0)
    uniform = regions_from_objectness(np.full((GRID, GRID), 0.5), 3, 5.0)
    # raster order: cells (0,0), (0,1), (0,2), clipped at the map border
    assert [r.x + r.w / 2 for r in uniform] == [pytest.approx(v) for v in (1.5, 2.0, 2.5)]
    assert all(r.y == 0.0 for r in uniform)


def test_model_shapes_and_binary_layers():
    torch.manual_seed(0)
    x = torch.zeros(2, 3, 64, 64)
    teacher, student = ToyDetector(48), ToyDetector(32, binary_backbone=True)
    for model in (teacher, student):
        feat, out = model(x)
        assert feat.shape == (2, NECK_CHANNELS, GRID, GRID)
        assert out.shape == (2, 1 + N_CLASSES + 4, GRID, GRID)
    assert not teacher.binary_convs()
    assert len(student.binary_convs()) == 3
    student.set_neck_binary(True)
    assert len(student.binary_convs()) == 4


def test_packed_layers_match_float_path():
    torch.manual_seed(1)
    model = ToyDetector(16, binary_backbone=True, binary_neck=True)
    assert verify_packed_layers(model, gen_dataset(6, 1)[0])


def test_crop_patches_matches_crop_resize():
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(2, 4, GRID, GRID))
    regions = [Region(0.0, 0.0, 5.0, 5.0), Region(9.5, 3.0, 5.0, 5.0), Region(12.0, 12.0, 4.0, 4.0)]
    got = crop_patches(torch.from_numpy(feats), [0, 1, 1], regions, 7).numpy()
    for i, (b, r) in enumerate(zip([0, 1, 1], regions)):
        np.testing.assert_allclose(got[i], crop_resize(feats[b], r, 7), atol=1e-12)


def test_choose_pairs_modes():
    scene = two_object_scene()
    regions = regions_from_objectness(np.zeros((GRID, GRID)), 4, 5.0)
    eps = np.array([0.1, 3.0, 2.0, 0.5])
    k = selection_size(4, 0.5)
    ida = choose_pairs("ida", eps, regions, scene, 0.5, np.random.default_rng(0))
    assert sorted(ida.tolist()) == [1, 2]
    rnd = choose_pairs("random", eps, regions, scene, 0.5, np.random.default_rng(0))
    assert len(set(rnd.tolist())) == k
    gt = choose_pairs("gt-region", eps, regions, scene, 0.5, np.random.default_rng(0))
    assert 1 <= len(gt) <= k


def test_train_mode_none_has_no_distill_term():
    report = train(TINY, "none")
    assert all("l_p" not in row for row in report.epochs)
    assert report.packed_equivalence is True


def test_train_is_deterministic(tmp_path):
    a = train(TINY, "ida")
    b = train(TINY, "ida")
    assert a.to_json() == b.to_json()
    assert all(set(row) == {"epoch", "l_gt", "l_p", "l_r", "total"} for row in a.epochs)
    json_path, csv_path = a.save(tmp_path)
    assert json.loads(json_path.read_text())["config_hash"] == TINY.hash()
    assert csv_path.read_text().splitlines()[0] == "epoch,l_gt,l_p,l_r,total"


def test_train_all_modes_shares_teacher():
    reports = train_all_modes(TINY, ("none", "gt-region"))
    assert set(reports) == {"none", "gt-region"}
    assert reports["none"].teacher_metric == reports["gt-region"].teacher_metric


def test_teacher_gate():
    with pytest.raises(TeacherQualityError, match="retrain"):
        train(TINY.with_overrides(teacher_gate=1.01), "ida")


def test_config_file_and_hash(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nlam = 0.2\nepochs = 3\n")
    cfg = load_config(path)
    assert cfg.lam == 0.2 and cfg.epochs == 3 and cfg.gamma == 0.6
    assert cfg.hash() != DistillConfig().hash()
    with pytest.raises(FileNotFoundError, match="missing.cfg"):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(KeyError):
        DistillConfig().with_overrides(bogus=1)


def test_default_hyperparameters():
    cfg = DistillConfig()
    assert (cfg.temperature, cfg.lam, cfg.gamma, cfg.mu, cfg.seed) == (4.0, 0.4, 0.6, 1e-4, 42)
