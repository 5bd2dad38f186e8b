import numpy as np
import pytest

from helpers import tree_digest
from pixelcues.cues import CueConfig, discover_cues
from pixelcues.dataio import read_label_png, read_rgb_png, read_score_map, read_tensor
from pixelcues.maps import ScoreMap
from pixelcues.metrics import cue_quality
from pixelcues.saliency import ErasePolicy, erase, hierarchical_saliency
from pixelcues.synthetic import (
    ATT_FLOOR,
    OracleShapeDetector,
    SceneSpec,
    Shape,
    attention_slice,
    generate_synthetic,
    rasterize_mask,
    strongest_class,
    tag_indicator_features,
)

TWO_SHAPES = SceneSpec(min_shapes=2, max_shapes=2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic(root, seed=123, count=12, spec=TWO_SHAPES)
    return manifest


def scene_shapes(record):
    return [Shape.from_dict(d) for d in record.scene["shapes"]]


def test_generation_is_bit_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_synthetic(a, seed=9, count=5, spec=TWO_SHAPES)
    generate_synthetic(b, seed=9, count=5, spec=TWO_SHAPES)
    assert tree_digest(a) == tree_digest(b)
    generate_synthetic(tmp_path / "c", seed=10, count=5, spec=TWO_SHAPES)
    assert tree_digest(a) != tree_digest(tmp_path / "c")


def test_ground_truth_tags_and_attention_consistent(dataset):
    for record in dataset.records:
        gt = read_label_png(dataset.resolve(record.ground_truth))
        attention = read_tensor(dataset.resolve(record.attention))
        assert attention.shape[0] == dataset.num_labels - 1
        for class_id in record.tags:
            region = gt.data == class_id
            assert region.any()  # every tag owns ground-truth pixels
            peak = np.unravel_index(np.argmax(attention[class_id - 1]), region.shape)
            assert region[peak]  # attention peaks inside the class region
        absent = set(range(1, dataset.num_labels)) - set(record.tags)
        for class_id in absent:
            assert (attention[class_id - 1] == 0.0).all()


def test_attention_floor_inside_masks(dataset):
    for record in dataset.records:
        gt = read_label_png(dataset.resolve(record.ground_truth))
        attention = read_tensor(dataset.resolve(record.attention))
        for class_id in record.tags:
            inside = attention[class_id - 1][gt.data == class_id]
            assert inside.min() >= ATT_FLOOR - 1e-6


def test_oracle_saliency_covers_exactly_strongest_shape(dataset):
    for record in dataset.records:
        shapes = scene_shapes(record)
        strengths = [s.strength for s in shapes]
        winner = shapes[int(np.argmax(strengths))]
        mask = rasterize_mask(winner, 64, 64)
        stored = read_score_map(dataset.resolve(record.saliency))
        np.testing.assert_array_equal(stored.data, mask.astype(np.float32))


def test_erasing_reveals_second_shape(dataset):
    record = dataset.records[0]
    shapes = scene_shapes(record)
    image = read_rgb_png(dataset.resolve(record.image))
    detector = OracleShapeDetector(tuple(shapes), 64, 64)
    first = detector.score(image)
    order = np.argsort([-s.strength for s in shapes])
    mask_a = rasterize_mask(shapes[order[0]], 64, 64)
    mask_b = rasterize_mask(shapes[order[1]], 64, 64)
    np.testing.assert_array_equal(first.data > 0, mask_a)
    erased = erase(image, first, 0.7, dataset.mean_pixel)
    second = detector.score(erased)
    np.testing.assert_array_equal(second.data > 0, mask_b)


def test_hierarchical_fuses_both_shapes(dataset):
    for record in dataset.records[:4]:
        shapes = scene_shapes(record)
        image = read_rgb_png(dataset.resolve(record.image))
        detector = OracleShapeDetector(tuple(shapes), 64, 64)
        final, rounds = hierarchical_saliency(image, detector, ErasePolicy((0.7,), dataset.mean_pixel))
        union = np.zeros((64, 64), dtype=bool)
        for shape in shapes:
            union |= rasterize_mask(shape, 64, 64)
        np.testing.assert_array_equal(final.data > 0, union)
        assert len(rounds) == 2


def test_single_shape_scene_has_single_round_fixed_point(tmp_path):
    manifest = generate_synthetic(tmp_path, seed=5, count=4, spec=SceneSpec(min_shapes=1, max_shapes=1))
    for record in manifest.records:
        shapes = scene_shapes(record)
        image = read_rgb_png(manifest.resolve(record.image))
        detector = OracleShapeDetector(tuple(shapes), 64, 64)
        single = detector.score(image)
        final, _ = hierarchical_saliency(image, detector, ErasePolicy((0.7, 0.8), manifest.mean_pixel))
        np.testing.assert_array_equal(final.data, single.data)


def test_cues_from_fused_saliency_reach_full_recall(dataset):
    from pixelcues.attention import extract_attention
    from pixelcues.maps import ScoreVolume

    for record in dataset.records[:4]:
        shapes = scene_shapes(record)
        image = read_rgb_png(dataset.resolve(record.image))
        detector = OracleShapeDetector(tuple(shapes), 64, 64)
        final, _ = hierarchical_saliency(image, detector, ErasePolicy((0.7,), dataset.mean_pixel))
        attention = read_tensor(dataset.resolve(record.attention))
        volume = ScoreVolume(dataset.object_ids, attention)
        tags = dataset.image_tags(record)
        cues = discover_cues(extract_attention(volume, tags), final, tags, CueConfig())
        gt = read_label_png(dataset.resolve(record.ground_truth))
        for class_id in record.tags:
            precision, recall = cue_quality(gt, cues, class_id)
            assert recall >= 0.99
            assert precision >= 0.99


def test_strongest_class_matches_detector_choice(dataset):
    for record in dataset.records:
        shapes = scene_shapes(record)
        image = read_rgb_png(dataset.resolve(record.image))
        detector = OracleShapeDetector(tuple(shapes), 64, 64)
        first = detector.score(image)
        winner = strongest_class(shapes)
        gt = read_label_png(dataset.resolve(record.ground_truth))
        covered = set(np.unique(gt.data[first.data > 0]).tolist())
        assert covered == {winner}


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        SceneSpec(min_shapes=0)
    with pytest.raises(ValueError):
        SceneSpec(min_shapes=2, max_shapes=1)
    with pytest.raises(ValueError):
        SceneSpec(width=10, height=10)
    with pytest.raises(ValueError):
        generate_synthetic("ignored", seed=0, count=0)


def test_detector_rejects_wrong_canvas(dataset):
    record = dataset.records[0]
    detector = OracleShapeDetector(tuple(scene_shapes(record)), 64, 64)
    from pixelcues.saliency import RgbImage

    with pytest.raises(ValueError):
        detector.score(RgbImage(np.zeros((32, 32, 3), np.uint8)))


def test_all_shapes_erased_scores_zero(dataset):
    record = dataset.records[0]
    shapes = scene_shapes(record)
    image = read_rgb_png(dataset.resolve(record.image))
    blank = erase(
        image,
        ScoreMap(np.ones((64, 64), np.float32), normalized=True),
        0.5,
        dataset.mean_pixel,
    )
    detector = OracleShapeDetector(tuple(shapes), 64, 64)
    assert (detector.score(blank).data == 0.0).all()


def test_tag_indicator_features_shape():
    feat = tag_indicator_features({1, 3}, num_labels=4, height=2, width=3)
    assert feat.data.shape == (3, 2, 3)
    assert (feat.data[0] == 1.0).all()
    assert (feat.data[1] == 0.0).all()
    assert (feat.data[2] == 1.0).all()
