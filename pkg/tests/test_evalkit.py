import copy
import csv
import logging

import numpy as np
import pytest
import torch

from stormadapt.errors import InputError
from stormadapt.evalkit import (
    CLEAR_ROW,
    DetectionSet,
    ImageDetections,
    MapResult,
    average_precision,
    domain_distances,
    embedding_ordering_rate,
    evaluate_model,
    hardness_rank,
    intensity_sweep,
    iou,
    mean_ap,
    pooled_embeddings,
    project_2d,
    rank_dataset,
    render_detections,
    write_hardness_csv,
    write_map_csv,
    write_projection_csv,
)
from stormadapt.toyscenes import DEFAULT_CLASS_NAMES, AlignedTriplet, AnnotatedImage
from stormadapt.weathergen import FogParams, synth_fog


def naive_ap(predictions, ground_truths, thr=0.5):
    """Straight loop version of all-point AP, for distinct confidences."""
    num_gt = sum(len(v) for v in ground_truths.values())
    ordered = sorted(predictions, key=lambda p: -p[2])
    used = {k: [False] * len(v) for k, v in ground_truths.items()}
    precisions, recalls, hits = [], [], 0
    for n, (image_id, box, _) in enumerate(ordered, 1):
        best, best_iou = None, 0.0
        for j, g in enumerate(ground_truths.get(image_id, [])):
            overlap = iou(box, g)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best is not None and best_iou >= thr and not used[image_id][best]:
            used[image_id][best] = True
            hits += 1
        precisions.append(hits / n)
        recalls.append(hits / num_gt)
    ap, previous = 0.0, 0.0
    for i, r in enumerate(recalls):
        if r > previous:
            ap += (r - previous) * max(precisions[i:])
            previous = r
    return ap


def random_boxes(rng, n, size=40):
    xy = rng.uniform(0, size - 10, (n, 2))
    wh = rng.uniform(4, 10, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestIou:
    def test_cases(self):
        assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
        assert iou([0, 0, 2, 2], [3, 3, 4, 4]) == 0.0
        assert iou([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3)

    def test_degenerate(self):
        assert iou([1, 1, 1, 4], [0, 0, 5, 5]) == 0.0


class TestAveragePrecision:
    gt = {"a": np.array([[0.0, 0.0, 10.0, 10.0]])}

    def test_perfect(self):
        assert average_precision([("a", [0, 0, 10, 10], 0.9)], self.gt) == 1.0

    def test_false_positive_first(self):
        preds = [("a", [20, 20, 30, 30], 0.9), ("a", [0, 0, 10, 10], 0.5)]
        assert average_precision(preds, self.gt) == pytest.approx(0.5)

    def test_half_recall(self):
        gt = {"a": np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])}
        assert average_precision([("a", [0, 0, 10, 10], 0.9)], gt) == pytest.approx(0.5)

    def test_duplicate_is_false_positive(self):
        preds = [("a", [0, 0, 10, 10], 0.9), ("a", [0, 0, 10, 9], 0.8)]
        assert average_precision(preds, self.gt) == 1.0

    def test_prediction_on_image_without_objects(self):
        preds = [("b", [0, 0, 10, 10], 0.9), ("a", [0, 0, 10, 10], 0.5)]
        assert average_precision(preds, {**self.gt, "b": np.zeros((0, 4))}) == pytest.approx(0.5)

    def test_no_ground_truth(self):
        assert average_precision([("a", [0, 0, 1, 1], 0.9)], {"a": np.zeros((0, 4))}) is None

    def test_no_predictions(self):
        assert average_precision([], self.gt) == 0.0

    def test_order_independent_on_ties(self):
        preds = [("a", [20, 20, 30, 30], 0.5), ("b", [0, 0, 10, 10], 0.5),
                 ("a", [0, 0, 10, 10], 0.5)]
        gt = {**self.gt, "b": np.array([[0.0, 0.0, 10.0, 10.0]])}
        assert average_precision(preds, gt) == average_precision(preds[::-1], gt)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            gts = {f"i{k}": random_boxes(rng, int(rng.integers(0, 4))) for k in range(3)}
            if not any(len(v) for v in gts.values()):
                continue
            preds = []
            for image_id, boxes in gts.items():
                for box in boxes:
                    if rng.random() < 0.7:
                        preds.append((image_id, box + rng.normal(0, 1.5, 4), rng.random()))
                for box in random_boxes(rng, int(rng.integers(0, 3))):
                    preds.append((image_id, box, rng.random()))
            if not preds:
                continue
            assert average_precision(preds, gts) == pytest.approx(naive_ap(preds, gts))


class TestMeanAp:
    def test_skips_classes_without_ground_truth(self, caplog):
        dets = DetectionSet()
        dets.add(ImageDetections(
            image_id="x",
            boxes=np.array([[0.0, 0.0, 10.0, 10.0]]),
            labels=np.array([0]),
            scores=np.array([0.9]),
            gt_boxes=np.array([[0.0, 0.0, 10.0, 10.0]]),
            gt_labels=np.array([0]),
        ))
        with caplog.at_level(logging.WARNING, logger="stormadapt.evalkit"):
            result = mean_ap(dets, ["car", "sign"])
        assert result.map == 1.0
        assert result.per_class == {"car": 1.0, "sign": None}
        assert "'sign'" in caplog.text
        assert result.as_row() == {"mAP": 1.0, "AP_car": 1.0, "AP_sign": ""}

    def test_empty_set(self):
        assert mean_ap(DetectionSet(), ["car"]).map == 0.0


class TestModelEvaluation:
    def test_score_range(self, tiny_model, triplets):
        result = evaluate_model(tiny_model, triplets, DEFAULT_CLASS_NAMES)
        assert 0.0 <= result.map <= 1.0
        assert set(result.per_class) == set(DEFAULT_CLASS_NAMES)

    def test_sweep_adds_clear_row(self, tiny_model, triplets):
        splits = {"small": triplets[:2], "large": triplets[2:]}
        results = intensity_sweep(tiny_model, splits, DEFAULT_CLASS_NAMES)
        assert list(results) == ["small", "large", CLEAR_ROW]
        clear = evaluate_model(tiny_model, triplets[:2], DEFAULT_CLASS_NAMES, member="source")
        assert results[CLEAR_ROW].map == clear.map

    def test_sweep_without_clear_row(self, tiny_model, triplets):
        results = intensity_sweep(tiny_model, {"large": triplets}, DEFAULT_CLASS_NAMES,
                                  include_clear=False)
        assert list(results) == ["large"]

    def test_map_csv(self, tmp_path):
        results = {"small": MapResult(0.5, {"car": 0.5, "sign": None})}
        path = write_map_csv(tmp_path / "map.csv", results)
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows == [{"level": "small", "mAP": "0.5", "AP_car": "0.5", "AP_sign": ""}]


class TestHardness:
    def test_rank_order_and_ties(self):
        records = hardness_rank([("b", 2.0), ("a", 2.0), ("c", 1.0)])
        assert [(r.rank, r.sample_id) for r in records] == [(1, "c"), (2, "a"), (3, "b")]

    def test_rejects_non_finite(self):
        with pytest.raises(InputError):
            hardness_rank([("a", 1.0), ("b", float("nan"))])

    def test_identical_images_rank_hardest(self, tiny_model, triplets):
        same = triplets[0]
        twin = AlignedTriplet(same.source, same.auxiliary, same.source, sample_id="twin")
        records = rank_dataset(tiny_model, [*triplets, twin])
        assert records[0].sample_id == "twin"
        assert records[0].ah == 0.0
        assert [r.rank for r in records] == list(range(1, 6))

    def test_fog_density_orders_a_shared_scene(self, tiny_model, clear_scene):
        def fogged(beta, sample_id):
            target = AnnotatedImage(synth_fog(clear_scene.image, clear_scene.depth,
                                              FogParams(beta_atm=beta)),
                                    clear_scene.boxes, clear_scene.labels)
            return AlignedTriplet(clear_scene, target, target, sample_id=sample_id)

        samples = [fogged(0.002, "a"), fogged(0.01, "b"), fogged(0.05, "c")]
        before = {r.sample_id: r for r in rank_dataset(tiny_model, samples)}
        assert before["a"].ah < before["b"].ah < before["c"].ah
        assert [before[s].rank for s in "abc"] == [1, 2, 3]

        samples[0] = fogged(0.2, "a")
        after = {r.sample_id: r for r in rank_dataset(tiny_model, samples)}
        assert after["a"].ah > before["a"].ah
        assert after["a"].rank > before["a"].rank

    def test_feature_scale_scales_hardness(self, tiny_model, triplets):
        scaled = copy.deepcopy(tiny_model)
        with torch.no_grad():
            scaled.backbone.last_conv.weight.mul_(3.0)
            scaled.backbone.last_conv.bias.mul_(3.0)
        base = rank_dataset(tiny_model, triplets)
        tripled = rank_dataset(scaled, triplets)
        assert [r.sample_id for r in tripled] == [r.sample_id for r in base]
        for a, b in zip(base, tripled):
            assert b.ah == pytest.approx(3.0 * a.ah, rel=1e-4)

    def test_csv(self, tmp_path):
        path = write_hardness_csv(tmp_path / "h.csv", hardness_rank([("a", 0.5)]))
        assert path.read_text().splitlines() == ["rank,sample_id,ah", "1,a,0.5"]


class TestEmbeddings:
    def test_distances(self, tiny_model, triplets):
        rows = domain_distances(tiny_model, triplets)
        assert [r.sample_id for r in rows] == [t.sample_id for t in triplets]
        for r in rows:
            assert r.source_target >= 0 and r.source_auxiliary >= 0

    def test_projection_csv(self, tmp_path, tiny_model, triplets):
        pooled = pooled_embeddings(tiny_model, triplets)
        rate = embedding_ordering_rate(pooled)
        assert 0.0 <= rate <= 1.0
        path = write_projection_csv(tmp_path / "p.csv", pooled, [t.sample_id for t in triplets])
        lines = path.read_text().splitlines()
        assert lines[0] == "domain,sample_id,x,y"
        assert len(lines) == 1 + 3 * len(triplets)

    def test_project_2d(self):
        points = project_2d(np.random.default_rng(0).normal(size=(6, 4)))
        assert points.shape == (6, 2)
        np.testing.assert_allclose(points.mean(axis=0), 0.0, atol=1e-9)
        assert points[:, 0].var() >= points[:, 1].var()

    def test_project_2d_needs_two_rows(self):
        with pytest.raises(InputError):
            project_2d(np.zeros((1, 4)))


def test_render_detections(tmp_path):
    path = tmp_path / "vis.png"
    canvas = render_detections(
        np.zeros((20, 30, 3), np.float32), np.array([[2.0, 2.0, 12.0, 10.0]]), np.array([1]),
        DEFAULT_CLASS_NAMES, scores=np.array([0.8]), path=path,
    )
    assert canvas.size == (30, 20)
    assert path.exists()
    assert np.asarray(canvas).any()
