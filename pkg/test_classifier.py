import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from augment import ClassificationSample
from classifier import (BACKGROUND, MITOSIS, Candidate, ClassifierConfig, EmbeddingBatch, HybridLossParams,
                        build_classifier, candidates_from_detections, classify, contrastive_loss, crop_region,
                        evaluate_classifier, filter_candidates, focal_loss, hybrid_training_loss, load_classifier,
                        mine_candidates, one_hot, preprocess_crop, sample_positives, save_classifier,
                        soft_focal_loss, total_loss, train_classifier)
from geometry import Box, Detection
from training import EarlyStopping, TrainSchedule


def batch(features, labels, probs, dtype=torch.float64):
    f = F.normalize(torch.as_tensor(features, dtype=dtype), dim=1)
    return EmbeddingBatch(f, torch.as_tensor(labels, dtype=torch.long), torch.as_tensor(probs, dtype=dtype))


class ConstantLogits(torch.nn.Module):
    cfg = ClassifierConfig()

    def forward(self, x):
        return torch.zeros(x.shape[0], 2), F.normalize(torch.ones(x.shape[0], 4), dim=1)


class TestEmbeddingBatch:
    def test_rejects_non_unit_features(self):
        with pytest.raises(ValueError, match="unit-norm"):
            EmbeddingBatch(torch.ones(2, 3), torch.tensor([0, 1]), torch.tensor([0.5, 0.5]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(torch.eye(3), torch.tensor([0, 1]), torch.tensor([0.5, 0.5]))

    def test_float32_normalized_features_accepted(self):
        f = F.normalize(torch.randn(64, 256), dim=1)
        EmbeddingBatch(f, torch.zeros(64, dtype=torch.long), torch.full((64,), 0.5))


class TestFocalLoss:
    def test_perfect_prediction(self):
        assert float(focal_loss(batch([[1.0, 0.0]], [MITOSIS], [1.0]))) == 0.0

    def test_mitosis_half_confident(self):
        loss = focal_loss(batch([[1.0, 0.0]], [MITOSIS], [0.5]))
        assert float(loss) == pytest.approx(0.25 * math.log(2), abs=1e-9)

    def test_background_weighted(self):
        loss = focal_loss(batch([[1.0, 0.0]], [BACKGROUND], [0.9]))
        assert float(loss) == pytest.approx(1.5 * 0.01 * -math.log(0.9), abs=1e-9)

    def test_zero_probability_is_finite(self):
        assert math.isfinite(float(focal_loss(batch([[1.0, 0.0]], [MITOSIS], [0.0]))))

    def test_reduces_to_nll(self):
        params = HybridLossParams(alpha_mitosis=1.0, alpha_background=1.0, gamma=0.0)
        r = np.random.default_rng(0)
        for _ in range(100):
            n = int(r.integers(1, 32))
            labels = r.integers(0, 2, size=n)
            probs = r.uniform(0.01, 1.0, size=n)
            loss = focal_loss(batch(np.ones((n, 2)), labels, probs), params)
            assert float(loss) == pytest.approx(float(np.mean(-np.log(probs))), abs=1e-9)

    def test_soft_targets_match_hard_focal(self):
        logits = torch.tensor([[0.3, -1.2], [2.0, 0.5]], dtype=torch.float64)
        labels = torch.tensor([MITOSIS, BACKGROUND])
        probs = logits.softmax(1).gather(1, labels[:, None]).squeeze(1)
        hard = focal_loss(batch(np.ones((2, 2)), labels, probs))
        soft = soft_focal_loss(logits, F.one_hot(labels, 2).double())
        assert float(soft) == pytest.approx(float(hard), abs=1e-12)


class TestContrastiveLoss:
    def test_identical_pair(self):
        loss = contrastive_loss(batch([[1.0, 0.0], [1.0, 0.0]], [1, 1], [1.0, 1.0]))
        assert float(loss) == pytest.approx(math.log(2), abs=1e-9)

    def test_opposite_pair(self):
        loss = contrastive_loss(batch([[1.0, 0.0], [-1.0, 0.0]], [1, 1], [1.0, 1.0]))
        expected = -math.log(math.exp(-5) / (math.exp(5) + math.exp(-5)))
        assert float(loss) == pytest.approx(expected, abs=1e-9)
        assert float(loss) == pytest.approx(10.0000454, abs=1e-6)

    def test_high_temperature_limit(self, rng):
        params = HybridLossParams(temperature=1e6)
        n = 8
        loss = contrastive_loss(batch(rng.normal(size=(n, 5)), [0, 1] * 4, np.ones(n)), params)
        assert float(loss) == pytest.approx(math.log(n), abs=1e-4)

    def test_exclude_self_switch(self):
        params = HybridLossParams(exclude_self=True)
        loss = contrastive_loss(batch([[1.0, 0.0], [1.0, 0.0]], [1, 1], [1.0, 1.0]), params)
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_no_positive_gives_zero(self):
        loss = contrastive_loss(batch([[1.0, 0.0], [0.0, 1.0]], [0, 1], [1.0, 1.0]))
        assert float(loss) == 0.0

    def test_explicit_positive_index(self):
        b = batch([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], [1, 1, 1], [1.0, 1.0, 1.0])
        loss = contrastive_loss(b, positive_index=torch.tensor([2, 0, 0]))
        logits = torch.tensor([[5.0, 0.0, 5.0], [0.0, 5.0, 0.0], [5.0, 0.0, 5.0]], dtype=torch.float64)
        expected = (torch.logsumexp(logits, 1) - torch.tensor([5.0, 0.0, 5.0], dtype=torch.float64)).mean()
        assert float(loss) == pytest.approx(float(expected), abs=1e-12)

    def test_sampled_positives_share_class(self):
        labels = torch.tensor([0, 1, 0, 1, 1, 2])
        picks = sample_positives(labels, torch.Generator().manual_seed(0))
        for i, j in enumerate(picks.tolist()):
            if labels[i] == 2:
                assert j == -1
            else:
                assert j != i and labels[j] == labels[i]


class TestTotalLoss:
    def test_lambda_zero_is_focal(self, rng):
        b = batch(rng.normal(size=(6, 4)), [0, 1, 0, 1, 1, 0], rng.uniform(0.1, 1, 6))
        params = HybridLossParams(lam=0.0)
        assert float(total_loss(b, params)) == float(focal_loss(b, params))

    def test_additive(self, rng):
        b = batch(rng.normal(size=(6, 4)), [0, 1, 0, 1, 1, 0], rng.uniform(0.1, 1, 6))
        positives = torch.tensor([2, 3, 0, 4, 1, 2])
        params = HybridLossParams(lam=0.5)
        total = total_loss(b, params, positive_index=positives)
        expected = focal_loss(b, params) + 0.5 * contrastive_loss(b, params, positive_index=positives)
        assert float(total) == pytest.approx(float(expected), abs=1e-12)

    def test_composition_with_defaults(self):
        b = batch([[1.0, 0.0], [1.0, 0.0]], [1, 1], [1.0, 1.0])
        assert float(total_loss(b)) == pytest.approx(math.log(2), abs=1e-9)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        raw = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
        logits = torch.randn(6, 2, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 1, 0, 1, 1, 0])
        positives = torch.tensor([2, 3, 0, 4, 1, 2])

        def fn(raw, logits):
            probs = logits.softmax(1).gather(1, labels[:, None]).squeeze(1)
            return total_loss(EmbeddingBatch(F.normalize(raw, dim=1), labels, probs),
                              positive_index=positives)

        assert torch.autograd.gradcheck(fn, (raw, logits), eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_training_loss_parts(self):
        torch.manual_seed(0)
        logits = torch.randn(4, 2)
        emb = F.normalize(torch.randn(4, 8), dim=1)
        targets = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.3, 0.7]])
        total, focal, contrast = hybrid_training_loss(logits, emb, targets, HybridLossParams(),
                                                      torch.Generator().manual_seed(0))
        assert float(total) == pytest.approx(float(focal + contrast), rel=1e-6)


class TestClassify:
    def test_empty(self):
        assert classify(ConstantLogits(), []).shape == (0,)

    def test_constant_logits_give_half(self):
        crops = [Candidate(np.zeros((64, 64, 3), dtype=np.float32)) for _ in range(5)]
        np.testing.assert_array_equal(classify(ConstantLogits(), crops), np.full(5, 0.5))

    def test_wrong_crop_size(self):
        with pytest.raises(ValueError, match="64x64x3"):
            classify(ConstantLogits(), [Candidate(np.zeros((32, 32, 3), dtype=np.float32))])

    def test_threshold_boundary_survives(self):
        crops = [Candidate(np.zeros((64, 64, 3), dtype=np.float32)) for _ in range(3)]
        kept = filter_candidates(crops, np.array([0.49, 0.5, 0.51]), 0.5)
        assert kept == crops[1:]

    def test_model_scores_in_unit_interval(self, rng):
        torch.manual_seed(0)
        model = build_classifier(ClassifierConfig())
        pixels = rng.integers(0, 255, size=(128, 128, 3), dtype=np.uint8)
        dets = [Detection(Box(10, 10, 50, 50), 0.9), Detection(Box(100, 100, 40, 40), 0.3)]
        scores = classify(model, candidates_from_detections(pixels, dets))
        assert scores.shape == (2,) and ((scores >= 0) & (scores <= 1)).all()

    def test_forward_outputs(self):
        torch.manual_seed(0)
        model = build_classifier(ClassifierConfig())
        logits, emb = model(torch.randn(3, 3, 64, 64))
        assert logits.shape == (3, 2)
        torch.testing.assert_close(emb.norm(dim=1), torch.ones(3))

    def test_checkpoint_round_trip(self, tmp_path):
        torch.manual_seed(0)
        model = build_classifier(ClassifierConfig(threshold=0.6)).eval()
        path = str(tmp_path / "classifier.pt")
        save_classifier(model, path)
        loaded = load_classifier(path)
        assert loaded.cfg == model.cfg
        x = torch.randn(2, 3, 64, 64)
        with torch.no_grad():
            assert torch.equal(model(x)[0], loaded(x)[0])


class TestCrops:
    def test_crop_clipped_to_image(self):
        pixels = np.zeros((100, 100, 3), dtype=np.uint8)
        assert crop_region(pixels, Box(-20, 90, 50, 50)).shape == (10, 30, 3)

    def test_preprocess_shape_and_normalization(self):
        pixels = np.full((100, 100, 3), 255, dtype=np.uint8)
        crop = preprocess_crop(pixels, Box(10, 10, 30, 30))
        assert crop.shape == (64, 64, 3)
        np.testing.assert_allclose(crop[0, 0], (1 - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225]),
                                   rtol=1e-5)

    def test_mining_labels(self, rng):
        image = rng.integers(0, 255, size=(256, 256, 3), dtype=np.uint8)
        gt = [Box(40, 40, 50, 50)]
        far = Detection(Box(180, 180, 50, 50), 0.5)
        near = Detection(Box(45, 42, 50, 50), 0.5)
        samples = mine_candidates([image], [gt], rng, lambda i, px: [far, near], negatives_per_image=3)
        labels = [int(s.target.argmax()) for s in samples]
        assert labels == [MITOSIS, BACKGROUND, MITOSIS, BACKGROUND, BACKGROUND, BACKGROUND]
        assert all(s.image.shape == (64, 64, 3) and s.image.dtype == np.uint8 for s in samples)


class TestTraining:
    def test_needs_both_classes(self, rng):
        crops = [ClassificationSample(rng.integers(0, 255, (64, 64, 3), dtype=np.uint8), one_hot(MITOSIS))]
        schedule = TrainSchedule(epochs=1, batch_size=4, lr0=3e-4, lrf=1e-6, weight_decay=1e-5, patience=60)
        with pytest.raises(ValueError, match="both classes"):
            train_classifier(build_classifier(), crops, [], HybridLossParams(), schedule)

    @pytest.mark.parametrize("labels, warned", [([BACKGROUND] * 4, True), ([BACKGROUND, MITOSIS] * 2, False)])
    def test_warns_without_mitosis_in_validation(self, rng, caplog, labels, warned):
        torch.manual_seed(0)
        samples = [ClassificationSample(rng.integers(0, 255, size=(64, 64, 3), dtype=np.uint8), one_hot(label))
                   for label in labels]
        with caplog.at_level("WARNING", logger="classifier"):
            evaluate_classifier(build_classifier().eval(), samples)
        assert ("No mitosis crops" in caplog.text) == warned

    def test_early_stop_after_frozen_f1(self):
        stopper = EarlyStopping(patience=60)
        k = 12
        history = [0.1 * e for e in range(k + 1)] + [1.2] * 100
        stopped_at = None
        for epoch, f1 in enumerate(history):
            if stopper.step(epoch, f1):
                stopped_at = epoch
                break
        assert stopper.best_epoch == k
        assert stopped_at == k + 60

    def test_one_step_decreases_batch_loss(self, rng):
        torch.manual_seed(0)
        model = build_classifier()
        model.train()
        x = torch.randn(8, 3, 64, 64)
        targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]] * 4)
        params = HybridLossParams()
        positives = torch.tensor([2, 3, 4, 5, 6, 7, 0, 1])

        def loss():
            logits, emb = model(x)
            labels = targets.argmax(1)
            probs = logits.softmax(1).gather(1, labels[:, None]).squeeze(1)
            return total_loss(EmbeddingBatch(emb, labels, probs), params, positive_index=positives)

        optimizer = torch.optim.SGD(model.parameters(), lr=1e-4)
        before = loss()
        optimizer.zero_grad()
        before.backward()
        optimizer.step()
        with torch.no_grad():
            after = loss()
        assert float(after) < float(before)

    @pytest.mark.slow
    def test_separates_synthetic_crops(self, rng):
        from data_io import generate_synthetic
        from tiling import crop_annotations, make_grid

        images, annotations = generate_synthetic(6, size=512, blobs_per_image=12, seed=5)
        pixels, boxes = [], []
        for item in images:
            anns = [a for a in annotations if a.image_id == item.image_id]
            crops = crop_annotations(make_grid(512, 512, image_id=item.image_id), anns)
            pixels.append(item.pixels)
            boxes.append([a.box for a in crops[f"{item.image_id}_x0_y0"]])
        crops = mine_candidates(pixels, boxes, rng, negatives_per_image=12)
        train, held = crops[: len(crops) * 2 // 3], crops[len(crops) * 2 // 3:]
        schedule = TrainSchedule(epochs=15, batch_size=32, lr0=1e-3, lrf=1e-5, weight_decay=1e-5, patience=60)
        model, history = train_classifier(build_classifier(), train, held, HybridLossParams(), schedule)
        scores = classify(model, [Candidate(preprocess_crop(c.image, Box(0, 0, 64, 64))) for c in held])
        labels = np.array([c.target.argmax() == MITOSIS for c in held])
        pos, neg = scores[labels], scores[~labels]
        auc = np.mean(pos[:, None] > neg[None, :]) + 0.5 * np.mean(pos[:, None] == neg[None, :])
        assert auc >= 0.95
