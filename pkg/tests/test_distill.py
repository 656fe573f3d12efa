"""
Testing file for the `distill` package
"""

import math

import pytest
import torch
from conftest import IMAGE_SIZE, make_gt, tiny_detector_config

from clockdistill.detector.models import Detector
from clockdistill.detector.schemas import BackboneFeatures, Memory, StagePredictions
from clockdistill.detector.services import build_group_mask, detection_loss
from clockdistill.distill.models import Adapter, FrozenEmbedders
from clockdistill.distill.schemas import (
    DistillConfig,
    QueryOrigin,
    Recipe,
    TargetAwareQuerySet,
)
from clockdistill.distill.services import (
    backbone_feature_distill_loss,
    build_target_queries,
    confidence_weights,
    feature_distill_loss,
    logit_distill_loss,
    materialize_queries,
    memory_distill_loss,
    total_loss,
)
from clockdistill.exceptions import (
    ConfigurationError,
    NonFiniteLossError,
    QuerySetMismatchError,
    ShapeMismatchError,
)
from clockdistill.geometry.schemas import MaskPair
from clockdistill.geometry.services import build_multiscale_masks
from clockdistill.schemas import GridShape


def memory_of(values: torch.Tensor, shape: GridShape) -> Memory:
    return Memory(
        values=values,
        positional_encoding=torch.zeros(values.shape[1:], dtype=values.dtype),
        level_shapes=[shape],
    )


def masks_of(location: list[float], scale: list[float], shape: GridShape) -> MaskPair:
    return MaskPair(
        location=torch.tensor(location, dtype=torch.float64),
        scale=torch.tensor(scale, dtype=torch.float64),
        level_shapes=[shape],
    )


def predictions(
    logits: torch.Tensor, boxes: torch.Tensor, digest: str | None = "q"
) -> StagePredictions:
    """
    (B, E, G, ...) distillation columns tagged with a query digest
    """
    return StagePredictions(
        class_logits=logits, boxes=boxes, num_regular=0, query_digest=digest
    )


class TestBackboneFeatureLoss:
    """
    Tests the feature-map distillation baseline
    """

    def test_zero_when_equal(self) -> None:
        levels = [torch.randn(2, 4, 3, 3)]
        features = BackboneFeatures(levels=levels)
        assert float(backbone_feature_distill_loss(features, features)) == 0.0

    def test_single_cell(self) -> None:
        teacher = BackboneFeatures(levels=[torch.full((1, 1, 1, 1), 2.0)])
        student = BackboneFeatures(levels=[torch.zeros(1, 1, 1, 1)])
        assert float(backbone_feature_distill_loss(teacher, student)) == 4.0

    def test_replication_invariant(self) -> None:
        teacher = torch.randn(1, 2, 3, 3)
        student = torch.randn(1, 2, 3, 3)

        def doubled(x: torch.Tensor) -> torch.Tensor:
            x = x.repeat(1, 2, 1, 1)
            return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)

        small = backbone_feature_distill_loss(
            BackboneFeatures(levels=[teacher]), BackboneFeatures(levels=[student])
        )
        large = backbone_feature_distill_loss(
            BackboneFeatures(levels=[doubled(teacher)]),
            BackboneFeatures(levels=[doubled(student)]),
        )
        assert float(large) == pytest.approx(float(small), rel=1e-6)

    def test_adapter_maps_channels(self) -> None:
        adapter = Adapter(8, 8, student_channels=4, teacher_channels=6, num_levels=1)
        teacher = BackboneFeatures(levels=[torch.randn(1, 6, 2, 2)])
        student = BackboneFeatures(levels=[torch.randn(1, 4, 2, 2)])
        assert float(backbone_feature_distill_loss(teacher, student, adapter)) > 0

    def test_irreconcilable(self) -> None:
        teacher = BackboneFeatures(levels=[torch.randn(1, 6, 2, 2)])
        student = BackboneFeatures(levels=[torch.randn(1, 4, 2, 2)])
        with pytest.raises(ShapeMismatchError):
            backbone_feature_distill_loss(teacher, student)


class TestMemoryLoss:
    """
    Tests the location and scale weighted memory loss
    """

    shape = GridShape(height=1, width=2)

    def test_hand_computed(self) -> None:
        teacher = memory_of(torch.tensor([[[1.0], [0.0]]], dtype=torch.float64), self.shape)
        student = memory_of(torch.tensor([[[0.0], [1.0]]], dtype=torch.float64), self.shape)
        masks = masks_of([1, 0], [1, 1], self.shape)
        loss = memory_distill_loss(teacher, student, masks, alpha=5e-5, beta=1e-7)
        assert float(loss) == pytest.approx(5.01e-5, rel=1e-12)

    def test_zero_when_equal(self) -> None:
        values = torch.randn(2, 2, 3, dtype=torch.float64)
        masks = masks_of([1, 0], [0.5, 1], self.shape)
        memory = memory_of(values, self.shape)
        assert float(memory_distill_loss(memory, memory, masks, 1.0, 1.0)) == 0.0

    def test_equal_weights_drop_location(self) -> None:
        teacher = torch.randn(1, 2, 3, dtype=torch.float64)
        student = torch.randn(1, 2, 3, dtype=torch.float64)
        scale = [0.25, 2.0]
        loss = memory_distill_loss(
            memory_of(teacher, self.shape),
            memory_of(student, self.shape),
            masks_of([1, 0], scale, self.shape),
            alpha=0.3,
            beta=0.3,
        )
        expected = 0.3 * (
            (torch.tensor(scale, dtype=torch.float64)[None, :, None] * (teacher - student) ** 2)
        ).sum()
        assert float(loss) == pytest.approx(float(expected))

    def test_matches_feature_loss(self) -> None:
        """
        alpha = beta = 1/(CHW), S = 1 and D = C turn the memory loss into the
        feature-map mean squared error
        """
        shape = GridShape(height=3, width=4)
        teacher = torch.randn(1, 5, 3, 4, dtype=torch.float64)
        student = torch.randn(1, 5, 3, 4, dtype=torch.float64)
        weight = 1 / (5 * 3 * 4)
        location = [float(i % 2) for i in range(12)]
        masks = masks_of(location, [1.0] * 12, shape)
        memory_loss = memory_distill_loss(
            memory_of(teacher.flatten(2).transpose(1, 2), shape),
            memory_of(student.flatten(2).transpose(1, 2), shape),
            masks,
            alpha=weight,
            beta=weight,
        )
        feature_loss = backbone_feature_distill_loss(
            BackboneFeatures(levels=[teacher]), BackboneFeatures(levels=[student])
        )
        assert float(memory_loss) == pytest.approx(float(feature_loss), rel=1e-12)

    def test_adapter_for_width_mismatch(self) -> None:
        adapter = Adapter(3, 5, 1, 1, num_levels=1).double()
        teacher = memory_of(torch.randn(1, 2, 5, dtype=torch.float64), self.shape)
        student = memory_of(torch.randn(1, 2, 3, dtype=torch.float64), self.shape)
        masks = masks_of([1, 0], [1, 1], self.shape)
        assert float(memory_distill_loss(teacher, student, masks, 1.0, 1.0, adapter)) > 0
        with pytest.raises(ShapeMismatchError):
            memory_distill_loss(teacher, student, masks, 1.0, 1.0)

    def test_point_count_mismatch(self) -> None:
        shape = GridShape(height=1, width=3)
        memory = memory_of(torch.randn(1, 3, 2), shape)
        with pytest.raises(ShapeMismatchError):
            memory_distill_loss(memory, memory, masks_of([1, 0], [1, 1], self.shape), 1, 1)

    def test_gradcheck(self) -> None:
        shape = GridShape(height=2, width=4)
        gts = [make_gt(0, 0.3, 0.4, 0.4, 0.6)]
        masks = build_multiscale_masks(gts, [shape])
        teacher = memory_of(torch.randn(1, 8, 4, dtype=torch.float64), shape)
        student = torch.randn(1, 8, 4, dtype=torch.float64, requires_grad=True)

        def loss(values: torch.Tensor) -> torch.Tensor:
            return memory_distill_loss(
                teacher, memory_of(values, shape), masks, alpha=0.7, beta=0.2
            )

        assert torch.autograd.gradcheck(loss, (student,), eps=1e-5, rtol=1e-3)

    def test_recipe_sum(self) -> None:
        shape = GridShape(height=1, width=2)
        teacher = (
            BackboneFeatures(levels=[torch.randn(1, 3, 1, 2)]),
            memory_of(torch.randn(1, 2, 3), shape),
        )
        student = (
            BackboneFeatures(levels=[torch.randn(1, 3, 1, 2)]),
            memory_of(torch.randn(1, 2, 3), shape),
        )
        masks = masks_of([1, 0], [1, 1], shape)
        config = DistillConfig(alpha=1.0, beta=0.5)
        backbone = feature_distill_loss(Recipe.BACKBONE_ONLY, teacher, student, masks, config)
        memory = feature_distill_loss(Recipe.MEMORY_ONLY, teacher, student, masks, config)
        both = feature_distill_loss(Recipe.BOTH, teacher, student, masks, config)
        assert float(both) == pytest.approx(float(backbone) + float(memory), rel=1e-6)


class TestTargetQueries:
    """
    Tests construction of the frozen target-aware queries
    """

    def embedders(self, padding: int = 300) -> FrozenEmbedders:
        return FrozenEmbedders(num_classes=3, query_dim=8, num_padding_points=padding, seed=0)

    def test_copy_major_layout(self) -> None:
        gts = [make_gt(2, 0.3, 0.3, 0.2, 0.2), make_gt(0, 0.7, 0.6, 0.3, 0.1)]
        config = DistillConfig(num_copies=3, include_kddetr_points=False)
        queries = build_target_queries(gts, self.embedders(), config, seed=0)
        assert len(queries) == 6
        assert queries.group_id.tolist() == [0, 0, 1, 1, 2, 2]
        assert queries.copy_index.tolist() == [0, 0, 1, 1, 2, 2]
        assert queries.class_ids.tolist() == [2, 0, 2, 0, 2, 0]
        assert queries.origin == [QueryOrigin.GROUND_TRUTH] * 6
        table = self.embedders().class_embedding_table
        assert torch.equal(queries.content[0], table[2])
        assert torch.allclose(
            queries.positional_params[3].double(),
            torch.tensor([0.7, 0.6, 0.3, 0.1], dtype=torch.float64),
        )

    def test_padding_only(self) -> None:
        queries = build_target_queries([], self.embedders(), DistillConfig(), seed=0)
        assert len(queries) == 300
        assert set(queries.origin) == {QueryOrigin.SHARED_RANDOM}
        assert (queries.class_ids == -1).all()

    def test_padding_fills_budget(self) -> None:
        gts = [make_gt(1, 0.5, 0.5, 0.2, 0.2)]
        config = DistillConfig(num_distill_points=10, num_copies=3)
        queries = build_target_queries(gts, self.embedders(), config, seed=0)
        assert len(queries) == 10
        assert queries.origin.count(QueryOrigin.GROUND_TRUTH) == 3
        # padding forms one group apart from every copy
        assert queries.group_id[3:].tolist() == [3] * 7

    def test_copies_truncated(self) -> None:
        gts = [make_gt(i % 3, 0.1 + 0.15 * i, 0.5, 0.1, 0.1) for i in range(5)]
        config = DistillConfig(num_distill_points=8, num_copies=3)
        queries = build_target_queries(gts, self.embedders(), config, seed=0)
        assert queries.origin.count(QueryOrigin.GROUND_TRUTH) == 5
        assert len(queries) == 8

    def test_never_below_one_copy(self) -> None:
        gts = [make_gt(0, 0.2 * (i + 1), 0.5, 0.1, 0.1) for i in range(4)]
        config = DistillConfig(num_distill_points=2, num_copies=3)
        queries = build_target_queries(gts, self.embedders(), config, seed=0)
        assert queries.origin == [QueryOrigin.GROUND_TRUTH] * 4

    def test_byte_identical(self) -> None:
        gts = [make_gt(1, 0.4, 0.5, 0.3, 0.2)]
        config = DistillConfig(num_distill_points=12, box_jitter=0.2)
        first = build_target_queries(gts, self.embedders(), config, seed=11)
        second = build_target_queries(gts, self.embedders(), config, seed=11)
        assert first.to_bytes() == second.to_bytes()
        assert first.digest() == second.digest()
        other = build_target_queries(gts, self.embedders(), config, seed=12)
        assert other.digest() != first.digest()

    def test_jitter_separates_copies(self) -> None:
        gts = [make_gt(1, 0.4, 0.5, 0.3, 0.2)]
        plain = build_target_queries(
            gts, self.embedders(), DistillConfig(include_kddetr_points=False), seed=0
        )
        assert torch.equal(plain.positional_params[0], plain.positional_params[2])
        jittered = build_target_queries(
            gts,
            self.embedders(),
            DistillConfig(include_kddetr_points=False, box_jitter=0.3),
            seed=0,
        )
        assert not torch.equal(jittered.positional_params[0], jittered.positional_params[2])
        assert ((jittered.positional_params >= 0) & (jittered.positional_params <= 1)).all()

    def test_materialize_and_lift(self) -> None:
        embedders = FrozenEmbedders(3, 8, 4, seed=0, target_widths=[8, 16])
        queries = build_target_queries(
            [make_gt(0, 0.5, 0.5, 0.2, 0.2)],
            embedders,
            DistillConfig(num_distill_points=6),
            seed=0,
        )
        native = materialize_queries(queries, embedders, 8)
        expected = queries.content + embedders.box_mlp(queries.positional_params)
        assert torch.allclose(native, expected)
        assert materialize_queries(queries, embedders, 16).shape == (6, 16)
        with pytest.raises(ConfigurationError):
            materialize_queries(queries, embedders, 12)

    def test_zero_classes(self) -> None:
        with pytest.raises(ConfigurationError):
            FrozenEmbedders(num_classes=0, query_dim=8, num_padding_points=1)

    @pytest.mark.parametrize("class_id", [3, 7])
    def test_class_id_out_of_range(self, class_id: int) -> None:
        """
        The background index and anything past it are not valid ground truth classes
        """
        with pytest.raises(ConfigurationError):
            build_target_queries(
                [make_gt(class_id, 0.5, 0.5, 0.2, 0.2)], self.embedders(), DistillConfig(), seed=0
            )


class TestFrozenEmbedders:
    """
    Tests that the embedders are seeded, frozen and leave the global RNG alone
    """

    def test_seeded(self) -> None:
        first = FrozenEmbedders(3, 8, 5, seed=4)
        second = FrozenEmbedders(3, 8, 5, seed=4)
        for (name, a), b in zip(first.state_dict().items(), second.state_dict().values()):
            assert torch.equal(a, b), name

    def test_global_rng_untouched(self) -> None:
        torch.manual_seed(1)
        expected = torch.rand(3)
        torch.manual_seed(1)
        FrozenEmbedders(3, 8, 5, seed=4)
        assert torch.equal(torch.rand(3), expected)

    def test_no_trainable_parameters(self) -> None:
        assert not any(p.requires_grad for p in FrozenEmbedders(3, 8, 5).parameters())

    def test_bit_stable_under_training(self) -> None:
        torch.manual_seed(0)
        model = Detector(tiny_detector_config())
        embedders = FrozenEmbedders(3, 16, 4, seed=0)
        before = {k: v.clone() for k, v in embedders.state_dict().items()}
        optimizer = torch.optim.AdamW(
            list(model.parameters()) + list(embedders.parameters()), lr=1e-3
        )
        gts = [make_gt(1, 0.5, 0.5, 0.4, 0.4)]
        images = torch.rand(1, 3, IMAGE_SIZE, IMAGE_SIZE)
        config = DistillConfig(num_distill_points=6)
        for step in range(100):
            queries = build_target_queries(gts, embedders, config, seed=step)
            content = materialize_queries(queries, embedders, 16)
            mask = build_group_mask(6, queries.group_id)
            _, memory = model.encode(images)
            out = model.decode(memory, content, queries.positional_params, mask)
            loss = detection_loss(out, [gts], model.config) + out.extra().boxes.sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        for name, value in embedders.state_dict().items():
            assert torch.equal(value, before[name]), name


class TestConfidenceWeights:
    """
    Tests teacher confidence weights
    """

    def test_uniform(self) -> None:
        w = confidence_weights(torch.zeros(1, 2, 3))
        assert torch.allclose(w, torch.full((1, 2), 1 / 3))

    def test_peaked(self) -> None:
        w = confidence_weights(torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64))
        assert float(w) == pytest.approx(math.exp(2) / (math.exp(2) + 2))
        assert float(w) == pytest.approx(0.7870, abs=1e-4)

    def test_shift_invariant_and_in_range(self) -> None:
        logits = torch.randn(2, 3, 5, 4, dtype=torch.float64)
        w = confidence_weights(logits)
        assert torch.allclose(w, confidence_weights(logits + 7.5))
        assert ((w > 0) & (w <= 1)).all()

    def test_foreground_only(self) -> None:
        logits = torch.tensor([0.0, 1.0, 5.0])
        full = confidence_weights(logits)
        foreground = confidence_weights(logits, foreground_only=True)
        assert float(foreground) < float(full)
        assert float(foreground) == pytest.approx(float(torch.softmax(logits, 0)[1]))


class TestLogitLoss:
    """
    Tests the consistent logit distillation loss
    """

    def test_hand_computed(self) -> None:
        logits = torch.tensor([[[[0.3, -0.2, 1.0, 0.0]]]], dtype=torch.float64)
        teacher = predictions(logits, torch.tensor([[[[0.5, 0.5, 0.2, 0.2]]]]).double())
        student = predictions(logits.clone(), torch.tensor([[[[0.5, 0.5, 0.4, 0.4]]]]).double())
        config = DistillConfig(temperature=1.0)
        loss = logit_distill_loss(teacher, student, config, weights=torch.ones(1, 1, 1))
        assert float(loss) == pytest.approx(3.5)

    def test_zero_at_fixed_point(self) -> None:
        logits = torch.randn(2, 2, 5, 4, dtype=torch.float64)
        boxes = torch.rand(2, 2, 5, 4, dtype=torch.float64) * 0.5 + 0.25
        teacher = predictions(logits, boxes)
        student = predictions(logits.clone(), boxes.clone())
        assert float(logit_distill_loss(teacher, student, DistillConfig())) == pytest.approx(
            0.0, abs=1e-9
        )

    def test_positive_otherwise(self) -> None:
        logits = torch.randn(1, 1, 3, 4, dtype=torch.float64)
        boxes = torch.rand(1, 1, 3, 4, dtype=torch.float64) * 0.5 + 0.25
        teacher = predictions(logits, boxes)
        student = predictions(logits + torch.randn_like(logits), boxes)
        assert float(logit_distill_loss(teacher, student, DistillConfig())) > 0

    def test_zero_weights(self) -> None:
        teacher = predictions(torch.randn(1, 1, 2, 4), torch.rand(1, 1, 2, 4) * 0.5 + 0.2)
        student = predictions(torch.randn(1, 1, 2, 4), torch.rand(1, 1, 2, 4) * 0.5 + 0.2)
        config = DistillConfig(lambda_cls=0, lambda_l1=0, lambda_giou=0)
        assert float(logit_distill_loss(teacher, student, config)) == 0.0

    def test_kl_nonnegative(self) -> None:
        generator = torch.Generator().manual_seed(0)
        boxes = torch.full((1, 1, 1, 4), 0.5, dtype=torch.float64)
        config = DistillConfig(lambda_l1=0, lambda_giou=0)
        for _ in range(1000):
            t = torch.randn(1, 1, 1, 4, generator=generator, dtype=torch.float64) * 3
            s = torch.randn(1, 1, 1, 4, generator=generator, dtype=torch.float64) * 3
            loss = logit_distill_loss(predictions(t, boxes), predictions(s, boxes), config)
            assert float(loss) >= -1e-12

    def test_temperature_scaling(self) -> None:
        t = torch.randn(1, 1, 2, 4, dtype=torch.float64)
        s = torch.randn(1, 1, 2, 4, dtype=torch.float64)
        boxes = torch.full((1, 1, 2, 4), 0.5, dtype=torch.float64)
        weights = torch.ones(1, 1, 2)
        base = DistillConfig(lambda_l1=0, lambda_giou=0, temperature=3.0)
        scaled = logit_distill_loss(predictions(t, boxes), predictions(s, boxes), base, weights)
        unscaled = logit_distill_loss(
            predictions(t, boxes),
            predictions(s, boxes),
            base.model_copy(update={"scale_kl_by_t2": False}),
            weights,
        )
        assert float(scaled) == pytest.approx(9 * float(unscaled))

    def test_final_stage_when_depths_differ(self) -> None:
        t_logits = torch.randn(1, 3, 2, 4, dtype=torch.float64)
        t_boxes = torch.rand(1, 3, 2, 4, dtype=torch.float64) * 0.5 + 0.25
        s_logits = torch.randn(1, 2, 2, 4, dtype=torch.float64)
        s_boxes = torch.rand(1, 2, 2, 4, dtype=torch.float64) * 0.5 + 0.25
        config = DistillConfig()
        mixed = logit_distill_loss(
            predictions(t_logits, t_boxes), predictions(s_logits, s_boxes), config
        )
        final = logit_distill_loss(
            predictions(t_logits[:, -1:], t_boxes[:, -1:]),
            predictions(s_logits[:, -1:], s_boxes[:, -1:]),
            config,
        )
        assert float(mixed) == pytest.approx(float(final))

    def test_query_set_mismatch(self) -> None:
        teacher = predictions(torch.randn(1, 1, 2, 4), torch.rand(1, 1, 2, 4), digest="a")
        student = predictions(torch.randn(1, 1, 2, 4), torch.rand(1, 1, 2, 4), digest="b")
        with pytest.raises(QuerySetMismatchError):
            logit_distill_loss(teacher, student, DistillConfig())
        with pytest.raises(QuerySetMismatchError):
            logit_distill_loss(
                teacher,
                predictions(torch.randn(1, 1, 3, 4), torch.rand(1, 1, 3, 4), digest="a"),
                DistillConfig(),
            )

    def test_gradcheck(self) -> None:
        generator = torch.Generator().manual_seed(2)
        t_logits = torch.randn(1, 1, 2, 4, generator=generator, dtype=torch.float64)
        t_boxes = torch.rand(1, 1, 2, 4, generator=generator, dtype=torch.float64) * 0.4 + 0.3
        s_logits = torch.randn(1, 1, 2, 4, generator=generator, dtype=torch.float64)
        s_boxes = torch.rand(1, 1, 2, 4, generator=generator, dtype=torch.float64) * 0.4 + 0.3
        s_logits.requires_grad_(True)
        s_boxes.requires_grad_(True)
        teacher = predictions(t_logits, t_boxes)

        def loss(logits: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
            return logit_distill_loss(teacher, predictions(logits, boxes), DistillConfig())

        assert torch.autograd.gradcheck(loss, (s_logits, s_boxes), eps=1e-5, rtol=1e-3)


class TestNoTeacherGradient:
    """
    Tests that distillation never pushes gradient into the teacher
    """

    def test_teacher_untouched(self) -> None:
        torch.manual_seed(0)
        teacher = Detector(tiny_detector_config(embed_dim=32, backbone_channels=16)).eval()
        student = Detector(tiny_detector_config())
        adapter = Adapter(16, 32, 8, 16, num_levels=1)
        embedders = FrozenEmbedders(3, 32, 6, seed=0, target_widths=[32, 16])
        images = torch.rand(1, 3, IMAGE_SIZE, IMAGE_SIZE)
        gts = [make_gt(0, 0.5, 0.5, 0.4, 0.3)]
        config = DistillConfig(num_distill_points=6)

        t_features, t_memory = teacher.encode(images)
        s_features, s_memory = student.encode(images)
        masks = build_multiscale_masks(gts, t_memory.level_shapes)
        queries = build_target_queries(gts, embedders, config, seed=0)
        mask = build_group_mask(6, queries.group_id)
        digest = queries.digest()
        t_out = teacher.decode(
            t_memory,
            materialize_queries(queries, embedders, 32),
            queries.positional_params,
            mask,
        ).extra(digest)
        s_out = student.decode(
            s_memory,
            materialize_queries(queries, embedders, 16),
            queries.positional_params,
            mask,
        ).extra(digest)
        loss = (
            feature_distill_loss(
                Recipe.BOTH, (t_features, t_memory), (s_features, s_memory), masks, config, adapter
            )
            + logit_distill_loss(t_out, s_out, config)
        )
        loss.backward()
        assert all(p.grad is None or not p.grad.any() for p in teacher.parameters())
        assert any(p.grad is not None and p.grad.any() for p in student.parameters())


class TestTotalLoss:
    """
    Tests total loss assembly
    """

    def test_sum(self) -> None:
        assert total_loss(0.0, 0.0, 1.25) == 1.25
        a, b, c = torch.tensor(0.5), torch.tensor(0.25), torch.tensor(2.0)
        assert torch.equal(total_loss(a, b, c), a + b + c)

    def test_non_finite(self) -> None:
        with pytest.raises(NonFiniteLossError) as error:
            total_loss(torch.tensor(float("nan")), 0.0, 1.0)
        assert math.isnan(error.value.diagnostics["l_lcmd"])
        assert error.value.diagnostics["l_det"] == 1.0


class TestQuerySetSchema:
    """
    Tests the query set container
    """

    def test_row_mismatch(self) -> None:
        with pytest.raises(ValueError):
            TargetAwareQuerySet(
                content=torch.zeros(2, 4),
                positional_params=torch.zeros(3, 4),
                group_id=torch.zeros(2, dtype=torch.long),
                copy_index=torch.zeros(2, dtype=torch.long),
                class_ids=torch.zeros(2, dtype=torch.long),
                origin=[QueryOrigin.GROUND_TRUTH] * 2,
            )
