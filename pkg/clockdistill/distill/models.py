"""
Torch modules used only during distillation
"""

import torch
from torch import nn

from clockdistill.exceptions import ConfigurationError


class FrozenEmbedders(nn.Module):
    """
    Class-label embedding table and box MLP that turn ground truths into
    decoder queries. Built from a fixed seed, never trained, and shared by
    teacher and student. Also owns the bank of shared random padding points.
    """

    def __init__(
        self,
        num_classes: int,
        query_dim: int,
        num_padding_points: int,
        seed: int = 0,
        target_widths: list[int] | None = None,
    ) -> None:
        """
        :param num_classes: foreground classes C
        :param query_dim: width D_q of the produced queries
        :param num_padding_points: size of the shared random bank
        :param seed: fixes every frozen tensor
        :param target_widths: detector widths the queries are lifted to
        """
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError("Target-aware queries need at least one class")
        self.num_classes = num_classes
        self.query_dim = query_dim
        # private RNG stream, the global one is left untouched
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.class_embedding = nn.Embedding(num_classes, query_dim)
            self.box_mlp = nn.Sequential(
                nn.Linear(4, query_dim), nn.ReLU(), nn.Linear(query_dim, query_dim)
            )
            self.register_buffer(
                "padding_content", torch.randn(num_padding_points, query_dim)
            )
            centers = torch.rand(num_padding_points, 2) * 0.9 + 0.05
            sizes = torch.rand(num_padding_points, 2) * 0.45 + 0.05
            self.register_buffer("padding_boxes", torch.cat([centers, sizes], dim=1))
            for width in sorted(set(target_widths or [])):
                if width != query_dim:
                    lift = torch.randn(query_dim, width) / query_dim**0.5
                    self.register_buffer(f"lift_{width}", lift)
        self.requires_grad_(False)

    @property
    def class_embedding_table(self) -> torch.Tensor:
        return self.class_embedding.weight

    def lift(self, queries: torch.Tensor, width: int) -> torch.Tensor:
        """
        Maps (G, D_q) queries to a detector of width `width`; identity when equal
        """
        if width == self.query_dim:
            return queries
        name = f"lift_{width}"
        if not hasattr(self, name):
            raise ConfigurationError(f"No frozen projection to width {width}")
        return queries @ getattr(self, name)


class Adapter(nn.Module):
    """
    Learnable maps from student to teacher widths: a linear map for memory and
    a 1x1 convolution per backbone level. Identity where widths already match.
    """

    def __init__(
        self,
        student_dim: int,
        teacher_dim: int,
        student_channels: int,
        teacher_channels: int,
        num_levels: int,
    ) -> None:
        super().__init__()
        self.memory: nn.Module = (
            nn.Identity()
            if student_dim == teacher_dim
            else nn.Linear(student_dim, teacher_dim)
        )
        self.features = nn.ModuleList(
            nn.Identity()
            if student_channels == teacher_channels
            else nn.Conv2d(student_channels, teacher_channels, kernel_size=1)
            for _ in range(num_levels)
        )

    def adapt_memory(self, values: torch.Tensor) -> torch.Tensor:
        return self.memory(values)

    def adapt_features(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(levels) != len(self.features):
            raise ConfigurationError(
                f"Adapter built for {len(self.features)} levels, got {len(levels)}"
            )
        return [layer(level) for layer, level in zip(self.features, levels)]
