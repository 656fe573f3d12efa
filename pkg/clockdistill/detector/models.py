"""
All torch modules of the detector go here
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from clockdistill.detector.schemas import (
    BackboneFeatures,
    DetectorConfig,
    Memory,
    StagePredictions,
)
from clockdistill.exceptions import ShapeMismatchError
from clockdistill.schemas import GridShape


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))


def _activation(name: str) -> nn.Module:
    return nn.GELU() if name == "gelu" else nn.ReLU()


class MLP(nn.Module):
    """Very simple multi-layer perceptron (also called FFN)"""

    def __init__(
        self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int
    ) -> None:
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(n, k) for n, k in zip(dims, dims[1:] + [output_dim])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


class SinePositionalEncoding(nn.Module):
    """
    Fixed 2D sine/cosine encoding, half of the channels for y and half for x
    """

    def __init__(self, embed_dim: int, temperature: float = 10000.0) -> None:
        super().__init__()
        self.num_feats = embed_dim // 2
        self.temperature = temperature
        self.scale = 2 * math.pi

    def forward(
        self, shape: GridShape, device: torch.device, dtype: torch.dtype
    ) -> torch.Tensor:
        """
        :return: (H*W, D) encodings in row-major cell order
        """
        eps = 1e-6
        y_embed = torch.arange(1, shape.height + 1, device=device, dtype=dtype)
        x_embed = torch.arange(1, shape.width + 1, device=device, dtype=dtype)
        y_embed = y_embed / (shape.height + eps) * self.scale
        x_embed = x_embed / (shape.width + eps) * self.scale
        dim_t = torch.arange(self.num_feats, device=device, dtype=dtype)
        dim_t = self.temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / self.num_feats)
        pos_x = x_embed[:, None] / dim_t
        pos_y = y_embed[:, None] / dim_t
        pos_x = torch.stack((pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()), dim=2).flatten(1)
        pos_y = torch.stack((pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()), dim=2).flatten(1)
        grid_y = pos_y[:, None, :].expand(shape.height, shape.width, -1)
        grid_x = pos_x[None, :, :].expand(shape.height, shape.width, -1)
        return torch.cat((grid_y, grid_x), dim=2).reshape(shape.cells, -1)


class PatchEmbedder(nn.Module):
    """
    Toy backbone: one strided convolution per level, kernel equal to stride,
    so every output cell sees exactly its own image patch
    """

    def __init__(self, strides: list[int], channels: int) -> None:
        super().__init__()
        self.levels = nn.ModuleList(
            nn.Conv2d(3, channels, kernel_size=s, stride=s) for s in strides
        )

    def forward(self, images: torch.Tensor) -> BackboneFeatures:
        return BackboneFeatures(levels=[conv(images) for conv in self.levels])


class EncoderLayer(nn.Module):
    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        d = config.embed_dim
        self.self_attn = (
            nn.MultiheadAttention(
                d, config.attention_heads, dropout=config.dropout, batch_first=True
            )
            if config.encoder_self_attention
            else None
        )
        self.linear1 = nn.Linear(d, config.mlp_hidden)
        self.linear2 = nn.Linear(config.mlp_hidden, d)
        self.activation = _activation(config.activation)
        self.dropout = nn.Dropout(config.dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(
        self, src: torch.Tensor, pos: torch.Tensor, need_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        weights = None
        if self.self_attn is not None:
            q = k = src + pos
            attended, weights = self.self_attn(
                q, k, src, need_weights=need_weights, average_attn_weights=True
            )
            src = self.norm1(src + self.dropout(attended))
        ffn = self.linear2(self.dropout(self.activation(self.linear1(src))))
        return self.norm2(src + self.dropout(ffn)), weights


class DecoderLayer(nn.Module):
    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        d = config.embed_dim
        self.self_attn = nn.MultiheadAttention(
            d, config.attention_heads, dropout=config.dropout, batch_first=True
        )
        self.cross_attn = nn.MultiheadAttention(
            d, config.attention_heads, dropout=config.dropout, batch_first=True
        )
        self.linear1 = nn.Linear(d, config.mlp_hidden)
        self.linear2 = nn.Linear(config.mlp_hidden, d)
        self.activation = _activation(config.activation)
        self.dropout = nn.Dropout(config.dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(
        self,
        tgt: torch.Tensor,
        query_pos: torch.Tensor,
        key_tgt: torch.Tensor,
        key_pos: torch.Tensor,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """
        Updates the rows of `tgt`; self-attention keys are the rows of `key_tgt`
        :param attn_mask: bool (rows, keys), True blocks attention
        """
        attended, _ = self.self_attn(
            tgt + query_pos, key_tgt + key_pos, key_tgt, attn_mask=attn_mask,
            need_weights=False,
        )
        tgt = self.norm1(tgt + self.dropout(attended))
        # cross-attention always sees the full memory
        attended, _ = self.cross_attn(
            tgt + query_pos, memory + memory_pos, memory, need_weights=False
        )
        tgt = self.norm2(tgt + self.dropout(attended))
        ffn = self.linear2(self.dropout(self.activation(self.linear1(tgt))))
        return self.norm3(tgt + self.dropout(ffn))


class Detector(nn.Module):
    """
    Encoder-decoder detector with learnable object queries carrying an explicit
    anchor box, and optional appended query groups behind a self-attention mask
    """

    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.backbone = PatchEmbedder(config.strides, config.backbone_channels)
        self.input_proj = nn.ModuleList(
            nn.Conv2d(config.backbone_channels, d, kernel_size=1) for _ in config.strides
        )
        self.level_embed = nn.Parameter(torch.zeros(len(config.strides), d))
        self.position = SinePositionalEncoding(d)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.encoder_layers)
        )
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(d)
        self.query_content = nn.Embedding(config.num_object_queries, d)
        self.query_anchor = nn.Parameter(
            inverse_sigmoid(torch.rand(config.num_object_queries, 4) * 0.9 + 0.05)
        )
        self.query_pos_head = MLP(4, d, d, 2)
        self.class_head = nn.Linear(d, config.num_classes + 1)
        self.box_head = MLP(d, d, 4, 3)
        nn.init.normal_(self.level_embed, std=0.02)
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)

    # encoder
    def _check_images(self, images: torch.Tensor) -> None:
        size = self.config.image_size
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2:] != (size, size):
            raise ShapeMismatchError(
                f"Expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}"
            )

    def _encode(
        self, images: torch.Tensor, need_weights: bool
    ) -> tuple[BackboneFeatures, Memory, list[torch.Tensor]]:
        self._check_images(images)
        features = self.backbone(images)
        tokens, positions = [], []
        for level, (proj, feature) in enumerate(zip(self.input_proj, features.levels)):
            shape = self.config.level_shapes[level]
            # row-major flattening: token index p is cell (p // W, p % W)
            tokens.append(proj(feature).flatten(2).transpose(1, 2))
            pos = self.position(shape, images.device, images.dtype)
            positions.append(pos + self.level_embed[level])
        src = torch.cat(tokens, dim=1)
        pos = torch.cat(positions, dim=0)
        attention = []
        for layer in self.encoder_layers:
            src, weights = layer(src, pos, need_weights=need_weights)
            if weights is not None:
                attention.append(weights)
        memory = Memory(
            values=src, positional_encoding=pos, level_shapes=self.config.level_shapes
        )
        return features, memory, attention

    def encode(self, images: torch.Tensor) -> tuple[BackboneFeatures, Memory]:
        """
        :param images: (B, 3, H, W) in [0, 1]
        :return: backbone features and the final encoder output (memory)
        """
        features, memory, _ = self._encode(images, need_weights=False)
        return features, memory

    def encoder_attention(self, images: torch.Tensor) -> list[torch.Tensor]:
        """
        Head-averaged self-attention of every encoder layer, (B, P, P) each
        """
        return self._encode(images, need_weights=True)[2]

    # decoder
    def _heads(
        self, hidden: torch.Tensor, reference: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = self.decoder_norm(hidden)
        boxes = (self.box_head(hidden) + inverse_sigmoid(reference)).sigmoid()
        return self.class_head(hidden), boxes

    def decode(
        self,
        memory: Memory,
        extra_content: torch.Tensor | None = None,
        extra_boxes: torch.Tensor | None = None,
        group_mask: torch.Tensor | None = None,
    ) -> StagePredictions:
        """
        Runs the decoder stack for the N learnable queries followed by any extra
        (e.g. distillation) queries
        :param memory: encoder output
        :param extra_content: (G, D) frozen query contents appended after the N
            learnable queries
        :param extra_boxes: (G, 4) center-form reference boxes of the extra queries
        :param group_mask: bool (N+G, N+G); [i, j] True lets query i attend to j
        :return: per-stage predictions for all N+G queries
        """
        batch = memory.values.shape[0]
        n = self.config.num_object_queries
        d = self.config.embed_dim
        g = 0 if extra_content is None else int(extra_content.shape[0])
        if g and (extra_boxes is None or extra_boxes.shape != (g, 4)):
            raise ShapeMismatchError("extra_boxes must be (G, 4) alongside extra_content")
        if g and extra_content is not None and extra_content.shape[1] != d:
            raise ShapeMismatchError(
                f"Extra query width {extra_content.shape[1]} does not match D={d}"
            )
        if memory.width != d:
            raise ShapeMismatchError(f"Memory width {memory.width} does not match D={d}")
        device = memory.values.device
        if group_mask is None:
            group_mask = torch.ones(n + g, n + g, dtype=torch.bool, device=device)
        if group_mask.shape != (n + g, n + g):
            raise ShapeMismatchError(
                f"group_mask must be {(n + g, n + g)}, got {tuple(group_mask.shape)}"
            )
        group_mask = group_mask.to(device=device, dtype=torch.bool)
        blocked = ~group_mask

        tgt_r = self.query_content.weight[None].expand(batch, -1, -1)
        ref_r = self.query_anchor.sigmoid()[None].expand(batch, -1, -1)
        pos_r = self.query_pos_head(ref_r)
        if g:
            tgt_x = extra_content.to(tgt_r.dtype)[None].expand(batch, -1, -1)
            ref_x = extra_boxes.to(tgt_r.dtype)[None].expand(batch, -1, -1)
            pos_x = self.query_pos_head(ref_x)
        # regular rows run on their own whenever they cannot see the extra rows
        isolated = g == 0 or not bool(group_mask[:n, n:].any())
        mask_r = None if bool(group_mask[:n, :n].all()) else blocked[:n, :n]

        mem, mem_pos = memory.values, memory.positional_encoding[None]
        logits, boxes = [], []
        for layer in self.decoder_layers:
            if isolated:
                new_r = layer(tgt_r, pos_r, tgt_r, pos_r, mem, mem_pos, mask_r)
                if g:
                    keys = torch.cat([tgt_r, tgt_x], dim=1)
                    key_pos = torch.cat([pos_r, pos_x], dim=1)
                    tgt_x = layer(tgt_x, pos_x, keys, key_pos, mem, mem_pos, blocked[n:])
                tgt_r = new_r
            else:
                joint = torch.cat([tgt_r, tgt_x], dim=1)
                joint_pos = torch.cat([pos_r, pos_x], dim=1)
                joint = layer(joint, joint_pos, joint, joint_pos, mem, mem_pos, blocked)
                tgt_r, tgt_x = joint[:, :n], joint[:, n:]
            stage_logits, stage_boxes = self._heads(tgt_r, ref_r)
            if g:
                extra_logits, extra_boxes_out = self._heads(tgt_x, ref_x)
                stage_logits = torch.cat([stage_logits, extra_logits], dim=1)
                stage_boxes = torch.cat([stage_boxes, extra_boxes_out], dim=1)
            logits.append(stage_logits)
            boxes.append(stage_boxes)
        return StagePredictions(
            class_logits=torch.stack(logits, dim=1),
            boxes=torch.stack(boxes, dim=1),
            num_regular=n,
        )

    def forward(self, images: torch.Tensor) -> StagePredictions:
        _, memory = self.encode(images)
        return self.decode(memory)
