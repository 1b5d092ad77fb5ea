"""
Query-based mask classification network.

`MaskClassifier` maps a batch of RGB images to K mask logit maps and K class distributions
(C classes plus "no object") per image:
- a convolutional backbone with four GroupNorm stages at strides 2, 4, 8 and 16,
- an FPN-style pixel decoder that sums the stages top-down to stride 4, resamples to the
  output stride and projects to per-pixel embeddings,
- a transformer decoder whose K learned queries cross-attend to the stride-8 and stride-16
  feature tokens, then self-attend, then pass an FFN,
- class and mask heads; mask logits are dot products between the per-query mask embedding
  and the per-pixel embeddings.

The network has no batch-statistics layers and no dropout, so its predictions do not depend
on the rest of the batch and its state_dict is its whole parameter set.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .errors import FingerprintMismatchError, ShapeContractError

logger = logging.getLogger(__name__)

# Input height and width must be multiples of the deepest backbone stride
INPUT_MULTIPLE = 16


@dataclass
class PredictionSet:
    """
    Network outputs.

    Batched: mask_logits (B, K, H', W'), class_logits (B, K, C+1). Indexing with an int gives
    the per-image view (K, H', W') / (K, C+1). aux_outputs holds (mask_logits, class_logits)
    pairs from intermediate decoder layers in the same layout.
    """

    mask_logits: Tensor
    class_logits: Tensor
    aux_outputs: List[Tuple[Tensor, Tensor]] = field(default_factory=list)

    @property
    def batched(self) -> bool:
        return self.mask_logits.dim() == 4

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[-2]

    @property
    def num_classes(self) -> int:
        """Real classes, without the no-object category."""

        return self.class_logits.shape[-1] - 1

    def __len__(self) -> int:
        if not self.batched:
            raise TypeError("a per-image PredictionSet has no batch dimension")
        return self.mask_logits.shape[0]

    def __getitem__(self, index: int) -> "PredictionSet":
        if not self.batched:
            raise TypeError("a per-image PredictionSet cannot be indexed")
        return PredictionSet(
            mask_logits=self.mask_logits[index],
            class_logits=self.class_logits[index],
            aux_outputs=[(m[index], c[index]) for m, c in self.aux_outputs],
        )

    def slice(self, start: int, stop: int) -> "PredictionSet":
        return PredictionSet(
            mask_logits=self.mask_logits[start:stop],
            class_logits=self.class_logits[start:stop],
            aux_outputs=[(m[start:stop], c[start:stop]) for m, c in self.aux_outputs],
        )

    def detach(self) -> "PredictionSet":
        return PredictionSet(
            mask_logits=self.mask_logits.detach(),
            class_logits=self.class_logits.detach(),
            aux_outputs=[(m.detach(), c.detach()) for m, c in self.aux_outputs],
        )

    def class_probs(self) -> Tensor:
        return self.class_logits.softmax(dim=-1)

    def layers(self) -> List["PredictionSet"]:
        """Final output followed by every aux output, each as a PredictionSet without aux."""

        return [PredictionSet(self.mask_logits, self.class_logits)] + [
            PredictionSet(m, c) for m, c in self.aux_outputs
        ]


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvStage(nn.Module):
    """Two 3x3 conv + GroupNorm + ReLU blocks, the first one halving the resolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False),
            _group_norm(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            _group_norm(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.block(x)


class PixelDecoder(nn.Module):
    """Top-down feature pyramid; returns per-pixel embeddings and the stride-8/16 token maps."""

    def __init__(self, widths: Tuple[int, ...], hidden_dim: int, output_stride: int):
        super().__init__()
        self.output_stride = output_stride
        self.lateral = nn.ModuleList([nn.Conv2d(w, hidden_dim, 1) for w in widths[1:]])
        self.smooth = nn.Sequential(
            nn.Conv2d(hidden_dim, hidden_dim, 3, padding=1, bias=False),
            _group_norm(hidden_dim),
            nn.ReLU(inplace=True),
        )
        self.mask_features = nn.Conv2d(hidden_dim, hidden_dim, 3, padding=1)

    def forward(self, features: List[Tensor], image_size: Tuple[int, int]):
        p4, p8, p16 = [lateral(f) for lateral, f in zip(self.lateral, features[1:])]

        p8 = p8 + F.interpolate(p16, size=p8.shape[-2:], mode="bilinear", align_corners=False)
        p4 = p4 + F.interpolate(p8, size=p4.shape[-2:], mode="bilinear", align_corners=False)
        fused = self.smooth(p4)

        if self.output_stride != 4:
            size = (image_size[0] // self.output_stride, image_size[1] // self.output_stride)
            fused = F.interpolate(fused, size=size, mode="bilinear", align_corners=False)

        return self.mask_features(fused), [p8, p16]


def sine_position_encoding(height: int, width: int, dim: int, device, dtype) -> Tensor:
    """Normalised 2D sine/cosine encoding, (height*width, dim); first half y, second half x."""

    half = dim // 2
    scale = 2 * math.pi
    ys = (torch.arange(1, height + 1, device=device, dtype=dtype) / height) * scale
    xs = (torch.arange(1, width + 1, device=device, dtype=dtype) / width) * scale
    dim_t = 10000 ** (2 * (torch.arange(half, device=device, dtype=dtype) // 2) / half)

    pos_y = ys[:, None] / dim_t
    pos_x = xs[:, None] / dim_t
    pos_y = torch.stack((pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()), dim=2).flatten(1)
    pos_x = torch.stack((pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()), dim=2).flatten(1)

    grid_y = pos_y[:, None, :].expand(height, width, half)
    grid_x = pos_x[None, :, :].expand(height, width, half)

    return torch.cat((grid_y, grid_x), dim=-1).reshape(height * width, dim)


class DecoderLayer(nn.Module):
    """Cross-attention, self-attention, FFN; residual + LayerNorm after each."""

    def __init__(self, hidden_dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.cross_attn = nn.MultiheadAttention(hidden_dim, num_heads, dropout=0.0, batch_first=True)
        self.self_attn = nn.MultiheadAttention(hidden_dim, num_heads, dropout=0.0, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(hidden_dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, hidden_dim))
        self.norm_cross = nn.LayerNorm(hidden_dim)
        self.norm_self = nn.LayerNorm(hidden_dim)
        self.norm_ffn = nn.LayerNorm(hidden_dim)

    def forward(self, queries: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Tensor) -> Tensor:
        attended, _ = self.cross_attn(queries + query_pos, memory + memory_pos, memory, need_weights=False)
        queries = self.norm_cross(queries + attended)

        q = queries + query_pos
        attended, _ = self.self_attn(q, q, queries, need_weights=False)
        queries = self.norm_self(queries + attended)

        return self.norm_ffn(queries + self.ffn(queries))


class MaskClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        hidden = config.hidden_dim

        widths = (3,) + tuple(config.backbone_widths)
        self.backbone = nn.ModuleList([ConvStage(widths[i], widths[i + 1]) for i in range(4)])
        self.pixel_decoder = PixelDecoder(tuple(config.backbone_widths), hidden, config.output_stride)

        self.query_feat = nn.Embedding(config.num_queries, hidden)
        self.query_pos = nn.Embedding(config.num_queries, hidden)
        self.level_embed = nn.Embedding(2, hidden)
        self.layers = nn.ModuleList(
            [DecoderLayer(hidden, config.num_heads, config.ffn_dim) for _ in range(config.decoder_layers)]
        )
        self.decoder_norm = nn.LayerNorm(hidden)

        self.class_head = nn.Linear(hidden, config.num_classes + 1)
        self.mask_head = nn.Sequential(
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
        )

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def backbone_parameters(self):
        return self.backbone.parameters()

    def head_parameters(self):
        backbone_ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in backbone_ids]

    def _predict(self, queries: Tensor, pixel_embeddings: Tensor) -> Tuple[Tensor, Tensor]:
        normed = self.decoder_norm(queries)
        mask_embed = self.mask_head(normed)
        mask_logits = torch.einsum("bqd,bdhw->bqhw", mask_embed, pixel_embeddings)
        return mask_logits, self.class_head(normed)

    def forward(self, images: Tensor) -> PredictionSet:
        x = images - 0.5
        features = []
        for stage in self.backbone:
            x = stage(x)
            features.append(x)

        pixel_embeddings, token_maps = self.pixel_decoder(features, tuple(images.shape[-2:]))

        memory, memory_pos = [], []
        for level, token_map in enumerate(token_maps):
            _, dim, height, width = token_map.shape
            memory.append(token_map.flatten(2).transpose(1, 2) + self.level_embed.weight[level])
            memory_pos.append(sine_position_encoding(height, width, dim, token_map.device, token_map.dtype))

        memory = torch.cat(memory, dim=1)
        memory_pos = torch.cat(memory_pos, dim=0)[None]

        batch = images.shape[0]
        queries = self.query_feat.weight[None].expand(batch, -1, -1)
        query_pos = self.query_pos.weight[None].expand(batch, -1, -1)

        first_aux = self.config.decoder_layers - 1 - self.config.aux_layers
        aux_outputs = []

        for index, layer in enumerate(self.layers):
            queries = layer(queries, query_pos, memory, memory_pos)
            if first_aux <= index < self.config.decoder_layers - 1:
                aux_outputs.append(self._predict(queries, pixel_embeddings))

        mask_logits, class_logits = self._predict(queries, pixel_embeddings)

        return PredictionSet(mask_logits=mask_logits, class_logits=class_logits, aux_outputs=aux_outputs)


def init_model(config: ModelConfig, seed: int) -> MaskClassifier:
    """
    Builds a freshly initialised model; equal (config, seed) give bit-identical parameters.
    The global torch RNG is left untouched.
    """

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskClassifier(config)

    logger.debug("Initialised model %s with seed %d", model.fingerprint, seed)

    return model


def check_input(images: Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeContractError(f"expected a (B, 3, H, W) batch, got shape {tuple(images.shape)}")

    height, width = images.shape[-2:]
    if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
        raise ShapeContractError(
            f"image size {height}x{width} is not a multiple of {INPUT_MULTIPLE}"
        )


def forward(model: MaskClassifier, images: Tensor) -> PredictionSet:
    """
    Runs the model on a batch of images after checking the input contract.

    Parameters:
        model (MaskClassifier): Network; its train/eval mode is left as is.
        images (Tensor): (B, 3, H, W) batch in [0, 1], H and W multiples of 16.

    Returns:
        PredictionSet: Batched predictions at stride model.config.output_stride.
    """

    check_input(images)

    return model(images)


def upsample_masks(mask_logits: Tensor, target: Tuple[int, int]) -> Tensor:
    """
    Bilinear upsampling of mask logits (..., H', W') to (..., H, W). H and W must be integer
    multiples of H' and W'.
    """

    src_h, src_w = mask_logits.shape[-2:]
    height, width = target

    if height % src_h or width % src_w or height < src_h or width < src_w:
        raise ShapeContractError(f"cannot upsample {src_h}x{src_w} to {height}x{width} by an integer factor")

    if (src_h, src_w) == (height, width):
        return mask_logits

    lead = mask_logits.shape[:-2]
    flat = mask_logits.reshape(1, -1, src_h, src_w)
    out = F.interpolate(flat, size=(height, width), mode="bilinear", align_corners=False)

    return out.reshape(*lead, height, width)


def copy_params(model: MaskClassifier) -> MaskClassifier:
    """Value-equal model with its own storage."""

    return copy.deepcopy(model)


def check_compatible(a: MaskClassifier, b: MaskClassifier) -> None:
    if a.fingerprint != b.fingerprint:
        raise FingerprintMismatchError(
            f"architecture fingerprints differ: {a.fingerprint} != {b.fingerprint}"
        )
