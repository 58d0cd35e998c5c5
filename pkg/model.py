"""
Mask-classification network with per-step prompt sets and classifier heads.

A strided convolutional encoder and a two-stage pixel decoder feed an L-layer
transformer decoder. Every continual step owns a prompt set (the decoder
queries) and an MLP head over its own classes; after step 1 everything but the
newest prompt set and head is frozen.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from data import ClassCatalog, TaskProtocol
from errors import ConfigError, InputError, NumericalError, ProtocolError, StateError
from utils import sha256_bytes

logger = logging.getLogger(__name__)

SHALLOW = 'shallow'
DEEP = 'deep'


@dataclass(frozen=True)
class ModelConfig:
    image_size: Tuple[int, int] = (64, 64)
    embed_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    pixel_embed_dim: int = 64
    backbone_channels: Tuple[int, ...] = (32, 64, 96)
    ffn_dim: int = 128
    mlp_hidden: int = 64
    mlp_depth: int = 2
    prompt_mode: str = DEEP
    min_prompts: int = 10
    base_prompts: Optional[int] = None
    step_prompts: Optional[int] = None
    masked_attention: bool = False

    def validate(self):
        h, w = self.image_size
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1 or self.mlp_depth < 1:
            raise ConfigError("num_layers and mlp_depth must be >= 1")
        if len(self.backbone_channels) != 3:
            raise ConfigError("backbone_channels needs one width per stage (3 stages)")
        if self.prompt_mode not in (SHALLOW, DEEP):
            raise ConfigError(f"prompt_mode must be shallow or deep, got {self.prompt_mode!r}")
        if self.min_prompts < 1:
            raise ConfigError("min_prompts must be >= 1")
        for name in ('base_prompts', 'step_prompts'):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.masked_attention:
            raise ConfigError("masked cross-attention is not implemented; set masked_attention = false")

    @property
    def mask_resolution(self) -> Tuple[int, int]:
        return self.image_size[0] // 4, self.image_size[1] // 4

    @property
    def memory_tokens(self) -> int:
        return (self.image_size[0] // 8) * (self.image_size[1] // 8)

    def num_prompts(self, step: int, num_classes: int) -> int:
        """N^t = max(|C^t|, min_prompts) unless overridden for the base or later steps."""
        override = self.base_prompts if step == 1 else self.step_prompts
        return override if override is not None else max(num_classes, self.min_prompts)


@dataclass
class StepOutput:
    """Raw outputs of one prompt set; leading dimension is the batch."""
    step: int
    class_logits: torch.Tensor        # B × N^t × |C^t|
    mask_logits: torch.Tensor         # B × N^t × h × w
    decoder_embeddings: torch.Tensor  # B × N^t × D
    aux: List[Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)


@dataclass
class OpCounter:
    """Pairwise attention operations tallied from runtime tensor shapes."""
    self_attention: int = 0
    cross_attention: int = 0

    def reset(self):
        self.self_attention = 0
        self.cross_attention = 0


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def _mlp(in_dim: int, hidden: int, depth: int, out_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    dim = in_dim
    for _ in range(depth):
        layers += [nn.Linear(dim, hidden), nn.GELU()]
        dim = hidden
    layers.append(nn.Linear(dim, out_dim))
    return nn.Sequential(*layers)


# ─── Frozen base ──────────────────────────────────────────────────────────────

class Backbone(nn.Module):
    """Three stride-2 conv stages; returns features at 1/2, 1/4 and 1/8."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages = []
        cin = 3
        for cout in cfg.backbone_channels:
            stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.GroupNorm(_groups(cout), cout),
                nn.GELU(),
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.GroupNorm(_groups(cout), cout),
                nn.GELU(),
            ))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        x = x - 0.5
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PixelDecoder(nn.Module):
    """Upsampling path 1/8 -> 1/4 with lateral connections."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        _, c4, c8 = cfg.backbone_channels
        p, d = cfg.pixel_embed_dim, cfg.embed_dim
        self.lateral8 = nn.Conv2d(c8, p, 1)
        self.out8 = nn.Sequential(nn.Conv2d(p, p, 3, padding=1), nn.GroupNorm(_groups(p), p), nn.GELU())
        self.lateral4 = nn.Conv2d(c4, p, 1)
        self.out4 = nn.Sequential(nn.Conv2d(p, p, 3, padding=1), nn.GroupNorm(_groups(p), p), nn.GELU())
        self.mask_features = nn.Conv2d(p, p, 1)
        self.input_proj = nn.Linear(p, d)
        self.memory_pos = nn.Parameter(torch.zeros(cfg.memory_tokens, d))
        nn.init.trunc_normal_(self.memory_pos, std=0.02)

    def forward(self, feats: List[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        _, f4, f8 = feats
        y8 = self.out8(self.lateral8(f8))
        y4 = F.interpolate(y8, size=f4.shape[-2:], mode='nearest') + self.lateral4(f4)
        pixel = self.mask_features(self.out4(y4))
        memory = self.input_proj(y8.flatten(2).transpose(1, 2))
        return memory, pixel


class DecoderLayer(nn.Module):
    """Cross-attention to image tokens, self-attention among one prompt set, FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cross_attn = nn.MultiheadAttention(d, cfg.num_heads, batch_first=True)
        self.self_attn = nn.MultiheadAttention(d, cfg.num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d))

    def forward(self, x: torch.Tensor, memory: torch.Tensor, pos: torch.Tensor,
                counter: OpCounter) -> torch.Tensor:
        b, n, d = x.shape
        s = memory.shape[1]
        counter.cross_attention += 2 * b * n * s * d
        counter.self_attention += 2 * b * n * n * d
        x = self.norm1(x + self.cross_attn(x, memory + pos, memory, need_weights=False)[0])
        x = self.norm2(x + self.self_attn(x, x, x, need_weights=False)[0])
        return self.norm3(x + self.ffn(x))


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.num_layers)])
        self.norm = nn.LayerNorm(d)
        self.mask_embed = _mlp(d, d, 2, cfg.pixel_embed_dim)


# ─── Per-step modules ─────────────────────────────────────────────────────────

class PromptSet(nn.Module):
    """Q^t: one N^t×D block (shallow) or one block per decoder layer (deep)."""

    def __init__(self, step: int, local_classes: Sequence[int], num_prompts: int, cfg: ModelConfig):
        super().__init__()
        self.step = step
        self.local_classes = tuple(int(c) for c in local_classes)
        self.num_prompts = num_prompts
        self.mode = cfg.prompt_mode
        count = cfg.num_layers if cfg.prompt_mode == DEEP else 1
        self.blocks = nn.ParameterList(
            [nn.Parameter(torch.zeros(num_prompts, cfg.embed_dim)) for _ in range(count)]
        )
        for block in self.blocks:
            nn.init.trunc_normal_(block, std=0.02)

    def block(self, layer: int) -> Optional[torch.Tensor]:
        return self.blocks[layer] if layer < len(self.blocks) else None


class StepHead(nn.Module):
    """MLP^t: D -> |C^t| logits, no no-obj unit."""

    def __init__(self, step: int, local_classes: Sequence[int], cfg: ModelConfig):
        super().__init__()
        self.step = step
        self.local_classes = tuple(int(c) for c in local_classes)
        self.mlp = _mlp(cfg.embed_dim, cfg.mlp_hidden, cfg.mlp_depth, len(self.local_classes))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x)


# ─── Model state ──────────────────────────────────────────────────────────────

BASE_GROUPS = ('backbone', 'pixel_decoder', 'transformer_decoder')


class ModelState(nn.Module):
    """
    Parameter registry plus forward passes.

    Parameter groups are the three base modules and one ``prompts.t`` /
    ``head.t`` pair per step; freezing a group clears requires_grad on it.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.pixel_decoder = PixelDecoder(cfg)
        self.transformer_decoder = TransformerDecoder(cfg)
        self.prompt_sets = nn.ModuleList()
        self.heads = nn.ModuleList()
        self.counter = OpCounter()

    # registry

    @property
    def num_steps(self) -> int:
        return len(self.prompt_sets)

    @property
    def dtype(self) -> torch.dtype:
        return self.prompt_sets[0].blocks[0].dtype if self.num_steps else torch.float32

    @property
    def device(self) -> torch.device:
        return self.pixel_decoder.memory_pos.device

    def groups(self) -> Dict[str, nn.Module]:
        groups: Dict[str, nn.Module] = {name: getattr(self, name) for name in BASE_GROUPS}
        for ps, head in zip(self.prompt_sets, self.heads):
            groups[f"prompts.{ps.step}"] = ps
            groups[f"head.{head.step}"] = head
        return groups

    @property
    def frozen_mask(self) -> Dict[str, bool]:
        return {name: not any(p.requires_grad for p in m.parameters()) for name, m in self.groups().items()}

    def set_frozen(self, name: str, frozen: bool = True):
        self.groups()[name].requires_grad_(not frozen)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if not p.requires_grad]

    def step_classes(self, t: int) -> Tuple[int, ...]:
        self._check_step(t)
        return self.heads[t - 1].local_classes

    def num_prompts(self, t: int) -> int:
        self._check_step(t)
        return self.prompt_sets[t - 1].num_prompts

    def known_classes(self) -> List[int]:
        return [c for head in self.heads for c in head.local_classes]

    def _check_step(self, t: int):
        if not 1 <= t <= self.num_steps:
            raise StateError(f"step {t} does not exist (model holds {self.num_steps} steps)")

    def _append_step(self, classes: Sequence[int]):
        step = self.num_steps + 1
        n = self.cfg.num_prompts(step, len(classes))
        ps = PromptSet(step, classes, n, self.cfg)
        head = StepHead(step, classes, self.cfg)
        dtype, device = self.dtype, self.device
        self.prompt_sets.append(ps.to(device=device, dtype=dtype))
        self.heads.append(head.to(device=device, dtype=dtype))

    # forward passes

    def as_batch(self, images: Union[np.ndarray, torch.Tensor, Sequence[np.ndarray]]) -> torch.Tensor:
        """Accept H×W×3 / B×H×W×3 arrays or a B×3×H×W tensor."""
        if isinstance(images, (list, tuple)):
            images = np.stack([np.asarray(i) for i in images])
        if isinstance(images, np.ndarray):
            if images.ndim == 3:
                images = images[None]
            if images.ndim != 4 or images.shape[-1] != 3:
                raise InputError(f"expected H×W×3 images, got array of shape {images.shape}")
            images = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)
        if not isinstance(images, torch.Tensor) or images.ndim != 4:
            raise InputError("images must be a B×3×H×W tensor or H×W×3 arrays")
        expected = (3,) + tuple(self.cfg.image_size)
        if tuple(images.shape[1:]) != expected:
            raise InputError(f"image shape {tuple(images.shape[1:])} does not match configured {expected}")
        return images.to(device=self.device, dtype=self.dtype)

    def encode(self, images) -> Tuple[torch.Tensor, torch.Tensor]:
        """E_img (B × S × D image tokens) and E_pixel (B × P × h × w)."""
        x = self.as_batch(images)
        return self.pixel_decoder(self.backbone(x))

    def _predict(self, x: torch.Tensor, pixel: torch.Tensor, head: StepHead
                 ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        out = self.transformer_decoder.norm(x)
        mask_embed = self.transformer_decoder.mask_embed(out)
        return head(out), torch.einsum('bnp,bphw->bnhw', mask_embed, pixel), out

    def decode(self, memory: torch.Tensor, pixel: torch.Tensor, t: int, with_aux: bool = False) -> StepOutput:
        self._check_step(t)
        ps, head = self.prompt_sets[t - 1], self.heads[t - 1]
        pos = self.pixel_decoder.memory_pos.unsqueeze(0)
        x = ps.block(0).unsqueeze(0).expand(memory.shape[0], -1, -1)
        aux = []
        for layer_index, layer in enumerate(self.transformer_decoder.layers):
            block = ps.block(layer_index) if layer_index > 0 else None
            if block is not None:
                x = x + block
            x = layer(x, memory, pos, self.counter)
            if with_aux and layer_index < len(self.transformer_decoder.layers) - 1:
                aux.append(self._predict(x, pixel, head)[:2])
        class_logits, mask_logits, out = self._predict(x, pixel, head)
        return StepOutput(t, class_logits, mask_logits, out, aux)

    def forward_step(self, images, t: int, with_aux: bool = False) -> StepOutput:
        self._check_step(t)
        memory, pixel = self.encode(images)
        return self.decode(memory, pixel, t, with_aux)

    def forward_all(self, images, upto: Optional[int] = None) -> List[StepOutput]:
        """Every prompt set 1..upto on one shared encoding; sets never attend to each other."""
        upto = self.num_steps if upto is None else upto
        self._check_step(upto)
        memory, pixel = self.encode(images)
        return [self.decode(memory, pixel, k) for k in range(1, upto + 1)]

    def forward(self, images, t: int) -> StepOutput:
        return self.forward_step(images, t)

    def apply_heads(self, decoder_embeddings: torch.Tensor, head_indices: Sequence[int]) -> List[torch.Tensor]:
        """Run heads MLP^k (k in head_indices) on one step's final decoder embeddings."""
        blocks = []
        for k in head_indices:
            if not 1 <= k <= self.num_steps:
                raise StateError(f"head {k} does not exist (model holds {self.num_steps} heads)")
            blocks.append(self.heads[k - 1](decoder_embeddings))
        return blocks


# ─── Construction ─────────────────────────────────────────────────────────────

def init_model(cfg: ModelConfig, catalog: ClassCatalog, protocol: TaskProtocol, seed: int) -> ModelState:
    """All groups trainable; prompt set 1 and head 1 sized for C^1."""
    classes = protocol.classes(1)
    unknown = set(classes) - set(catalog.ids)
    if unknown:
        raise ProtocolError(f"step 1 classes {sorted(unknown)} are not in the catalog")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        state = ModelState(cfg)
        state._append_step(classes)
    logger.info(f"Model initialised: N^1={state.num_prompts(1)}, |C^1|={len(classes)}, "
                f"{count_trainable(state)} trainable parameters")
    return state


def add_step(state: ModelState, new_classes: Sequence[int], seed: int, freeze: bool = True) -> ModelState:
    """
    Append prompt set and head for a new step.

    With freeze (the default) every existing group is frozen first; prior
    tensors are never written.
    """
    overlap = set(new_classes) & set(state.known_classes())
    if overlap:
        raise ProtocolError(f"classes {sorted(overlap)} already belong to an earlier step")
    if not new_classes:
        raise ProtocolError("a step needs at least one class")
    if freeze:
        for name in state.groups():
            state.set_frozen(name, True)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        state._append_step(tuple(new_classes))
    t = state.num_steps
    logger.info(f"Step {t} added: N^{t}={state.num_prompts(t)}, |C^{t}|={len(new_classes)}, "
                f"{count_trainable(state)} trainable parameters")
    return state


# ─── Accounting ───────────────────────────────────────────────────────────────

def count_trainable(state: ModelState) -> int:
    return sum(p.numel() for p in state.trainable_parameters())


def prompt_param_count(cfg: ModelConfig, num_prompts: int) -> int:
    blocks = cfg.num_layers if cfg.prompt_mode == DEEP else 1
    return blocks * num_prompts * cfg.embed_dim


def head_param_count(cfg: ModelConfig, num_classes: int) -> int:
    d, h = cfg.embed_dim, cfg.mlp_hidden
    return (d * h + h) + (cfg.mlp_depth - 1) * (h * h + h) + (h * num_classes + num_classes)


def attention_ops(cfg: ModelConfig, num_prompts: int) -> int:
    """Self-attention pairwise cost f(N) of one prompt set through all layers."""
    return cfg.num_layers * 2 * num_prompts * num_prompts * cfg.embed_dim


def encoder_flops(cfg: ModelConfig) -> int:
    h, w = cfg.image_size
    total, cin = 0, 3
    for stage, cout in enumerate(cfg.backbone_channels, 1):
        pixels = (h >> stage) * (w >> stage)
        total += pixels * 9 * cin * cout + pixels * 9 * cout * cout
        cin = cout
    _, c4, c8 = cfg.backbone_channels
    p, d = cfg.pixel_embed_dim, cfg.embed_dim
    p8 = cfg.memory_tokens
    p4 = cfg.mask_resolution[0] * cfg.mask_resolution[1]
    total += p8 * c8 * p + p8 * 9 * p * p + p8 * p * d
    total += p4 * c4 * p + p4 * 9 * p * p + p4 * p * p
    return total


def decoder_flops(cfg: ModelConfig, num_prompts: int, num_classes: int) -> int:
    n, d, s = num_prompts, cfg.embed_dim, cfg.memory_tokens
    h, w = cfg.mask_resolution
    per_layer = (
        n * d * d + 2 * s * d * d + 2 * n * s * d + n * d * d      # cross-attention
        + 3 * n * d * d + 2 * n * n * d + n * d * d                # self-attention
        + 2 * n * d * cfg.ffn_dim                                  # ffn
    )
    head = n * (cfg.embed_dim * cfg.mlp_hidden + (cfg.mlp_depth - 1) * cfg.mlp_hidden ** 2
                + cfg.mlp_hidden * num_classes)
    masks = n * (2 * d * d + d * cfg.pixel_embed_dim) + n * cfg.pixel_embed_dim * h * w
    return cfg.num_layers * per_layer + head + masks


def count_flops(state: ModelState, upto: Optional[int] = None) -> int:
    """Multiply-accumulates of forward_all(upto) on one image, counted symbolically."""
    upto = state.num_steps if upto is None else upto
    state._check_step(upto)
    total = encoder_flops(state.cfg)
    for k in range(1, upto + 1):
        total += decoder_flops(state.cfg, state.num_prompts(k), len(state.step_classes(k)))
    return total


def parameter_checksum(state: ModelState, groups: Optional[Sequence[str]] = None) -> str:
    """sha256 over the float32 bytes of the chosen parameter groups (all by default)."""
    registry = state.groups()
    names = list(registry) if groups is None else list(groups)
    parts = []
    for name in names:
        for pname, p in registry[name].named_parameters():
            parts.append(f"{name}.{pname}".encode())
            parts.append(p.detach().cpu().to(torch.float32).numpy().astype('<f4').tobytes())
    return sha256_bytes(b''.join(parts))


def check_finite(output: StepOutput):
    for name in ('class_logits', 'mask_logits', 'decoder_embeddings'):
        if not torch.isfinite(getattr(output, name)).all():
            raise NumericalError(f"non-finite {name} in step {output.step} output")
