"""Object-query decoder with masked cross-attention over the token grid.

A fixed set of learnable queries, optionally extended by queries derived
from visual prompts (point / box / mask), attends to the encoder's token
grid. Cross-attention in the first layer is unrestricted for learnable
and point-derived queries; later layers restrict each query to the cells
its own previous-layer mask predicts (sigmoid > 0.5). Box and mask
prompts keep their geometric cell set at every layer. A row whose
allowed set would be empty falls back to all cells allowed.

Each query yields a mask (decoded against the fine mask features and
pooled onto the token grid), class logits over attribute classes, and a
confidence score (max class sigmoid). The same mask head decodes
arbitrary embeddings, which is how segmentation tokens produced by the
language model become masks.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import FeatureMap
from .errors import (CapacityError, ConfigError, ContractError, DegeneratePromptError,
                     DimensionError)
from .metrics import SegMask

_BLOCK = -1e9


@dataclass
class VisualPrompt:
    """A user-designated region: a point (x, y), a box (x0, y0, x1, y1),
    or a binary mask at image resolution. Coordinates are in pixels."""

    kind: str
    point: tuple | None = None
    box: tuple | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("point", "box", "mask"):
            raise ContractError(f"unknown prompt kind {self.kind!r}")
        if self.kind == "point":
            if self.point is None or len(self.point) != 2:
                raise ContractError("point prompt needs (x, y)")
        elif self.kind == "box":
            if self.box is None or len(self.box) != 4:
                raise ContractError("box prompt needs (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.box
            if not (x1 > x0 and y1 > y0):
                raise ContractError(f"box must have positive extent, got {self.box}")
        else:
            if self.mask is None:
                raise ContractError("mask prompt needs a boolean array")
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.ndim != 2:
                raise DimensionError(f"prompt mask must be 2-d, got {self.mask.shape}")
            if not self.mask.any():
                raise ContractError("mask prompt must cover at least one pixel")

    def validate_extent(self, image_h: int, image_w: int):
        if self.kind == "point":
            x, y = self.point
            if not (0 <= x <= image_w and 0 <= y <= image_h):
                raise ContractError(f"point {self.point} outside image {image_w}x{image_h}")
        elif self.kind == "box":
            x0, y0, x1, y1 = self.box
            if x0 < 0 or y0 < 0 or x1 > image_w or y1 > image_h:
                raise ContractError(f"box {self.box} outside image {image_w}x{image_h}")
        else:
            if self.mask.shape != (image_h, image_w):
                raise DimensionError(f"prompt mask {self.mask.shape} does not match image {image_h}x{image_w}")


class AttentionMask:
    """Boolean allow-matrix [rows, cells]; empty rows fall back to all-allowed."""

    def __init__(self, allow: np.ndarray):
        allow = np.asarray(allow, dtype=bool)
        if allow.ndim != 2:
            raise DimensionError(f"attention mask must be 2-d, got {allow.shape}")
        dead = ~allow.any(axis=1)
        if dead.any():
            allow = allow.copy()
            allow[dead] = True
        self.allow = allow

    def bias(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.allow, 0.0, _BLOCK).astype(dtype)


def _cell_centers(f: FeatureMap):
    """Pixel coordinates of token-grid cell centers, row-major."""
    ds_y = f.image_h / f.h
    ds_x = f.image_w / f.w
    cy = (np.arange(f.h) + 0.5) * ds_y
    cx = (np.arange(f.w) + 0.5) * ds_x
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    return gx.reshape(-1), gy.reshape(-1)


def _box_cells(f: FeatureMap, box) -> np.ndarray:
    """Cells whose centers fall inside the box (inclusive bounds)."""
    x0, y0, x1, y1 = box
    gx, gy = _cell_centers(f)
    return (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)


def _mask_cells(f: FeatureMap, mask: np.ndarray) -> np.ndarray:
    """Cells with any covered pixel after downsampling to the token grid."""
    sy = f.image_h // f.h
    sx = f.image_w // f.w
    return mask.reshape(f.h, sy, f.w, sx).any(axis=(1, 3)).reshape(-1)


def prompt_attention_mask(prompt: VisualPrompt, f: FeatureMap) -> AttentionMask:
    """Single-row allow mask for one prompt over the token grid."""
    prompt.validate_extent(f.image_h, f.image_w)
    if prompt.kind == "box":
        allow = _box_cells(f, prompt.box)
    elif prompt.kind == "mask":
        allow = _mask_cells(f, prompt.mask)
    else:
        allow = np.ones(f.h * f.w, dtype=bool)
    return AttentionMask(allow.reshape(1, -1))


def prompt_to_query(prompt: VisualPrompt, f: FeatureMap) -> Tensor:
    """Encode a prompt as a query vector from the token-grid features.

    Points sample bilinearly between cell centers (a point sitting on a
    center returns that cell's feature exactly); boxes and masks average
    the features of their covered cells and raise DegeneratePromptError
    when no cell is covered.
    """
    prompt.validate_extent(f.image_h, f.image_w)
    if prompt.kind == "point":
        x, y = prompt.point
        gx = np.clip(x / (f.image_w / f.w) - 0.5, 0.0, f.w - 1.0)
        gy = np.clip(y / (f.image_h / f.h) - 0.5, 0.0, f.h - 1.0)
        x0, y0 = int(np.floor(gx)), int(np.floor(gy))
        x1, y1 = min(x0 + 1, f.w - 1), min(y0 + 1, f.h - 1)
        wx, wy = gx - x0, gy - y0
        idx = [y0 * f.w + x0, y0 * f.w + x1, y1 * f.w + x0, y1 * f.w + x1]
        weights = np.array([[(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx]], dtype=np.float32)
        rows = ag.take_rows(f.data, idx)
        return ag.reshape(ag.matmul(Tensor(weights.astype(f.data.dtype.type)), rows), (f.c,))
    if prompt.kind == "box":
        cells = _box_cells(f, prompt.box)
    else:
        cells = _mask_cells(f, prompt.mask)
    if not cells.any():
        raise DegeneratePromptError(f"{prompt.kind} prompt covers no cells on the {f.h}x{f.w} grid")
    rows = ag.take_rows(f.data, np.nonzero(cells)[0])
    return ag.reshape(ag.mean(rows, axis=0), (f.c,))


@dataclass
class ObjectQuerySet:
    """Decoder output: queries with masks, class logits, and confidences.

    ``mask_logits`` lives on the token grid (used for priors and for the
    attention schedule); ``mask_logits_fine`` lives on the mask-feature
    grid and is what losses and evaluation binarize.
    """

    queries: Tensor
    mask_logits: Tensor
    mask_logits_fine: Tensor
    class_logits: Tensor
    scores: Tensor
    origins: list
    fine_h: int = 0
    fine_w: int = 0
    attention: list | None = None

    def __post_init__(self):
        n = self.queries.shape[0]
        if self.mask_logits.shape[0] != n or self.class_logits.shape[0] != n or self.scores.shape[0] != n:
            raise DimensionError("query count mismatch across query-set fields")
        if len(self.origins) != n:
            raise DimensionError("one origin tag required per query")

    @property
    def count(self):
        return self.queries.shape[0]

    def fine_masks(self) -> list:
        return [SegMask.from_logits(self.mask_logits_fine.data[i], self.fine_h, self.fine_w)
                for i in range(self.count)]


@dataclass
class DecoderConfig:
    layers: int = 3
    n_queries: int = 8
    dim: int = 64
    n_classes: int = 21
    ffn_hidden: int = 128
    mask_dim: int = 32
    max_prompts: int = 8

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("decoder needs at least one layer")


def _grid_pos_enc(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-d sine/cosine cell encoding, [h*w, c]."""
    if c % 4:
        raise ConfigError(f"position encoding needs dim divisible by 4, got {c}")
    quarter = c // 4
    freqs = np.exp(np.arange(quarter) * (-np.log(10000.0) / max(quarter - 1, 1)))
    ys = np.arange(h, dtype=np.float64)[:, None] * freqs[None, :]
    xs = np.arange(w, dtype=np.float64)[:, None] * freqs[None, :]
    enc = np.zeros((h, w, c), dtype=np.float32)
    enc[:, :, 0 * quarter:1 * quarter] = np.sin(ys)[:, None, :]
    enc[:, :, 1 * quarter:2 * quarter] = np.cos(ys)[:, None, :]
    enc[:, :, 2 * quarter:3 * quarter] = np.sin(xs)[None, :, :]
    enc[:, :, 3 * quarter:4 * quarter] = np.cos(xs)[None, :, :]
    return enc.reshape(h * w, c)


class QueryDecoder:
    """Mask2Former-style decoder specialized to a single attention head."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator, prefix: str = "dec"):
        self.config = config
        self.prefix = prefix
        self._pos_cache = {}
        p = OrderedDict()
        c = config.dim

        def lin(name, d_in, d_out, std=None):
            std = std if std is not None else np.sqrt(1.0 / d_in)
            p[f"{prefix}.{name}.w"] = Tensor(rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32),
                                             requires_grad=True)
            p[f"{prefix}.{name}.b"] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

        def norm(name):
            p[f"{prefix}.{name}.g"] = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
            p[f"{prefix}.{name}.b"] = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

        p[f"{prefix}.query_embed"] = Tensor(rng.normal(0.0, 0.5, size=(config.n_queries, c)).astype(np.float32),
                                            requires_grad=True)
        for i in range(config.layers):
            for blk in (f"layer{i}.ca", f"layer{i}.sa"):
                lin(f"{blk}.q", c, c)
                lin(f"{blk}.k", c, c)
                lin(f"{blk}.v", c, c)
                lin(f"{blk}.o", c, c)
            norm(f"layer{i}.ca_ln")
            norm(f"layer{i}.sa_ln")
            lin(f"layer{i}.ffn.1", c, config.ffn_hidden, std=np.sqrt(2.0 / c))
            lin(f"layer{i}.ffn.2", config.ffn_hidden, c, std=np.sqrt(1.0 / config.ffn_hidden))
            norm(f"layer{i}.ffn_ln")
        lin("mask_head.1", c, c, std=np.sqrt(2.0 / c))
        lin("mask_head.2", c, config.mask_dim)
        lin("cls_head", c, config.n_classes)
        self._params = p

    def params(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def set_frozen(self, frozen: bool = True):
        for t in self._params.values():
            t.requires_grad = not frozen

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self._params.values())

    def clone(self, prefix: str = "decdup", trainable: bool = True) -> "QueryDecoder":
        """Deep parameter copy, e.g. for finetuning a duplicate while the
        original stays frozen."""
        dup = QueryDecoder.__new__(QueryDecoder)
        dup.config = self.config
        dup.prefix = prefix
        dup._pos_cache = {}
        dup._params = OrderedDict()
        for name, t in self._params.items():
            new_name = prefix + name[len(self.prefix):]
            dup._params[new_name] = Tensor(t.data.copy(), requires_grad=trainable)
        return dup

    # -- helpers ---------------------------------------------------------------

    def _p(self, name):
        return self._params[f"{self.prefix}.{name}"]

    def _linear(self, name, x):
        return ag.add(ag.matmul(x, self._p(f"{name}.w")), self._p(f"{name}.b"))

    def _norm(self, name, x):
        return ag.layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _attend(self, blk, x, mem, bias=None):
        c = self.config.dim
        q = self._linear(f"{blk}.q", x)
        k = self._linear(f"{blk}.k", mem)
        v = self._linear(f"{blk}.v", mem)
        logits = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / np.sqrt(c))
        if bias is not None:
            logits = ag.add(logits, Tensor(bias))
        weights = ag.softmax(logits, axis=-1)
        out = self._linear(f"{blk}.o", ag.matmul(weights, v))
        return out, weights

    def mask_embedding(self, x: Tensor) -> Tensor:
        h = ag.gelu(self._linear("mask_head.1", x))
        return self._linear("mask_head.2", h)

    def _predict(self, x: Tensor, f: FeatureMap):
        """Mask logits on the fine grid plus their token-grid pooling."""
        emb = self.mask_embedding(x)
        fine = ag.matmul(emb, ag.transpose(f.mask_data))
        fy = f.mask_h // f.h
        fx = f.mask_w // f.w
        n = x.shape[0]
        pooled = ag.reshape(fine, (n, f.h, fy, f.w, fx))
        pooled = ag.mean(pooled, axis=(2, 4))
        pooled = ag.reshape(pooled, (n, f.h * f.w))
        return fine, pooled

    def seg_logits(self, e: Tensor, f: FeatureMap) -> Tensor:
        """Fine-grid mask logits for one embedding vector [c]."""
        if e.shape != (self.config.dim,):
            raise DimensionError(f"embedding shape {e.shape} does not match decoder dim {self.config.dim}")
        emb = self.mask_embedding(ag.reshape(e, (1, self.config.dim)))
        return ag.reshape(ag.matmul(emb, ag.transpose(f.mask_data)), (f.mask_h * f.mask_w,))

    def decode_seg_embedding(self, e: Tensor, f: FeatureMap) -> SegMask:
        logits = self.seg_logits(e, f)
        return SegMask.from_logits(logits, f.mask_h, f.mask_w)

    # -- main entry --------------------------------------------------------------

    def decode(self, f: FeatureMap, prompts=(), record_attention: bool = False) -> ObjectQuerySet:
        cfg = self.config
        prompts = list(prompts)
        if f.c != cfg.dim:
            raise DimensionError(f"feature width {f.c} does not match decoder dim {cfg.dim}")
        if f.mask_data is None:
            raise ContractError("feature map carries no mask features")
        if len(prompts) > cfg.max_prompts:
            raise CapacityError(f"{len(prompts)} prompts exceed the configured maximum {cfg.max_prompts}")
        hw = f.h * f.w
        n_learn = cfg.n_queries

        prompt_rows = []
        geo_allow = []
        for prompt in prompts:
            prompt_rows.append(ag.reshape(prompt_to_query(prompt, f), (1, cfg.dim)))
            if prompt.kind == "point":
                geo_allow.append(None)  # no geometric restriction
            else:
                geo_allow.append(prompt_attention_mask(prompt, f).allow[0])

        x = self._p("query_embed")
        if prompt_rows:
            x = ag.concat([x] + prompt_rows, axis=0)
        n_total = n_learn + len(prompt_rows)

        key = (f.h, f.w, cfg.dim)
        if key not in self._pos_cache:
            self._pos_cache[key] = _grid_pos_enc(f.h, f.w, cfg.dim)
        mem_k = ag.add(f.data, Tensor(self._pos_cache[key]))

        prev_tok_logits = None
        recorded = [] if record_attention else None
        fine = pooled = None
        for i in range(cfg.layers):
            allow = np.ones((n_total, hw), dtype=bool)
            if i > 0:
                allow[:n_learn] = prev_tok_logits[:n_learn] > 0.0  # sigmoid > 0.5
            for r, geo in enumerate(geo_allow):
                if geo is not None:
                    allow[n_learn + r] = geo
                elif i > 0:
                    allow[n_learn + r] = prev_tok_logits[n_learn + r] > 0.0
            bias = AttentionMask(allow).bias(dtype=f.data.dtype.type)

            # cross-attention restricted per query, then self-attention, then FFN
            q_in = x
            ca_out, weights = self._attend_cross(f"layer{i}.ca", q_in, f.data, mem_k, bias)
            if recorded is not None:
                recorded.append(weights.data.copy())
            x = self._norm(f"layer{i}.ca_ln", ag.add(x, ca_out))
            sa_out, _ = self._attend(f"layer{i}.sa", x, x)
            x = self._norm(f"layer{i}.sa_ln", ag.add(x, sa_out))
            h = ag.gelu(self._linear(f"layer{i}.ffn.1", x))
            x = self._norm(f"layer{i}.ffn_ln", ag.add(x, self._linear(f"layer{i}.ffn.2", h)))

            fine, pooled = self._predict(x, f)
            prev_tok_logits = pooled.data

        class_logits = self._linear("cls_head", x)
        scores = ag.amax(ag.sigmoid(class_logits), axis=-1)
        origins = ["learnable"] * n_learn + [p.kind for p in prompts]
        return ObjectQuerySet(queries=x, mask_logits=pooled, mask_logits_fine=fine,
                              class_logits=class_logits, scores=scores, origins=origins,
                              fine_h=f.mask_h, fine_w=f.mask_w, attention=recorded)

    def _attend_cross(self, blk, x, mem_v, mem_k, bias):
        c = self.config.dim
        q = self._linear(f"{blk}.q", x)
        k = self._linear(f"{blk}.k", mem_k)
        v = self._linear(f"{blk}.v", mem_v)
        logits = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / np.sqrt(c))
        logits = ag.add(logits, Tensor(bias))
        weights = ag.softmax(logits, axis=-1)
        out = self._linear(f"{blk}.o", ag.matmul(weights, v))
        return out, weights
