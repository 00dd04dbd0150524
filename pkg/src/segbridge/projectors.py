"""MLP projectors between perception width C and language-model width D.

Three pathways exist: pixel tokens (C -> D), object/prompt tokens
(C -> D), and the text-to-perception return path (D_seg -> C) used to
decode segmentation embeddings. The ``sharing`` mode controls how many
distinct visual MLPs are instantiated:

- ``separate``: pixel, object, and prompt tokens each get their own MLP
- ``O``: object and prompt tokens share one MLP (default)
- ``O&P``: a single MLP serves pixel, object, and prompt tokens

The round-trip regularizer pushes object tokens to survive projection
into language space and back: mean((T_ov - P_t(P_v(T_ov)))^2).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .prior import VisualTokens

SHARING_MODES = ("separate", "O", "O&P")
SEG_SOURCES = ("last", "mean", "concat")


@dataclass
class ProjectorConfig:
    c: int = 64
    d: int = 64
    sharing: str = "O"
    seg_source: str = "last"
    llm_layers: int = 2

    def __post_init__(self):
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {self.sharing!r}, expected one of {SHARING_MODES}")
        if self.seg_source not in SEG_SOURCES:
            raise ConfigError(f"unknown seg source {self.seg_source!r}, expected one of {SEG_SOURCES}")

    @property
    def seg_dim(self) -> int:
        return self.d * self.llm_layers if self.seg_source == "concat" else self.d


class Projectors:
    def __init__(self, config: ProjectorConfig, rng: np.random.Generator):
        self.config = config
        self._params = OrderedDict()

        def mlp(name, d_in, d_hidden, d_out):
            self._params[f"proj.{name}.w1"] = Tensor(
                rng.normal(0.0, 0.02, size=(d_in, d_hidden)).astype(np.float32), requires_grad=True)
            self._params[f"proj.{name}.b1"] = Tensor(np.zeros(d_hidden, dtype=np.float32), requires_grad=True)
            self._params[f"proj.{name}.w2"] = Tensor(
                rng.normal(0.0, 0.02, size=(d_hidden, d_out)).astype(np.float32), requires_grad=True)
            self._params[f"proj.{name}.b2"] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

        c, d = config.c, config.d
        mlp("v_pixel", c, d, d)
        if config.sharing != "O&P":
            mlp("v_object", c, d, d)
        if config.sharing == "separate":
            mlp("v_prompt", c, d, d)
        mlp("t", config.seg_dim, d, c)

    def params(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def set_frozen(self, frozen: bool = True):
        for t in self._params.values():
            t.requires_grad = not frozen

    def _mlp(self, name, x: Tensor) -> Tensor:
        p = self._params
        h = ag.gelu(ag.add(ag.matmul(x, p[f"proj.{name}.w1"]), p[f"proj.{name}.b1"]))
        return ag.add(ag.matmul(h, p[f"proj.{name}.w2"]), p[f"proj.{name}.b2"])

    def _object_name(self) -> str:
        return "v_pixel" if self.config.sharing == "O&P" else "v_object"

    def _prompt_name(self) -> str:
        if self.config.sharing == "separate":
            return "v_prompt"
        return self._object_name()

    def project_pixel(self, x: Tensor) -> Tensor:
        return self._mlp("v_pixel", x)

    def project_object(self, x: Tensor) -> Tensor:
        return self._mlp(self._object_name(), x)

    def project_prompt(self, x: Tensor) -> Tensor:
        """Project prompt-derived query embeddings; rank 1 or 2 input."""
        if x.ndim == 1:
            return ag.reshape(self._mlp(self._prompt_name(), ag.reshape(x, (1, x.shape[0]))), (self.config.d,))
        return self._mlp(self._prompt_name(), x)

    def project_visual(self, tv: VisualTokens) -> Tensor:
        """Project pixel and object tokens, preserving [pixel; object] order."""
        if tv.pixel.shape[1] != self.config.c:
            raise DimensionError(f"visual token width {tv.pixel.shape[1]} does not match projector input {self.config.c}")
        pixel = self.project_pixel(tv.pixel)
        if tv.object.shape[0] == 0:
            return pixel
        return ag.concat([pixel, self.project_object(tv.object)], axis=0)

    def project_text(self, h: Tensor) -> Tensor:
        """Map a segmentation hidden state back to perception width."""
        if h.shape != (self.config.seg_dim,):
            raise DimensionError(f"seg hidden shape {h.shape}, expected ({self.config.seg_dim},)")
        return ag.reshape(self._mlp("t", ag.reshape(h, (1, self.config.seg_dim))), (self.config.c,))

    def reg_loss(self, t_ov: Tensor) -> Tensor:
        """Round-trip reconstruction error of object tokens, mean-reduced."""
        if t_ov.shape[0] == 0:
            return Tensor(np.zeros((), dtype=np.float32))
        proj = self.project_object(t_ov)  # [K, D]
        if self.config.seg_source == "concat":
            # the return path expects all-layer concatenation; tile the single
            # projection so the round trip stays defined under this ablation
            proj = ag.concat([proj] * self.config.llm_layers, axis=1)
        p = self._params
        h = ag.gelu(ag.add(ag.matmul(proj, p["proj.t.w1"]), p["proj.t.b1"]))
        back = ag.add(ag.matmul(h, p["proj.t.w2"]), p["proj.t.b2"])
        diff = ag.sub(t_ov, back)
        return ag.mean(ag.mul(diff, diff))
