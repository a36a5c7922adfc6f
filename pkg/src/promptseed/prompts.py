"""Class registry and the two learnable prompt sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backend import Prompt


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class ForegroundClass:
    name: str
    synonyms: tuple[str, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return (self.name, *self.synonyms)


@dataclass(frozen=True)
class ClassRegistry:
    foreground: tuple[ForegroundClass, ...]
    background: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.foreground:
            raise ValueError("registry needs at least one foreground class")
        fg = [c.name for c in self.foreground]
        names = fg + list(self.background)
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique: {names}")

    @classmethod
    def from_names(cls, foreground, background=()):
        return cls(tuple(ForegroundClass(n) for n in foreground), tuple(background))

    @classmethod
    def from_dict(cls, doc: dict) -> ClassRegistry:
        fg = []
        for item in doc["foreground"]:
            if isinstance(item, str):
                fg.append(ForegroundClass(item))
            else:
                fg.append(ForegroundClass(item["name"], tuple(item.get("synonyms", ()))))
        return cls(tuple(fg), tuple(doc.get("background", ())))

    @classmethod
    def load(cls, path) -> ClassRegistry:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "foreground": [{"name": c.name, "synonyms": list(c.synonyms)} for c in self.foreground],
            "background": list(self.background),
        }

    @property
    def num_foreground(self) -> int:
        return len(self.foreground)

    @property
    def num_background(self) -> int:
        return len(self.background)

    @property
    def num_classes(self) -> int:
        return self.num_foreground + self.num_background

    def names(self) -> list[str]:
        return [c.name for c in self.foreground] + list(self.background)


@dataclass
class PromptContext:
    """Learnable context vectors.

    ``vectors`` is G x N x d: one group for the unified strategy, one per
    class (foreground first, then background) for the class-specific one.
    ``placement`` is the position of the class label token(s).
    """

    vectors: torch.Tensor
    strategy: str = "unified"
    placement: str = "append"
    background_has_label: bool = True

    def __post_init__(self):
        if self.strategy not in ("unified", "class_specific"):
            raise StrategyError(f"unknown strategy {self.strategy!r}")
        if self.placement not in ("prepend", "append"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.vectors.ndim != 3 or self.vectors.shape[1] < 1:
            raise ValueError(f"context must be G x N x d with N >= 1, got {tuple(self.vectors.shape)}")
        if self.strategy == "unified" and self.vectors.shape[0] != 1:
            raise StrategyError("unified context holds exactly one group")

    @property
    def n_ctx(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def group(self, i: int) -> torch.Tensor:
        return self.vectors[0 if self.strategy == "unified" else i]


def init_context(strategy: str, n_ctx: int = 16, dim: int = 32, seed: int = 0, *,
                 num_groups: int = 1, expected_dim: int | None = None,
                 placement: str | None = None, background_has_label: bool | None = None,
                 dtype: torch.dtype = torch.float64) -> PromptContext:
    """Draw context vectors i.i.d. from N(0, 0.02^2).

    ``num_groups`` is only used by the class-specific strategy and should be
    |F| + |B|.  ``placement`` defaults follow the role of each strategy:
    the label is appended for the unified (classification) context and
    prepended for the class-specific (segmentation) one.
    """
    if n_ctx < 1:
        raise ValueError("n_ctx must be >= 1")
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"context dim {dim} does not match encoder dim {expected_dim}")
    groups = 1 if strategy == "unified" else num_groups
    gen = torch.Generator().manual_seed(seed)
    vectors = torch.randn(groups, n_ctx, dim, generator=gen, dtype=dtype) * 0.02
    if placement is None:
        placement = "append" if strategy == "unified" else "prepend"
    if background_has_label is None:
        background_has_label = strategy == "unified"
    return PromptContext(vectors, strategy, placement, background_has_label)


def _prompt(ctx: torch.Tensor, label: tuple[int, ...], context_first: bool) -> Prompt:
    if context_first:
        return Prompt(ctx, suffix=label)
    return Prompt(ctx, prefix=label)


def build_classification_prompts(registry: ClassRegistry, ctx: PromptContext, tokenizer) -> list[list[Prompt]]:
    """``[V]_1..[V]_N [CLS]`` for every class in F then B; one prompt per synonym."""
    if ctx.strategy != "unified":
        raise StrategyError("classification prompts need a unified context")
    shared = ctx.vectors[0]
    first = ctx.placement == "append"
    out = [[_prompt(shared, tokenizer.encode(n), first) for n in c.names] for c in registry.foreground]
    out += [[_prompt(shared, tokenizer.encode(b), first)] for b in registry.background]
    return out


def build_segmentation_prompts(registry: ClassRegistry, ctx: PromptContext, tokenizer) -> list[list[Prompt]]:
    """``[CLS^c] [V]^c_1..[V]^c_N`` for foreground, ``[V]^b_1..[V]^b_N`` for background."""
    if ctx.strategy != "class_specific":
        raise StrategyError("segmentation prompts need a class-specific context")
    if ctx.vectors.shape[0] != registry.num_classes:
        raise ValueError(f"expected {registry.num_classes} context groups, got {ctx.vectors.shape[0]}")
    first = ctx.placement == "append"
    out = []
    for i, c in enumerate(registry.foreground):
        out.append([_prompt(ctx.vectors[i], tokenizer.encode(n), first) for n in c.names])
    for j, b in enumerate(registry.background):
        label = tokenizer.encode(b) if ctx.background_has_label else ()
        out.append([_prompt(ctx.vectors[registry.num_foreground + j], label, first)])
    return out


@dataclass
class PromptSet:
    """Prompts grouped per class with a synonym pooling rule."""

    prompts: list[list[Prompt]]
    pooling: str = "max"
    _sizes: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        self._sizes = [len(p) for p in self.prompts]

    def text_embeddings(self, encoder) -> torch.Tensor:
        return encoder.encode_prompts([p for group in self.prompts for p in group])

    def logits(self, encoder, image_embedding: torch.Tensor, tau: float) -> torch.Tensor:
        """One logit per class, synonyms pooled."""
        flat = self.text_embeddings(encoder) @ image_embedding / tau
        pooled = []
        for chunk in flat.split(self._sizes):
            pooled.append(chunk.max() if self.pooling == "max" else chunk.mean())
        return torch.stack(pooled)
