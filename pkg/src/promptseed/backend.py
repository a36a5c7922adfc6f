"""Frozen image/text encoders.

The toy encoder is a small two-block transformer that exposes the three
things the rest of the package needs from a vision-language model: the
feature map entering the last attention layer, the attention weights of
that layer, and unit-normalized image/text embeddings whose cosine
similarity gives the classification logits.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

GRAD_MODES = ("none", "first_order", "second_order")

# colours of the synthetic world and the words the toy text tower knows them by
TOY_PALETTE = {
    "red": (0.85, 0.18, 0.15),
    "green": (0.2, 0.7, 0.2),
    "blue": (0.2, 0.3, 0.85),
    "sky": (0.72, 0.72, 0.66),
    "soil": (0.42, 0.33, 0.22),
}
TOY_CONCEPTS = {
    "tomato": "red",
    "lime": "green",
    "green": "green",
    "citrus": "green",
    "blueberry": "blue",
    "sky": "sky",
    "soil": "soil",
}


class DimensionError(ValueError):
    pass


class PromptOverflowError(ValueError):
    pass


@dataclass
class EncoderOutputs:
    """Per-image encoder outputs.

    ``feature_map`` is K x H x W, ``attention`` is HW x HW (heads averaged),
    ``image_embedding`` has length d.  When ``grad_mode`` is not ``"none"``
    the feature map is a leaf tensor with ``requires_grad`` set and the
    embedding is computed from it, so class scores can be differentiated
    with respect to the features.
    """

    feature_map: torch.Tensor
    attention: torch.Tensor
    image_embedding: torch.Tensor
    grad_mode: str = "none"


@dataclass
class TextEmbedding:
    vector: torch.Tensor
    class_id: int | None = None


@dataclass
class Prompt:
    """Token ids around a block of learnable context vectors.

    The encoded sequence is ``prefix`` tokens, then the rows of ``context``,
    then ``suffix`` tokens.
    """

    context: torch.Tensor
    prefix: tuple[int, ...] = ()
    suffix: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.prefix) + self.context.shape[0] + len(self.suffix)


def compute_logit(image_embedding, text_embedding, tau: float = 0.01):
    """Cosine similarity of two unit vectors divided by the temperature."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(image_embedding, torch.Tensor) or isinstance(text_embedding, torch.Tensor):
        return (torch.as_tensor(image_embedding) * torch.as_tensor(text_embedding)).sum(-1) / tau
    return float(np.dot(np.asarray(image_embedding), np.asarray(text_embedding)) / tau)


class WordPieceTable:
    """Lowercase word-piece tokenizer backed by a hashed vocabulary."""

    def __init__(self, vocab_size: int = 1024, piece_len: int = 4):
        self.vocab_size = vocab_size
        self.piece_len = piece_len

    def pieces(self, text: str) -> list[str]:
        words = "".join(ch if ch.isalnum() else " " for ch in text.lower()).split()
        out = []
        for word in words:
            for start in range(0, len(word), self.piece_len):
                chunk = word[start:start + self.piece_len]
                out.append(chunk if start == 0 else "##" + chunk)
        return out

    def encode(self, text: str) -> tuple[int, ...]:
        # id 0 is reserved
        return tuple(zlib.crc32(p.encode()) % (self.vocab_size - 1) + 1 for p in self.pieces(text))


def _layer_norm(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:])


class ToyEncoder:
    """Deterministic frozen encoder pair with Gaussian(0, 0.02^2) weights.

    The last image attention layer uses identity-plus-noise query/key
    projections and an inverse temperature ``attn_scale`` so its weights
    follow feature similarity; with purely random 0.02-scale projections
    the attention would be uniform and useless as an affinity.

    Random towers share no semantics, so words listed in ``concepts`` are
    grounded after initialization: the first word piece of each gets the
    token embedding whose text projection points at the image embedding
    of a uniform raster of the word's colour.  ``grounding`` scales those
    embeddings; 0 disables grounding.

    ``text_cone`` adds a fixed shared axis to every text embedding before
    the final normalization.  This mimics the gap between image and text
    embeddings in real contrastive models and keeps logit spreads at
    temperature 0.01 in a range where the softmax does not saturate.
    """

    def __init__(
        self,
        dim: int = 32,
        channels: int = 32,
        patch: int = 16,
        in_channels: int = 3,
        heads: int = 2,
        max_len: int = 32,
        vocab_size: int = 1024,
        attn_scale: float = 1.0,
        seed: int = 0,
        std: float = 0.02,
        dtype: torch.dtype = torch.float64,
        max_tokens: int = 256,
        concepts: dict[str, str] | None = None,
        palette: dict[str, tuple[float, float, float]] | None = None,
        grounding: float = 24.0,
        text_cone: float = 2.0,
        centered_grounding: bool = True,
    ):
        self.dim = dim
        self.channels = channels
        self.patch = patch
        self.in_channels = in_channels
        self.heads = heads
        self.max_len = max_len
        self.attn_scale = attn_scale
        self.dtype = dtype
        self.text_cone = text_cone
        self.tokenizer = WordPieceTable(vocab_size)
        gen = torch.Generator().manual_seed(seed)

        def g(*shape):
            return torch.randn(*shape, generator=gen, dtype=dtype) * std

        k = channels
        eye = torch.eye(k, dtype=dtype)
        self.weights: dict[str, torch.Tensor] = {
            "patch_embed": g(in_channels * patch * patch, k),
            "pos_embed": g(max_tokens, k),
            "b1_qkv": g(k, 3 * k),
            "b1_out": g(k, k),
            "b1_fc1": g(k, 2 * k),
            "b1_fc2": g(2 * k, k),
            "b2_q": eye + g(k, k),
            "b2_k": eye + g(k, k),
            "b2_v": g(k, k),
            "b2_out": g(k, k),
            "img_proj": g(k, dim),
            "tok_embed": g(vocab_size, dim),
            "txt_pos": g(max_len, dim),
            "t_qkv": g(dim, 3 * dim),
            "t_out": g(dim, dim),
            "t_fc1": g(dim, 2 * dim),
            "t_fc2": g(2 * dim, dim),
            "txt_proj": g(dim, dim),
            "txt_axis": g(dim),
        }
        for w in self.weights.values():
            w.requires_grad_(False)
        if grounding:
            self._ground(TOY_CONCEPTS if concepts is None else concepts,
                         TOY_PALETTE if palette is None else palette, grounding, patch * 2,
                         centered_grounding)

    def _ground(self, concepts, palette, scale, side, centered):
        pinv = torch.linalg.pinv(self.weights["txt_proj"])
        embs = {}
        for colour, rgb in palette.items():
            raster = torch.ones(side, side, self.in_channels, dtype=self.dtype) * torch.tensor(rgb, dtype=self.dtype)
            with torch.no_grad():
                embs[colour] = self.last_block(self.features(raster))[1]
        centre = torch.stack(list(embs.values())).mean(0) if centered else 0.0
        for word, colour in concepts.items():
            vec = (embs[colour] - centre) @ pinv
            self.weights["tok_embed"][self.tokenizer.encode(word)[0]] = scale * vec / vec.norm()

    # image side -------------------------------------------------------

    def _patchify(self, raster: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        h0, w0, c = raster.shape
        p = self.patch
        if h0 % p or w0 % p or c != self.in_channels:
            raise DimensionError(
                f"raster {tuple(raster.shape)} is not tileable into {p}x{p}x{self.in_channels} patches")
        h, w = h0 // p, w0 // p
        patches = raster.reshape(h, p, w, p, c).permute(0, 2, 1, 3, 4).reshape(h * w, p * p * c)
        return patches, h, w

    def _first_block(self, tokens: torch.Tensor) -> torch.Tensor:
        W = self.weights
        k = self.channels
        q, kk, v = (_layer_norm(tokens) @ W["b1_qkv"]).split(k, dim=-1)
        attn = torch.softmax(q @ kk.T / k ** 0.5, dim=-1)
        x = tokens + attn @ v @ W["b1_out"]
        return x + F.gelu(_layer_norm(x) @ W["b1_fc1"]) @ W["b1_fc2"]

    def features(self, raster) -> torch.Tensor:
        """Tokens entering the last attention layer, as a K x H x W map."""
        raster = torch.as_tensor(np.asarray(raster) if not isinstance(raster, torch.Tensor) else raster,
                                 dtype=self.dtype)
        patches, h, w = self._patchify(raster)
        tokens = patches @ self.weights["patch_embed"] + self.weights["pos_embed"][: h * w]
        x = self._first_block(tokens)
        return x.T.reshape(self.channels, h, w)

    def last_block(self, feature_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the last attention layer; returns (attention HWxHW, image embedding)."""
        W = self.weights
        k, h, w = feature_map.shape
        x = feature_map.reshape(k, h * w).T
        xn = _layer_norm(x)
        q, kk = xn @ W["b2_q"], xn @ W["b2_k"]
        hd = k // self.heads
        per_head = []
        for i in range(self.heads):
            sl = slice(i * hd, (i + 1) * hd)
            per_head.append(torch.softmax(self.attn_scale * q[:, sl] @ kk[:, sl].T / hd ** 0.5, dim=-1))
        attn = torch.stack(per_head).mean(0)
        y = x + attn @ (xn @ W["b2_v"]) @ W["b2_out"]
        pooled = _layer_norm(y).mean(0)
        emb = pooled @ W["img_proj"]
        return attn, emb / emb.norm()

    def encode_image(self, raster, grad_mode: str = "none") -> EncoderOutputs:
        if grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode {grad_mode!r}")
        with torch.no_grad():
            fmap = self.features(raster)
        if grad_mode == "none":
            with torch.no_grad():
                attn, emb = self.last_block(fmap)
        else:
            fmap = fmap.clone().requires_grad_(True)
            attn, emb = self.last_block(fmap)
        return EncoderOutputs(fmap, attn.detach(), emb, grad_mode)

    # text side --------------------------------------------------------

    def token_embeddings(self, ids: Sequence[int]) -> torch.Tensor:
        return self.weights["tok_embed"][list(ids)] if ids else self.weights["tok_embed"][:0]

    def encode_prompt(self, prompt: Prompt, class_id: int | None = None) -> TextEmbedding:
        if len(prompt) > self.max_len:
            raise PromptOverflowError(f"prompt length {len(prompt)} exceeds max length {self.max_len}")
        ctx = prompt.context.to(self.dtype)
        if ctx.ndim != 2 or ctx.shape[1] != self.dim:
            raise DimensionError(f"context must be N x {self.dim}, got {tuple(ctx.shape)}")
        seq = torch.cat([self.token_embeddings(prompt.prefix), ctx, self.token_embeddings(prompt.suffix)])
        return TextEmbedding(self._text_forward(seq), class_id)

    def _text_forward(self, seq: torch.Tensor) -> torch.Tensor:
        W = self.weights
        d = self.dim
        x = seq + W["txt_pos"][: seq.shape[0]]
        q, k, v = (_layer_norm(x) @ W["t_qkv"]).split(d, dim=-1)
        x = x + torch.softmax(q @ k.T / d ** 0.5, dim=-1) @ v @ W["t_out"]
        x = x + F.gelu(_layer_norm(x) @ W["t_fc1"]) @ W["t_fc2"]
        emb = x.mean(0) @ W["txt_proj"]
        emb = emb / emb.norm()
        if self.text_cone:
            emb = emb + self.text_cone * W["txt_axis"] / W["txt_axis"].norm()
            emb = emb / emb.norm()
        return emb

    def encode_prompts(self, prompts: Sequence[Prompt]) -> torch.Tensor:
        """Stack of unit text embeddings, one row per prompt."""
        return torch.stack([self.encode_prompt(p).vector for p in prompts])

    def weight_snapshot(self) -> dict[str, bytes]:
        return {name: w.numpy().tobytes() for name, w in self.weights.items()}


@dataclass
class OracleBackend:
    """Test backend that fabricates CAMs from ground truth."""

    noise: float = 0.0
    seed: int = 0

    def cams(self, masks, class_ids):
        return oracle_cams(masks, class_ids, self.noise, self.seed)


@dataclass
class ExternalBackend:
    """Adapter for a real foundation model supplied as a callback."""

    encode_image_fn: Callable[..., EncoderOutputs]
    encode_prompt_fn: Callable[[Prompt], TextEmbedding] | None = None
    dim: int = field(default=512)

    def encode_image(self, raster, grad_mode: str = "none") -> EncoderOutputs:
        return self.encode_image_fn(raster, grad_mode)

    def encode_prompt(self, prompt: Prompt, class_id: int | None = None) -> TextEmbedding:
        if self.encode_prompt_fn is None:
            raise NotImplementedError("external backend has no text encoder callback")
        return self.encode_prompt_fn(prompt)


def make_backend(config: dict):
    kind = config.get("backend", "toy")
    if kind == "toy":
        return ToyEncoder(**config.get("toy", {}))
    if kind == "oracle":
        return OracleBackend(**config.get("oracle", {}))
    if kind == "external":
        if "encode_image_fn" not in config:
            raise ValueError("external backend needs an 'encode_image_fn' callback")
        return ExternalBackend(config["encode_image_fn"], config.get("encode_prompt_fn"))
    raise ValueError(f"unknown backend {kind!r}")


def oracle_cams(masks, class_ids, noise: float = 0.0, seed: int = 0):
    """Indicator maps plus clipped Gaussian noise.

    ``masks`` is C x H x W (boolean); returns a refined :class:`CamStack`
    with values in [0, 1].
    """
    from .cam import CamStack

    ind = np.asarray(masks, dtype=np.float64)
    if ind.ndim == 2:
        ind = ind[None]
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if noise > 0:
        rng = np.random.default_rng(seed)
        ind = np.clip(ind + rng.normal(0.0, noise, ind.shape), 0.0, 1.0)
    return CamStack(ind, list(class_ids), refined=True)
