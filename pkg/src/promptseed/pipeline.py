"""Coarse-to-fine prompt training and seed generation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import cam as cammod
from . import losses, sams
from .backend import EncoderOutputs, ToyEncoder
from .prompts import (ClassRegistry, PromptContext, PromptSet, build_classification_prompts,
                      build_segmentation_prompts, init_context)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 25
    max_steps: int | None = None
    learning_rate: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    tau: float = 0.01
    caa_iters: int = 2
    box_threshold: float = 0.4
    affinity_norm: str = "row"
    t_r: float = sams.DEFAULT_T_R
    alpha: float = sams.DEFAULT_ALPHA
    t_m_whole: float = sams.DEFAULT_T_M_WHOLE
    t_m: float = sams.DEFAULT_T_M
    nms_iou: float = sams.DEFAULT_NMS_IOU
    n_ctx: int = 16
    rng_seed: int = 0
    coarse_refresh: str = "per_step"
    pooling: str = "max"
    seg_loss: str = "cal"
    cal_input: str = "peak"
    cal_weight: float = 1.0
    seg_scaling: list | str | None = None
    encoder_seed: int = 0
    attn_scale: float = 1.0
    toy_grounding: float = 24.0
    toy_text_cone: float = 2.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.t_r <= 1:
            raise ValueError("t_r must lie in (0, 1]")
        if self.alpha <= 0 or self.tau <= 0:
            raise ValueError("alpha and tau must be positive")
        if self.caa_iters < 0:
            raise ValueError("caa_iters must be >= 0")
        if self.coarse_refresh not in ("per_step", "per_epoch"):
            raise ValueError(f"unknown coarse_refresh {self.coarse_refresh!r}")
        if self.cal_input not in ("raw", "peak"):
            raise ValueError(f"unknown cal_input {self.cal_input!r}")
        if self.seg_loss not in ("cal", "sigmoid_ce"):
            raise ValueError(f"unknown seg_loss {self.seg_loss!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def qsp_kwargs(self) -> dict:
        return {"t_m_whole": self.t_m_whole, "nms_iou": self.nms_iou, "t_r": self.t_r, "t_m": self.t_m}


@dataclass
class TrainState:
    cls_ctx: PromptContext
    seg_ctx: PromptContext
    step: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class Sample:
    """An image prepared for repeated forward passes: frozen features and superpixels."""

    image: np.ndarray
    present: list[int]
    features: torch.Tensor
    qsp: sams.QuasiSuperpixelSet
    key: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class StreamResult:
    logits: torch.Tensor
    cams: cammod.CamStack
    refined: cammod.CamStack | None = None
    seed: sams.SeedMap | None = None


def init_state(registry: ClassRegistry, config: TrainConfig, dim: int) -> TrainState:
    seed = config.rng_seed
    cls_ctx = init_context("unified", config.n_ctx, dim, seed, expected_dim=dim)
    seg_ctx = init_context("class_specific", config.n_ctx, dim, seed + 1,
                           num_groups=registry.num_classes, expected_dim=dim)
    return TrainState(cls_ctx, seg_ctx)


def upsample(maps: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a C x h x w stack."""
    if maps.shape[0] == 0:
        return maps.new_zeros(0, *size)
    return F.interpolate(maps[None], size=size, mode="bilinear", align_corners=False)[0]


class Framework:
    """Frozen encoder + registry + hyper-parameters; the contexts live in :class:`TrainState`."""

    def __init__(self, registry: ClassRegistry, config: TrainConfig | None = None, encoder=None):
        self.registry = registry
        self.config = config or TrainConfig()
        self.encoder = encoder or ToyEncoder(
            seed=self.config.encoder_seed, attn_scale=self.config.attn_scale,
            grounding=self.config.toy_grounding, text_cone=self.config.toy_text_cone)

    # preparation -------------------------------------------------------

    def prepare(self, image, present: Sequence[int], masks, key: str = "") -> Sample:
        image = np.asarray(image, dtype=np.float64)
        with torch.no_grad():
            feats = self.encoder.features(image)
        if isinstance(masks, sams.QuasiSuperpixelSet):
            qsp = masks
        else:
            qsp = sams.generate_quasi_superpixels(masks, **self.config.qsp_kwargs())
        return Sample(image, sorted(set(present)), feats, qsp, key)

    def prepare_scene(self, scene, key: str = "") -> Sample:
        return self.prepare(scene.image, scene.present, scene.masks, key)

    def init_state(self) -> TrainState:
        return init_state(self.registry, self.config, self.encoder.dim)

    # streams -----------------------------------------------------------

    def _outputs(self, sample: Sample) -> EncoderOutputs:
        fmap = sample.features.clone().requires_grad_(True)
        attn, emb = self.encoder.last_block(fmap)
        return EncoderOutputs(fmap, attn.detach(), emb, "second_order")

    def _prompt_set(self, ctx: PromptContext, segmentation: bool) -> PromptSet:
        build = build_segmentation_prompts if segmentation else build_classification_prompts
        return PromptSet(build(self.registry, ctx, self.encoder.tokenizer), self.config.pooling)

    def _stream(self, sample: Sample, ctx: PromptContext, segmentation: bool,
                create_graph: bool, with_seed: bool) -> StreamResult:
        cfg = self.config
        outputs = self._outputs(sample)
        logits = self._prompt_set(ctx, segmentation).logits(self.encoder, outputs.image_embedding, cfg.tau)
        n_fg = self.registry.num_foreground
        background = list(range(n_fg, self.registry.num_classes))
        scores = cammod.softmax_scores(logits, sample.present, background)
        cams = cammod.gradcam_stack(scores, outputs, create_graph)
        if not with_seed:
            return StreamResult(logits, cams)
        refined, seed = self.seed_from_cams(sample, cams, outputs.attention)
        return StreamResult(logits, cams, refined, seed)

    def seed_from_cams(self, sample: Sample, cams: cammod.CamStack, attention) -> tuple[cammod.CamStack, sams.SeedMap]:
        """CAA refinement, normalization, upsampling and superpixel seeding."""
        cfg = self.config
        with torch.no_grad():
            raw = cammod.CamStack(cams.maps.detach(), cams.class_ids)
            refined = cammod.refine_stack(raw, attention, cfg.caa_iters, cfg.box_threshold, cfg.affinity_norm)
            norm = torch.stack([cammod.normalize_cam(m) for m in refined.maps]) if len(refined.class_ids) \
                else refined.maps
            full = upsample(norm, sample.size).numpy()
        if not sample.present:
            return refined, sams.SeedMap(np.zeros(sample.size, dtype=np.int64))
        seed = sams.seed_from_cams(sample.qsp, full, cams.class_ids, cfg.alpha)
        return refined, seed

    def coarse_stream(self, sample: Sample, state: TrainState, with_seed: bool = True) -> StreamResult:
        """Classification prompts -> logits, CAMs and a detached coarse seed map."""
        return self._stream(sample, state.cls_ctx, False, False, with_seed)

    def fine_stream(self, sample: Sample, state: TrainState, with_seed: bool = True,
                    create_graph: bool = False) -> StreamResult:
        """Segmentation prompts -> CAMs and the fine seed map."""
        return self._stream(sample, state.seg_ctx, True, create_graph, with_seed)

    # training ----------------------------------------------------------

    def sample_losses(self, sample: Sample, state: TrainState, coarse_seed=None,
                      seg_scale=None) -> tuple[losses.LossBreakdown, np.ndarray]:
        coarse = self.coarse_stream(sample, state, with_seed=coarse_seed is None)
        seed = coarse.seed.labels if coarse_seed is None else coarse_seed
        mcl = losses.mcl_loss(coarse.logits[: self.registry.num_foreground], sample.present)
        fine = self.fine_stream(sample, state, with_seed=False, create_graph=True)
        m_s = upsample(fine.cams.maps, sample.size)
        if self.config.seg_loss == "cal":
            if self.config.cal_input == "peak":
                m_s = m_s / m_s.detach().amax(dim=(1, 2), keepdim=True).clamp_min(1e-12)
            fg, bg, cal = losses.cal_loss(seed, m_s, sample.present)
        else:
            targets = losses.coarse_binary_masks(seed, sample.present).numpy()
            cal = losses.baseline_loss("sigmoid_ce", m_s, targets, seg_scale)
            fg = bg = cal.new_zeros(())
        cal = self.config.cal_weight * cal
        return losses.LossBreakdown(mcl, fg, bg, cal, losses.total_loss(mcl, cal)), seed

    def train(self, samples: Sequence[Sample], state: TrainState | None = None) -> TrainState:
        cfg = self.config
        if not samples:
            raise ValueError("training needs a nonempty dataset")
        usable = []
        for s in samples:
            if s.present:
                usable.append(s)
            else:
                log.warning("skipping image %s without present classes", s.key or "?")
        if not usable:
            raise ValueError("no image has a present class")
        state = state or self.init_state()
        params = [state.cls_ctx.vectors, state.seg_ctx.vectors]
        for p in params:
            p.requires_grad_(True)
        seg_scale = losses.make_scaling(cfg.seg_scaling if not isinstance(cfg.seg_scaling, list)
                                        else tuple(cfg.seg_scaling))
        if seg_scale is not None:
            params += [p for p in seg_scale.parameters()]
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        per_epoch = math.ceil(len(usable) / cfg.batch_size)
        total = cfg.max_steps if cfg.max_steps is not None else per_epoch * cfg.epochs
        warmup = per_epoch * cfg.warmup_epochs
        rng = np.random.default_rng(cfg.rng_seed)
        cached: dict[int, np.ndarray] = {}
        step = 0
        while step < total:
            order = rng.permutation(len(usable))
            if cfg.coarse_refresh == "per_epoch":
                cached = {i: self.coarse_stream(usable[i], state).seed.labels for i in range(len(usable))}
            for b in range(0, len(order), cfg.batch_size):
                if step >= total:
                    break
                lr = _lr_at(step, total, warmup, cfg.learning_rate, cfg.warmup_lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad()
                parts = []
                for i in order[b:b + cfg.batch_size]:
                    br, _ = self.sample_losses(usable[i], state, cached.get(int(i)), seg_scale)
                    parts.append(br)
                loss = torch.stack([p.total for p in parts]).mean()
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
                loss.backward()
                opt.step()
                record = {k: float(np.mean([float(torch.as_tensor(getattr(p, k)).detach()) for p in parts]))
                          for k in ("mcl", "cal_fg", "cal_bg", "cal", "total")}
                record.update(step=step, lr=lr)
                state.history.append(record)
                step += 1
                state.step += 1
        for p in (state.cls_ctx.vectors, state.seg_ctx.vectors):
            p.requires_grad_(False)
        return state

    def evaluate_loss(self, samples: Sequence[Sample], state: TrainState) -> float:
        """Mean total loss over samples with present classes, no update."""
        vals = [float(self.sample_losses(s, state)[0].total.detach()) for s in samples if s.present]
        return float(np.mean(vals))

    # seeds -------------------------------------------------------------

    def seeds(self, sample: Sample, state: TrainState, mode: str = "fine") -> sams.SeedMap:
        if mode not in ("coarse", "fine"):
            raise ValueError(f"unknown mode {mode!r}")
        if not sample.present:
            return sams.SeedMap(np.zeros(sample.size, dtype=np.int64))
        res = self.fine_stream(sample, state) if mode == "fine" else self.coarse_stream(sample, state)
        return res.seed

    def class_names(self) -> dict[int, str]:
        return {i + 1: c.name for i, c in enumerate(self.registry.foreground)}

    def generate_seeds(self, items: Sequence[tuple[str, Sample]], state: TrainState, out_dir,
                       mode: str = "fine") -> list[Path]:
        """Write ``<id>.png`` plus a JSON sidecar per image."""
        from .evalio import codecs

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for key, sample in items:
            path = out / f"{key}.png"
            seed = self.seeds(sample, state, mode)
            try:
                codecs.write_seed(path, seed, self.class_names())
            except OSError as exc:
                raise OSError(f"failed writing seed for {key} to {path}: {exc}") from exc
            written.append(path)
        return written


def _lr_at(step: int, total: int, warmup: int, lr: float, warmup_lr: float) -> float:
    """Constant warmup, then cosine decay over the remaining steps."""
    if step < warmup:
        return warmup_lr
    span = max(total - warmup, 1)
    return 0.5 * lr * (1 + math.cos(math.pi * (step - warmup) / span))


# state files ------------------------------------------------------------

def save_state(path, state: TrainState, config: TrainConfig, registry: ClassRegistry) -> None:
    from .evalio import codecs

    meta = {"config_hash": config.digest(), "config": config.to_dict(), "registry": registry.to_dict(),
            "step": state.step}
    data = (codecs.encode_tensor(state.cls_ctx.vectors.detach().numpy(), [], name="classification",
                                 strategy=state.cls_ctx.strategy, placement=state.cls_ctx.placement, **meta)
            + codecs.encode_tensor(state.seg_ctx.vectors.detach().numpy(), list(range(registry.num_classes)),
                                   name="segmentation", strategy=state.seg_ctx.strategy,
                                   placement=state.seg_ctx.placement,
                                   background_has_label=state.seg_ctx.background_has_label))
    Path(path).write_bytes(data)


def load_state(path) -> tuple[TrainState, TrainConfig, ClassRegistry]:
    from .evalio import codecs

    records = codecs.decode_tensors(Path(path).read_bytes())
    by_name = {h.get("name"): (a, h) for a, h in records}
    if set(by_name) != {"classification", "segmentation"}:
        raise codecs.FormatError(f"{path}: expected classification and segmentation records")
    (cls_arr, cls_h), (seg_arr, seg_h) = by_name["classification"], by_name["segmentation"]
    config = TrainConfig.from_dict(cls_h["config"])
    if config.digest() != cls_h["config_hash"]:
        raise codecs.FormatError(f"{path}: config hash mismatch")
    registry = ClassRegistry.from_dict(cls_h["registry"])
    cls_ctx = PromptContext(torch.from_numpy(cls_arr.astype(np.float64)), cls_h["strategy"], cls_h["placement"])
    seg_ctx = PromptContext(torch.from_numpy(seg_arr.astype(np.float64)), seg_h["strategy"], seg_h["placement"],
                            seg_h.get("background_has_label", False))
    return TrainState(cls_ctx, seg_ctx, int(cls_h.get("step", 0))), config, registry
