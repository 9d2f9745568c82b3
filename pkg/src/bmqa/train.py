"""Optimizer, learning-rate schedules and the per-stage training loop."""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, NonFiniteError, ShapeError
from .head import st_loss
from .image import patchify
from .layers import Linear, Module
from .model import trim_padding
from .text import UNK, TokenSeq

log = logging.getLogger(__name__)

STAGES = ("pt", "ss", "st", "cap")
PT_KINDS = ("fm", "cl", "re")


class TrainingDiverged(NonFiniteError):
    def __init__(self, epoch, batch, detail):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the ``params`` arrays.

    ``state`` holds ``t`` and the moment lists ``m``/``v``; it is created on
    the first call when empty.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        m, v = state["m"][i], state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Adam over a fixed list of parameter tensors."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.hyper = (beta1, beta2, eps)
        self.state = {}

    def step(self, lr):
        grads = [p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, lr, *self.hyper)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class Schedule:
    kind: str = "cosine"
    lr0: float = 1e-3
    milestones: tuple = ()
    factor: float = 0.95

    def validate(self):
        if self.kind not in ("cosine", "step"):
            raise ConfigError(f"unknown schedule {self.kind!r}")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing: {self.milestones}")
        return self


def lr_at(schedule, epoch, total):
    """Learning rate for ``epoch`` (0-based) of ``total``."""
    if schedule.kind == "cosine":
        return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.lr0 * schedule.factor ** passed


@dataclass
class TrainConfig:
    stage: str = "st"
    batch_size: int = 16
    epochs: int = 60
    lr0: float = 1e-3
    schedule: str = "step"
    milestones: tuple = ()
    factor: float = 0.95
    seed: int = 0
    loss_mode: str = "mean_nll"
    target_window: tuple = (0.6, 1.0)
    pt_kind: str = "fm"
    freeze: tuple = ()
    clip_norm: float = 0.0

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.loss_mode not in ("paper_sum", "mean_nll"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.pt_kind not in PT_KINDS:
            raise ConfigError(f"pt_kind must be one of {PT_KINDS}")
        lo, hi = self.target_window
        if not lo < hi:
            raise ConfigError("target_window must be (low, high) with low < high")
        self.as_schedule()
        return self

    def as_schedule(self):
        return Schedule(self.schedule, self.lr0, tuple(self.milestones), self.factor).validate()

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training key(s): {', '.join(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d).validate()


# Desk-scale budgets that fit the acceptance run on one CPU core.
DESK = {
    "pt": dict(stage="pt", batch_size=64, epochs=10, lr0=1e-3, schedule="cosine"),
    "ss": dict(stage="ss", batch_size=32, epochs=20, lr0=1e-3, schedule="cosine"),
    "st": dict(stage="st", batch_size=16, epochs=60, lr0=1e-3, schedule="cosine"),
    "cap": dict(stage="cap", batch_size=32, epochs=20, lr0=2e-3, schedule="cosine"),
}

# Published budgets.
PUBLISHED = {
    "pt": dict(stage="pt", batch_size=768, epochs=50, lr0=1e-3, schedule="cosine"),
    "ss": dict(stage="ss", batch_size=256, epochs=20, lr0=4e-5, schedule="step"),
    "st": dict(stage="st", batch_size=16, epochs=300, lr0=8e-5, schedule="step",
               milestones=(150, 250), factor=0.95),
    "cap": dict(stage="cap", batch_size=32, epochs=20, lr0=1e-4, schedule="cosine"),
}
PUBLISHED_ST_LR_ATTENTION_BACKBONE = 6.4e-5


def preset(stage, scale="desk", **overrides):
    table = {"desk": DESK, "published": PUBLISHED}.get(scale)
    if table is None or stage not in table:
        raise ConfigError(f"no {scale!r} preset for stage {stage!r}")
    return TrainConfig(**{**table[stage], **overrides}).validate()


_INT_KEYS = {"batch_size", "epochs", "seed"}
_FLOAT_KEYS = {"lr0", "factor", "clip_norm"}


def _coerce(key, raw):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "milestones":
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if key == "target_window":
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if key == "freeze":
        return tuple(raw.replace(",", " ").split())
    return raw.strip()


def read_config(path):
    """Parse an INI file into ``{section: {key: value}}``.

    Sections ``[pt]``, ``[ss]``, ``[st]`` and ``[cap]`` take TrainConfig keys;
    other sections are returned as raw strings for the caller to interpret.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc.message}") from None
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        if section in STAGES:
            bad = sorted(set(items) - known)
            if bad:
                raise ConfigError(f"{path}: unknown key(s) in [{section}]: {', '.join(bad)}")
            try:
                items = {k: _coerce(k, v) for k, v in items.items()}
            except ValueError as exc:
                raise ConfigError(f"{path}: [{section}] {exc}") from None
        out[section] = items
    return out


@dataclass
class StageData:
    """Encoded arrays for one split: uint8 images, token ids/mask, MOS, labels."""

    images: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    mos: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.images)

    def batch(self, idx):
        return (
            self.images[idx].astype(np.float64) / 255.0,
            self.ids[idx],
            self.mask[idx],
            self.mos[idx],
            None if self.labels is None else self.labels[idx],
        )


class PretrainHeads(Module):
    """Auxiliary heads used only during pretraining and then discarded."""

    def __init__(self, kind, model, n_classes, rng):
        d_img = model.cfg.image.d_model
        d_qsd = model.cfg.qsd.d_model
        self.kind = kind
        if kind == "cl":
            self.img_cls = Linear(d_img, n_classes, rng)
            self.qsd_cls = Linear(d_qsd, n_classes, rng)
        elif kind == "re":
            side = model.cfg.image.input_size // int(round(math.sqrt(model.cfg.image.n_tokens)))
            self.patch = side
            self.img_rec = Linear(d_img, 3 * side * side, rng)
            self.qsd_rec = Linear(d_qsd, model.qsd_encoder.vocab_size, rng)


def _pretrain_loss(model, heads, batch, rng, loss_mode, mask_ratio=0.25):
    images, ids, mask, _, labels = batch
    if heads.kind == "fm":
        return model.contrastive_loss(images, ids, mask, loss_mode)
    b = len(images)
    if heads.kind == "cl":
        img = T.mean(model.image_tokens(images), axis=1)
        _, tmask, pooled = model.qsd_encoder(ids, mask)
        onehot = np.ones((b, 1), dtype=bool)
        loss = T.nll_from_logits(T.reshape(heads.img_cls(img), (b, 1, -1)), labels[:, None], onehot)
        loss = T.add(loss, T.nll_from_logits(T.reshape(heads.qsd_cls(pooled), (b, 1, -1)), labels[:, None], onehot))
        return T.mul(loss, 1.0 / (2 * b))
    # masked reconstruction: hidden patches -> pixels, hidden words -> ids
    p = heads.patch
    target = patchify(images, p)
    hide = rng.random(target.shape[:2]) < mask_ratio
    hide[:, 0] |= ~hide.any(axis=1)
    shown = target * (~hide)[..., None]
    side = images.shape[1] // p
    masked_images = shown.reshape(b, side, side, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(images.shape)
    rec = heads.img_rec(model.image_tokens(masked_images))
    err = T.sub(rec, target)
    w = hide[..., None].astype(np.float64) / (hide.sum() * target.shape[-1])
    img_loss = T.sum_(T.mul(T.square(err), w))
    ids, mask = trim_padding(ids, mask)
    hide_w = (rng.random(ids.shape) < mask_ratio) & mask
    hide_w[:, 0] |= ~hide_w.any(axis=1)
    corrupted = np.where(hide_w, UNK, ids)
    tokens, _, _ = model.qsd_encoder(corrupted, mask)
    word_loss = T.nll_from_logits(heads.qsd_rec(tokens), ids, hide_w)
    return T.add(img_loss, T.mul(word_loss, 1.0 / hide_w.sum()))


@dataclass
class StageResult:
    stage: str
    history: list = field(default_factory=list)
    window_hit: bool | None = None

    @property
    def final_loss(self):
        return self.history[-1] if self.history else float("nan")

    def history_csv(self):
        return "epoch,loss\n" + "".join(f"{i + 1},{loss!r}\n" for i, loss in enumerate(self.history))


def _frozen(name, prefixes):
    return any(name == p or name.startswith(p + ".") for p in prefixes)


def _clip(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def run_stage(cfg, model, data, aux=None, on_epoch=None):
    """Train ``model`` in place for one stage and return its loss history.

    Batches follow a permutation drawn from ``default_rng([seed, epoch])``.
    ``aux`` is a :class:`PretrainHeads` for the pt stage and the caption head
    for the ``cap`` stage.
    """
    cfg.validate()
    if len(data) == 0:
        raise DataError(f"{cfg.stage} stage: training split is empty")
    if cfg.stage == "cap":
        if aux is None:
            raise ConfigError("cap stage needs a caption head")
        named = list(aux.named_parameters())
    else:
        named = list(model.named_parameters())
        if aux is not None:
            named += [(f"aux.{n}", p) for n, p in aux.named_parameters()]
    for name, p in named:
        p.requires_grad = not _frozen(name, cfg.freeze)
    params = [p for _, p in named if p.requires_grad]
    opt = Adam(params)
    sched = cfg.as_schedule()
    result = StageResult(cfg.stage)
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = lr_at(sched, epoch, cfg.epochs)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = data.batch(idx)
            try:
                loss = _stage_loss(cfg, model, aux, batch, rng)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch + 1, bi + 1, exc) from None
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch + 1, bi + 1, value)
            opt.zero_grad()
            T.backward(loss)
            if cfg.clip_norm > 0:
                _clip(params, cfg.clip_norm)
            opt.step(lr)
            total += value * len(idx)
            count += len(idx)
        result.history.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch + 1, result.history[-1])
    for _, p in named:
        p.requires_grad = True
        p.grad = None
    if cfg.stage == "ss":
        lo, hi = cfg.target_window
        result.window_hit = bool(lo <= result.final_loss <= hi)
    return result


def _stage_loss(cfg, model, aux, batch, rng):
    images, ids, mask, mos, _ = batch
    if cfg.stage == "st":
        return st_loss(model.predict_raw(images, ids, mask), mos)
    if cfg.stage == "ss":
        return model.contrastive_loss(images, ids, mask, cfg.loss_mode)
    if cfg.stage == "cap":
        seqs = [TokenSeq(i, int(m.sum())) for i, m in zip(ids, mask)]
        inputs, targets, weights = aux.teacher_forcing(seqs)
        logits = aux.logits(aux.encode(images), inputs)
        return T.mul(T.nll_from_logits(logits, targets, weights), 1.0 / weights.sum())
    return _pretrain_loss(model, aux, batch, rng, cfg.loss_mode)

