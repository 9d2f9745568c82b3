"""End-to-end training pipeline, the deployable system bundle and ablations."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .captioner import CaptionConfig, CaptionHead
from .checkpoint import ModelCheckpoint
from .data import QualityDataset, split_by_scene
from .errors import ConfigError, DataError, EmptyInputError
from .metrics import report
from .model import BMQAModel, ModelConfig
from .synth import CHROMATIC, SynthConfig, synth_dataset
from .text import UNK, Vocabulary, batch_tokens, build_vocab, tokenize
from .train import PretrainHeads, StageData, TrainConfig, preset, run_stage

log = logging.getLogger(__name__)

PT_CHOICES = ("none", "cl", "re", "fm")


def encode(ds, vocab, n_max, with_labels=False):
    """Turn a :class:`QualityDataset` into training arrays."""
    if len(ds) == 0:
        raise DataError("cannot encode an empty split")
    ids, mask = batch_tokens([tokenize(s.qsd, vocab, n_max) for s in ds.samples])
    labels = None
    if with_labels:
        labels = np.array([s.extra.get("scene_class", -1) for s in ds.samples], dtype=np.int64)
        if np.any(labels < 0):
            raise DataError("classification pretraining needs a scene_class field on every record")
    return StageData(ds.images, ids, mask, ds.mos, labels)


class BMQASystem:
    """A trained quality model plus its vocabulary and optional caption head."""

    def __init__(self, model, vocab, captioner=None, meta=None):
        self.model = model
        self.vocab = vocab
        self.captioner = captioner
        self.meta = dict(meta or {})

    @property
    def n_max(self):
        return self.model.cfg.qsd.n_max

    def _images(self, images):
        images = np.asarray(images)
        if images.dtype == np.uint8:
            images = images.astype(np.float64) / 255.0
        return images[None] if images.ndim == 3 else images

    def predict(self, images, transcripts=None, batch_size=64):
        """Scores in [0, 1] from images and transcripts (image-audio mode)."""
        images = self._images(images)
        needs_text = self.model.cfg.modalities != "image"
        if needs_text and transcripts is None:
            return self.predict_image_only(images, batch_size)
        out = []
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            ids = mask = None
            if needs_text:
                ids, mask = batch_tokens([tokenize(t, self.vocab, self.n_max) for t in transcripts[sl]])
            out.append(self.model.predict(images[sl], ids, mask).ravel())
        return np.concatenate(out)

    def generate_ids(self, images, batch_size=64):
        """Greedy caption ids per image; an empty decode becomes a single UNK."""
        if self.captioner is None:
            raise ConfigError("checkpoint has no caption parameters; image-only prediction unavailable")
        images = self._images(images)
        out = []
        for start in range(0, len(images), batch_size):
            out += self.captioner.generate(images[start:start + batch_size])
        return [seq[: self.n_max] or [UNK] for seq in out]

    def caption(self, image):
        return " ".join(self.vocab.decode(self.generate_ids(image)[0]))

    def predict_image_only(self, images, batch_size=64):
        """Scores from images alone, with generated transcripts standing in for QSD."""
        images = self._images(images)
        if self.model.cfg.modalities == "image":
            return self.predict(images, None, batch_size)
        seqs = self.generate_ids(images, batch_size)
        ids = np.zeros((len(seqs), self.n_max), dtype=np.int64)
        mask = np.zeros_like(ids, dtype=bool)
        for i, seq in enumerate(seqs):
            ids[i, : len(seq)] = seq
            mask[i, : len(seq)] = True
        out = []
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            img = images[sl] if self.model.cfg.modalities == "both" else None
            out.append(self.model.predict(img, ids[sl], mask[sl]).ravel())
        return np.concatenate(out)

    def to_checkpoint(self):
        config = {
            "model": self.model.cfg.to_dict(),
            "vocab": self.vocab.words(),
            "caption": None if self.captioner is None else self.captioner.cfg.to_dict(),
            "meta": self.meta,
        }
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.captioner is not None:
            tensors.update({f"caption.{k}": v for k, v in self.captioner.state_dict().items()})
        return ModelCheckpoint(config=config, tensors=tensors)

    @classmethod
    def from_checkpoint(cls, ckpt):
        cfg = ckpt.config
        try:
            model_cfg = ModelConfig.from_dict(cfg["model"])
            vocab = Vocabulary(cfg["vocab"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"checkpoint config is missing {exc}") from None
        model = BMQAModel(model_cfg, len(vocab))
        model.load_state_dict(_strip(ckpt.tensors, "model."))
        captioner = None
        if cfg.get("caption"):
            captioner = CaptionHead(CaptionConfig(**cfg["caption"]), model_cfg.image, len(vocab),
                                    np.random.default_rng(0))
            captioner.load_state_dict(_strip(ckpt.tensors, "caption."))
        return cls(model, vocab, captioner, cfg.get("meta"))


def _strip(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    stages: dict = field(default_factory=lambda: {s: preset(s) for s in ("pt", "ss", "st", "cap")})
    pt_kind: str = "fm"
    run_ss: bool = True
    pt_corpus: SynthConfig = field(default_factory=lambda: SynthConfig(seed=1007))
    train_captioner: bool = True
    split_seed: int = 0
    split_ratios: tuple = (8, 1, 1)
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.caption.validate(self.model.qsd.n_max)
        if self.pt_kind not in PT_CHOICES:
            raise ConfigError(f"pt_kind must be one of {PT_CHOICES}")
        for name, cfg in self.stages.items():
            if cfg.stage != name:
                raise ConfigError(f"stage config under {name!r} says stage={cfg.stage!r}")
            cfg.validate()
        return self

    def stage(self, name, **overrides):
        cfg = self.stages[name]
        return dataclasses.replace(cfg, seed=self.seed, **overrides).validate()

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "caption": self.caption.to_dict(),
            "stages": {k: v.to_dict() for k, v in sorted(self.stages.items())},
            "pt_kind": self.pt_kind,
            "run_ss": self.run_ss,
            "pt_corpus": self.pt_corpus.to_dict(),
            "train_captioner": self.train_captioner,
            "split_seed": self.split_seed,
            "split_ratios": list(self.split_ratios),
            "seed": self.seed,
        }

    @classmethod
    def from_sections(cls, sections, seed=None):
        """Build from parsed INI sections (see :func:`bmqa.train.read_config`)."""
        cfg = cls()
        for name in ("pt", "ss", "st", "cap"):
            if name in sections:
                cfg.stages[name] = TrainConfig.from_dict({**cfg.stages[name].to_dict(), **sections[name]})
        general = sections.get("pipeline", {})
        known = {"pt_kind", "run_ss", "train_captioner", "split_seed", "seed", "modalities", "pt_scenes"}
        bad = sorted(set(general) - known)
        if bad:
            raise ConfigError(f"unknown key(s) in [pipeline]: {', '.join(bad)}")
        try:
            if "pt_kind" in general:
                cfg.pt_kind = general["pt_kind"].strip()
            for key in ("run_ss", "train_captioner"):
                if key in general:
                    cfg.__dict__[key] = general[key].strip().lower() in ("1", "true", "yes", "on")
            for key in ("split_seed", "seed"):
                if key in general:
                    cfg.__dict__[key] = int(general[key])
            if "modalities" in general:
                cfg.model.modalities = general["modalities"].strip()
            if "pt_scenes" in general:
                cfg.pt_corpus.n_scenes = int(general["pt_scenes"])
        except ValueError as exc:
            raise ConfigError(f"[pipeline] {exc}") from None
        if seed is not None:
            cfg.seed = seed
        return cfg.validate()


@dataclass
class PipelineResult:
    system: BMQASystem
    histories: dict
    splits: tuple
    timings: dict
    window_hit: bool | None = None


def _new_model(cfg, vocab_size, seed, state=None):
    model = BMQAModel(cfg, vocab_size, seed=seed)
    if state is not None:
        model.load_state_dict({k: v for k, v in state.items() if not k.startswith("fusion.")}, strict=False)
    return model


def pretrain(model, kind, pcfg, vocab):
    """Run the pt stage of ``kind`` on the separate pretraining corpus."""
    corpus = synth_dataset(pcfg.pt_corpus)
    data = encode(corpus, vocab, model.cfg.qsd.n_max, with_labels=kind == "cl")
    heads = PretrainHeads(kind, model, CHROMATIC, np.random.default_rng([pcfg.seed, 99]))
    return run_stage(pcfg.stage("pt", pt_kind=kind), model, data, aux=heads)


ORDER = ("pt", "ss", "st", "cap")


def train_pipeline(ds, pcfg=None, init=None, first="pt", last="cap", progress=None):
    """Split, pretrain, align, regress and fit the caption head.

    ``first``/``last`` bound the stages run (in the order pt, ss, st, cap);
    ``init`` is a :class:`BMQASystem` to continue from, whose vocabulary is kept.
    Stages switched off in ``pcfg`` (``pt_kind="none"``, ``run_ss=False``,
    ``train_captioner=False``) are skipped.
    """
    pcfg = (pcfg or PipelineConfig()).validate()
    if first not in ORDER or last not in ORDER or ORDER.index(first) > ORDER.index(last):
        raise ConfigError(f"invalid stage range {first}..{last}")
    todo = ORDER[ORDER.index(first):ORDER.index(last) + 1]
    train, val, test = split_by_scene(ds.samples, pcfg.split_ratios, seed=pcfg.split_seed)
    if init is None:
        vocab = build_vocab([s.qsd for s in train])
        model = _new_model(dataclasses.replace(pcfg.model, modalities="both"), len(vocab), pcfg.seed)
        captioner = None
        meta = {"seed": pcfg.seed, "split_seed": pcfg.split_seed, "stages": []}
    else:
        vocab, model, captioner = init.vocab, init.model, init.captioner
        meta = {**init.meta, "seed": pcfg.seed, "split_seed": pcfg.split_seed}
        meta.setdefault("stages", [])
    train_data = encode(ds.subset(train), vocab, model.cfg.qsd.n_max)
    histories, timings = {}, {}
    encoder_snapshot = {k: v.copy() for k, v in model.image_encoder.state_dict().items()}
    window_hit = None

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - t0
        histories[name] = out.history
        meta["stages"] = meta["stages"] + [name]
        if progress:
            progress(name, out, timings[name])
        return out

    if "pt" in todo and pcfg.pt_kind != "none":
        timed("pt", lambda: pretrain(model, pcfg.pt_kind, pcfg, vocab))
        meta["pt_kind"] = pcfg.pt_kind
        encoder_snapshot = {k: v.copy() for k, v in model.image_encoder.state_dict().items()}
    if "ss" in todo and pcfg.run_ss:
        if model.cfg.modalities != "both":
            raise ConfigError("alignment needs a two-modality model")
        window_hit = timed("ss", lambda: run_stage(pcfg.stage("ss"), model, train_data)).window_hit
    if "st" in todo:
        if pcfg.model.modalities != model.cfg.modalities:
            model = _new_model(pcfg.model, len(vocab), pcfg.seed, model.state_dict())
        timed("st", lambda: run_stage(pcfg.stage("st"), model, train_data))
    if "cap" in todo and pcfg.train_captioner:
        captioner = CaptionHead(pcfg.caption, model.cfg.image, len(vocab), np.random.default_rng([pcfg.seed, 7]))
        captioner.image_encoder.load_state_dict(encoder_snapshot)
        timed("cap", lambda: run_stage(pcfg.stage("cap"), None, train_data, aux=captioner))
    system = BMQASystem(model, vocab, captioner, meta)
    splits = tuple(ds.subset(s) for s in (train, val, test))
    return PipelineResult(system, histories, splits, timings, window_hit)


def evaluate(system, ds, group_key=None, image_only=False):
    """Evaluation report of ``system`` on ``ds``, optionally grouped by a record field."""
    if len(ds) == 0:
        raise EmptyInputError("evaluation split is empty")
    if image_only:
        preds = system.predict_image_only(ds.images)
    else:
        preds = system.predict(ds.images, ds.transcripts)
    groups = None if group_key is None else [str(g) for g in ds.field(group_key)]
    if groups is not None and any(g == "None" for g in groups):
        raise DataError(f"some records have no {group_key!r} field")
    mode = "image-only" if image_only else "image-audio"
    return report(preds, ds.mos, groups, meta={"mode": mode, "n_test": len(ds)})


@dataclass(frozen=True)
class AblationSpec:
    name: str
    pt_kind: str
    ss: bool
    modalities: str

    @property
    def label(self):
        pt = "-" if self.pt_kind == "none" else self.pt_kind.upper()
        ss = "img+qsd" if self.ss else "-"
        return f"({self.name}) PT={pt} SS={ss} ST={self.modalities}"


ABLATIONS = {
    "a": AblationSpec("a", "none", False, "image"),
    "b": AblationSpec("b", "none", False, "qsd"),
    "c": AblationSpec("c", "none", True, "image"),
    "d": AblationSpec("d", "none", True, "qsd"),
    "e": AblationSpec("e", "none", True, "both"),
    "f": AblationSpec("f", "cl", True, "both"),
    "g": AblationSpec("g", "re", True, "both"),
    "h": AblationSpec("h", "fm", True, "both"),
}


def run_ablation(ds, pcfg=None, methods=None, progress=None):
    """Train every requested method on one split and report on its test part.

    Methods sharing a (pretraining, alignment) prefix reuse that prefix's
    weights, which are identical by construction.
    """
    pcfg = (pcfg or PipelineConfig()).validate()
    names = sorted(methods or ABLATIONS)
    train, _, test = split_by_scene(ds.samples, pcfg.split_ratios, seed=pcfg.split_seed)
    vocab = build_vocab([s.qsd for s in train])
    n_max = pcfg.model.qsd.n_max
    train_data = encode(ds.subset(train), vocab, n_max)
    test_ds = ds.subset(test)
    full_cfg = dataclasses.replace(pcfg.model, modalities="both")
    prefixes = {}
    reports = {}
    for name in names:
        spec = ABLATIONS.get(name)
        if spec is None:
            raise ConfigError(f"unknown ablation method {name!r}")
        key = (spec.pt_kind, spec.ss)
        if key not in prefixes:
            model = _new_model(full_cfg, len(vocab), pcfg.seed)
            if spec.pt_kind != "none":
                pretrain(model, spec.pt_kind, pcfg, vocab)
            if spec.ss:
                run_stage(pcfg.stage("ss"), model, train_data)
            prefixes[key] = model.state_dict()
        cfg = dataclasses.replace(pcfg.model, modalities=spec.modalities)
        model = _new_model(cfg, len(vocab), pcfg.seed, prefixes[key])
        run_stage(pcfg.stage("st"), model, train_data)
        reports[name] = evaluate(BMQASystem(model, vocab), test_ds)
        if progress:
            progress(spec, reports[name])
    return reports


def ablation_table(reports):
    lines = [f"{'method':<34}{'PLCC':>9}{'SRCC':>9}{'RMSE':>9}"]
    for name in sorted(reports):
        rep = reports[name]
        lines.append(f"{ABLATIONS[name].label:<34}{rep.plcc:>9.4f}{rep.srcc:>9.4f}{rep.rmse:>9.4f}")
    return "\n".join(lines) + "\n"


def ablation_csv(reports):
    out = ["method,pt,ss,st,plcc,srcc,rmse"]
    for name in sorted(reports):
        s, r = ABLATIONS[name], reports[name]
        out.append(f"{name},{s.pt_kind},{int(s.ss)},{s.modalities},{r.plcc!r},{r.srcc!r},{r.rmse!r}")
    return "\n".join(out) + "\n"


def load_dataset(manifest):
    return QualityDataset.from_manifest(manifest)
