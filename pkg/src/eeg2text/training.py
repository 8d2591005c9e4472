"""Masked-reconstruction pre-training, teacher-forced fine-tuning and encoder activation schedules."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from eeg2text import autodiff as ad
from eeg2text.checkpoint import Checkpoint
from eeg2text.data import BOS, EOS, Corpus, CorpusError, normalize, patchify
from eeg2text.masking import STRATEGIES, apply_mask, make_mask
from eeg2text.models import EEG2Text, ModelConfig, Pretrainer, prepare_input

logger = logging.getLogger(__name__)

#: (batch size, learning rate) per training stage.
STAGE_DEFAULTS = {
    "single": (4, 1e-5),
    "pretrain": (4, 5e-5),
    "multiview": (4, 3e-5),
}
VIEW_STRATEGIES = ("global_only", "rotate_1", "rotate_3", "all")
BATCH_SIZES = (4, 8, 16)
PRECISIONS = {"f32": torch.float32, "f64": torch.float64}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "single"
    batch_size: int | None = None
    learning_rate: float | None = None
    n_epochs: int = 10
    seed: int = 0
    view_strategy: str = "rotate_3"
    mask_strategy: str = "remask"
    mask_ratio: float = 0.15
    mean_run: float = 3.0
    corpora: tuple[str, ...] = ()
    precision: str = "f32"
    threads: int = 1
    allow_any_batch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "corpora", tuple(str(c) for c in self.corpora))
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be one of {tuple(STAGE_DEFAULTS)}")
        if self.view_strategy not in VIEW_STRATEGIES:
            raise ValueError(f"view_strategy must be one of {VIEW_STRATEGIES}")
        if self.mask_strategy not in STRATEGIES:
            raise ValueError(f"mask_strategy must be one of {STRATEGIES}")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.batch < 1 or (not self.allow_any_batch and self.batch not in BATCH_SIZES):
            raise ValueError(f"batch_size must be one of {BATCH_SIZES} (set allow_any_batch to override)")
        if not self.lr > 0:
            raise ValueError("learning_rate must be positive")
        if self.n_epochs < 0 or self.threads < 1:
            raise ValueError("n_epochs must be >= 0 and threads >= 1")

    @property
    def batch(self) -> int:
        return self.batch_size if self.batch_size is not None else STAGE_DEFAULTS[self.stage][0]

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else STAGE_DEFAULTS[self.stage][1]

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpora"] = list(self.corpora)
        d["batch_size"], d["learning_rate"] = self.batch, self.lr
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------- helpers

def select_active_encoders(epoch: int, strategy: str, n_regions: int = 10) -> frozenset[int]:
    """Regional encoders trained during ``epoch``; the global stack and decoder always train."""
    if n_regions < 1:
        raise ValueError("n_regions must be >= 1")
    if strategy == "global_only":
        return frozenset()
    if strategy == "rotate_1":
        return frozenset({epoch % n_regions})
    if strategy == "rotate_3":
        return frozenset((3 * epoch + i) % n_regions for i in range(min(3, n_regions)))
    if strategy == "all":
        return frozenset(range(n_regions))
    raise ValueError(f"unknown view strategy {strategy!r}")


def epoch_order(n_items: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n_items)


def normalize_corpus(corpus: Corpus) -> Corpus:
    return corpus.with_recordings([normalize(r) for r in corpus.recordings])


@contextlib.contextmanager
def _training_threads(n: int):
    previous = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


@contextlib.contextmanager
def _loss_level_checks():
    # per-op finiteness checks roughly double step time; the loss check catches the same failures
    previous = ad._CHECK_FINITE
    ad.set_finite_checks(False)
    try:
        yield
    finally:
        ad.set_finite_checks(previous)


def _checked(loss: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(loss)):
        raise ad.NonFiniteError(f"non-finite loss during {where}")
    return loss


def model_state(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in model.named_parameters()}


def load_state(model: torch.nn.Module, params: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    own = dict(model.named_parameters())
    if strict:
        missing = sorted(set(own) - set(params))
        unexpected = sorted(set(params) - set(own))
        if missing or unexpected:
            raise TrainingError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    loaded = []
    with torch.no_grad():
        for name, arr in params.items():
            if name in own and tuple(own[name].shape) == arr.shape:
                own[name].copy_(torch.from_numpy(arr))
                loaded.append(name)
            elif strict:
                raise TrainingError(f"shape mismatch for {name}: {arr.shape} vs {tuple(own[name].shape)}")
    return loaded


def _adam_to_ckpt(state: ad.AdamState) -> tuple[dict, dict]:
    return ({k: v.numpy().copy() for k, v in state.m.items()},
            {k: v.numpy().copy() for k, v in state.v.items()})


def _adam_from_ckpt(ckpt: Checkpoint, dtype) -> ad.AdamState:
    return ad.AdamState(
        ckpt.adam_step,
        {k: torch.from_numpy(v.copy()).to(dtype) for k, v in ckpt.adam_m.items()},
        {k: torch.from_numpy(v.copy()).to(dtype) for k, v in ckpt.adam_v.items()},
    )


def _step(model: torch.nn.Module, state: ad.AdamState, lr: float) -> None:
    params = dict(model.named_parameters())
    grads = {n: p.grad for n, p in params.items() if p.requires_grad and p.grad is not None}
    ad.adam_step(params, grads, state, lr)
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- pre-training

def _check_corpora(corpora: Sequence[Corpus]) -> None:
    if not corpora:
        raise CorpusError("pre-training needs at least one corpus")
    rate = corpora[0].sample_rate
    for c in corpora[1:]:
        if c.sample_rate != rate:
            raise CorpusError(f"corpus {c.name!r} sample_rate {c.sample_rate} differs from {rate}")


def pretrain_config_for(corpora: Sequence[Corpus], **overrides) -> ModelConfig:
    """Model config keyed on the first corpus' layout (vocab size is irrelevant for pre-training)."""
    base = dict(vocab_size=max(5, len(corpora[0].vocabulary)), channel_labels=corpora[0].channel_labels)
    base.update(overrides)
    return ModelConfig(**base)


def _adapter_plan(corpora: Sequence[Corpus], base_labels: Sequence[str]) -> list[int | None]:
    """Adapter index per corpus (None when the channel set matches the base layout)."""
    plan, n_aux = [], 0
    for c in corpora:
        if set(c.channel_labels) == set(base_labels):
            plan.append(None)
        else:
            plan.append(n_aux)
            n_aux += 1
    return plan


def _aux_channels(corpora, plan) -> list[int]:
    return [len(c.channel_labels) for c, a in zip(corpora, plan) if a is not None]


def _masked_loss(model: Pretrainer, x: torch.Tensor, spec, adapter: int | None) -> torch.Tensor:
    """Mean squared error over the masked patches of ``x`` (``[C, T]``) only."""
    p = model.cfg.patch_len
    patches = torch.from_numpy(patchify(x.numpy(), p).copy()).to(x.dtype)
    fill = model.mask_fill if adapter is None else model.adapters[adapter].mask_fill
    masked = apply_mask(patches, spec, fill)
    n, c, _ = patches.shape
    recon = model.reconstruct(masked.permute(1, 0, 2).reshape(c, n * p), adapter)
    recon_patches = recon.reshape(c, n, p).permute(1, 0, 2)
    sel = torch.from_numpy(spec.as_bool())
    if not bool(sel.any()):
        return (recon_patches * 0.0).sum()
    return ad.mse(recon_patches[sel], patches[sel])


def pretrain(corpora: Sequence[Corpus], model_cfg: ModelConfig, cfg: TrainConfig,
             on_epoch: Callable[[int, Pretrainer, float], None] | None = None) -> Checkpoint:
    """Train encoder + reconstruction head to reconstruct masked patches.

    Recordings are used as given (normalise them first). Masks are keyed on
    ``(seed, corpus index, recording index)`` and, for ``remask``, the epoch.
    """
    _check_corpora(corpora)
    if tuple(model_cfg.channel_labels) != tuple(corpora[0].channel_labels) and \
            set(model_cfg.channel_labels) != set(corpora[0].channel_labels):
        raise CorpusError("model channel layout must match the first corpus")
    plan = _adapter_plan(corpora, model_cfg.channel_labels)
    items = [(ci, ri) for ci, c in enumerate(corpora) for ri in range(len(c))]
    with _training_threads(cfg.threads), _loss_level_checks():
        model = Pretrainer(model_cfg, _aux_channels(corpora, plan), seed=cfg.seed, dtype=cfg.dtype)
        inputs = [
            [prepare_input(r, model_cfg.channel_labels if plan[ci] is None else c.channel_labels,
                           model_cfg, cfg.dtype) for r in c.recordings]
            for ci, c in enumerate(corpora)
        ]
        state = ad.AdamState()
        history: list[float] = []
        for epoch in range(cfg.n_epochs):
            order = epoch_order(len(items), cfg.seed, epoch)
            total = 0.0
            for start in range(0, len(order), cfg.batch):
                batch = [items[i] for i in order[start:start + cfg.batch]]
                loss = 0.0
                for ci, ri in batch:
                    x = inputs[ci][ri]
                    n = x.shape[1] // model_cfg.patch_len
                    spec = make_mask(cfg.mask_strategy, n, cfg.mask_ratio, epoch, (cfg.seed, ci, ri), cfg.mean_run)
                    loss = loss + _masked_loss(model, x, spec, plan[ci])
                loss = _checked(loss / len(batch), "pre-training")
                ad.backward(loss)
                _step(model, state, cfg.lr)
                total += float(loss.detach()) * len(batch)
            history.append(total / len(items))
            logger.info("pretrain epoch %d loss %.6f", epoch, history[-1])
            if on_epoch is not None:
                on_epoch(epoch, model, history[-1])
    m, v = _adam_to_ckpt(state)
    return Checkpoint(
        params=model_state(model),
        model_config=model_cfg.to_dict(),
        train_config=cfg.to_dict(),
        kind="pretrain",
        epoch=cfg.n_epochs,
        loss_history=history,
        adam_step=state.step,
        adam_m=m,
        adam_v=v,
        extra={"adapters": [c.name for c, a in zip(corpora, plan) if a is not None]},
    )


def pretrainer_from_checkpoint(ckpt: Checkpoint) -> Pretrainer:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    aux = [ckpt.params[f"adapters.{i}.into"].shape[1] for i in range(len(ckpt.extra.get("adapters", [])))]
    model = Pretrainer(cfg, aux, dtype=PRECISIONS[ckpt.train_config.get("precision", "f32")])
    load_state(model, ckpt.params)
    return model


@torch.no_grad()
def reconstruction_mse(model: Pretrainer, corpus: Corpus, ratio: float = 0.15, seed: int = 12345) -> float:
    """Masked-patch MSE with fixed ``random`` masks keyed on ``(seed, index)``; for held-out comparison."""
    total = 0.0
    for i, rec in enumerate(corpus.recordings):
        x = prepare_input(rec, model.cfg.channel_labels, model.cfg, model.mask_fill.dtype)
        spec = make_mask("random", x.shape[1] // model.cfg.patch_len, ratio, 0, (seed, i))
        total += float(_masked_loss(model, x, spec, None))
    return total / len(corpus)


# ---------------------------------------------------------------- fine-tuning

def text_targets(corpus: Corpus, max_len: int) -> list[tuple[list[int], list[int]]]:
    """Teacher-forcing pairs: ``([BOS] + ids, ids + [EOS])`` clipped to ``max_len``."""
    out = []
    for s in corpus.sentences:
        ids = corpus.vocabulary.encode(s.tokens)
        out.append((([BOS] + ids)[:max_len], (ids + [EOS])[:max_len]))
    return out


def init_from_pretrained(model: EEG2Text, ckpt: Checkpoint) -> list[str]:
    """Copy pre-trained encoder weights into ``model``; returns the names that were set.

    Single-view models take every encoder tensor whose shape matches (the
    compressor too, when channel counts agree). Multi-view models copy the
    transformer layers and final norm into every regional encoder; regional
    compressors keep their fresh initialisation. Decoder weights are copied
    when ``ckpt`` is a full model.
    """
    src = ckpt.params
    own = dict(model.named_parameters())
    mapping: dict[str, str] = {}
    for name in src:
        if not name.startswith("encoder."):
            if name.startswith("decoder.") and ckpt.kind == "eeg2text":
                mapping[name] = name
            continue
        rest = name[len("encoder."):]
        if model.cfg.multiview:
            if rest.startswith(("layers.", "ln_f.")):
                for k in range(len(model.cfg.partition)):
                    mapping[f"encoder.regions.{k}.{rest}"] = name
        else:
            mapping[name] = name
    loaded = []
    with torch.no_grad():
        for dst, s in mapping.items():
            if dst in own and tuple(own[dst].shape) == src[s].shape:
                own[dst].copy_(torch.from_numpy(src[s]))
                loaded.append(dst)
    logger.info("initialised %d tensors from %s checkpoint", len(loaded), ckpt.kind)
    return loaded


def _set_trainable(model: EEG2Text, active: frozenset[int]) -> None:
    if not model.cfg.multiview:
        return
    for k, enc in enumerate(model.encoder.regions):
        for p in enc.parameters():
            p.requires_grad_(k in active)


def finetune(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig, init: Checkpoint | None = None,
             resume: Checkpoint | None = None,
             on_epoch: Callable[[int, EEG2Text, float], None] | None = None) -> Checkpoint:
    """Teacher-forced cross-entropy training of encoder (per view strategy) and decoder."""
    if model_cfg.vocab_size != len(corpus.vocabulary):
        raise CorpusError(f"model vocab_size {model_cfg.vocab_size} != corpus vocabulary {len(corpus.vocabulary)}")
    pairs = text_targets(corpus, model_cfg.max_text_len)
    with _training_threads(cfg.threads), _loss_level_checks():
        model = EEG2Text(model_cfg, seed=cfg.seed, dtype=cfg.dtype)
        state = ad.AdamState()
        history: list[float] = []
        start_epoch = 0
        if resume is not None:
            if resume.vocab is not None and list(resume.vocab) != list(corpus.vocabulary.tokens):
                raise CorpusError("resume checkpoint vocabulary differs from the corpus")
            load_state(model, resume.params)
            state = _adam_from_ckpt(resume, cfg.dtype)
            history = list(resume.loss_history)
            start_epoch = resume.epoch
        elif init is not None:
            init_from_pretrained(model, init)
        n_regions = len(model_cfg.partition) if model_cfg.multiview else 0
        for epoch in range(start_epoch, cfg.n_epochs):
            if n_regions:
                _set_trainable(model, select_active_encoders(epoch, cfg.view_strategy, n_regions))
            order = epoch_order(len(pairs), cfg.seed, epoch)
            total = 0.0
            for start in range(0, len(order), cfg.batch):
                idx = order[start:start + cfg.batch]
                loss = 0.0
                for i in idx:
                    rec = corpus.pairs[i][0]
                    inp, tgt = pairs[i]
                    loss = loss + ad.cross_entropy(model.decode_text(model.encode(rec), inp), tgt)
                loss = _checked(loss / len(idx), "fine-tuning")
                ad.backward(loss)
                _step(model, state, cfg.lr)
                total += float(loss.detach()) * len(idx)
            history.append(total / len(pairs))
            logger.info("train epoch %d loss %.6f", epoch, history[-1])
            if on_epoch is not None:
                on_epoch(epoch, model, history[-1])
        _set_trainable(model, frozenset(range(n_regions)))
    m, v = _adam_to_ckpt(state)
    return Checkpoint(
        params=model_state(model),
        model_config=model_cfg.to_dict(),
        train_config=cfg.to_dict(),
        kind="eeg2text",
        epoch=max(cfg.n_epochs, start_epoch),
        loss_history=history,
        vocab=list(corpus.vocabulary.tokens),
        adam_step=state.step,
        adam_m=m,
        adam_v=v,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> EEG2Text:
    if ckpt.kind != "eeg2text":
        raise TrainingError(f"expected a text-decoding checkpoint, got kind {ckpt.kind!r}")
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = EEG2Text(cfg, dtype=PRECISIONS[ckpt.train_config.get("precision", "f32")])
    load_state(model, ckpt.params)
    model.eval()
    return model


@torch.no_grad()
def token_accuracy(model: EEG2Text, corpus: Corpus) -> float:
    """Teacher-forced next-token accuracy over every target position (EOS included)."""
    hit = count = 0
    for (rec, _), (inp, tgt) in zip(corpus.pairs, text_targets(corpus, model.cfg.max_text_len)):
        pred = model.decode_text(model.encode(rec), inp).argmax(dim=-1)
        hit += int((pred == torch.as_tensor(tgt)).sum())
        count += len(tgt)
    return hit / count


def epochs_to_reach(history: Sequence[float], threshold: float) -> float:
    """1-based epoch at which the loss first drops to ``threshold`` (inf if never)."""
    for i, loss in enumerate(history):
        if loss <= threshold:
            return i + 1
    return math.inf
