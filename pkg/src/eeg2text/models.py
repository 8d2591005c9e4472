"""Convolutional-transformer encoders, reconstruction head and the autoregressive text decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from eeg2text import autodiff as ad
from eeg2text.data import BOS, EOS, EEGRecording, spectrogram
from eeg2text.regions import ChannelPartition, split_by_region

INPUT_MODES = ("raw", "spectrogram")


@dataclass(frozen=True)
class ConvConfig:
    """Raw-signal compressor: conv(k1, s1: C -> c1), GELU, conv(k2, s2: c1 -> d_model)."""

    k1: int = 25
    s1: int = 25
    c1: int = 64
    k2: int = 2
    s2: int = 2


@dataclass(frozen=True)
class SpecConvConfig:
    """Spectrogram compressor: two 2-D convs over (freq, frame), then a projection to d_model."""

    window_len: int = 64
    hop_len: int = 32
    kf1: int = 5
    sf1: int = 2
    c1: int = 16
    kf2: int = 5
    sf2: int = 2
    kt2: int = 1
    st2: int = 1
    c2: int = 16

    @property
    def n_freq_bins(self) -> int:
        return self.window_len // 2 + 1

    def freq_out(self) -> int:
        f1 = (self.n_freq_bins - self.kf1) // self.sf1 + 1
        return (f1 - self.kf2) // self.sf2 + 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    channel_labels: tuple[str, ...]
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_global_layers: int = 2
    d_ff: int | None = None
    conv: ConvConfig = field(default_factory=ConvConfig)
    spec_conv: SpecConvConfig = field(default_factory=SpecConvConfig)
    patch_len: int = 50
    max_text_len: int = 32
    input_mode: str = "raw"
    partition: ChannelPartition | None = None

    def __post_init__(self):
        object.__setattr__(self, "channel_labels", tuple(self.channel_labels))
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 reserved ids plus at least one word")
        if self.partition is not None:
            known = set(self.channel_labels)
            unknown = [lab for lab in self.partition.labels if lab not in known]
            if unknown:
                raise ValueError(f"partition uses labels absent from channel_labels: {unknown[:5]}")
        if self.spec_conv.freq_out() < 1:
            raise ValueError("spectrogram conv settings leave no frequency rows")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 2 * self.d_model

    @property
    def multiview(self) -> bool:
        return self.partition is not None

    @property
    def n_channels(self) -> int:
        return len(self.channel_labels)

    def min_timesteps(self) -> int:
        """Shortest input that still yields one encoder position."""
        if self.input_mode == "raw":
            return self.conv.k1 + (self.conv.k2 - 1) * self.conv.s1
        return self.spec_conv.window_len + (self.spec_conv.kt2 - 1) * self.spec_conv.hop_len

    def raw_positions(self, n_timesteps: int) -> int:
        t1 = (n_timesteps - self.conv.k1) // self.conv.s1 + 1
        return (t1 - self.conv.k2) // self.conv.s2 + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_labels"] = list(self.channel_labels)
        d["partition"] = self.partition.to_json() if self.partition is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv"] = ConvConfig(**d.get("conv", {}))
        d["spec_conv"] = SpecConvConfig(**d.get("spec_conv", {}))
        if d.get("partition") is not None:
            d["partition"] = ChannelPartition.from_json(d["partition"])
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class EncoderMemory:
    states: torch.Tensor  # [mem_len, d_model]
    source_id: str = ""

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ad.ShapeError(f"encoder memory must be [mem_len >= 1, d_model], got {tuple(self.states.shape)}")

    @property
    def mem_len(self) -> int:
        return self.states.shape[0]


def sinusoidal_positions(length: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d_model)
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return pe.to(dtype)


# ---------------------------------------------------------------- building blocks

def _normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64) * std


class Block(nn.Module):
    """Module with explicit, generator-driven initialisation (``reset``)."""

    def reset(self, gen: torch.Generator) -> None:
        raise NotImplementedError

    @torch.no_grad()
    def _fill(self, name: str, values: torch.Tensor) -> None:
        p = getattr(self, name)
        p.copy_(values.to(p.dtype))


class LayerNorm(Block):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def reset(self, gen):
        self._fill("weight", torch.ones(self.weight.shape))
        self._fill("bias", torch.zeros(self.bias.shape))

    def forward(self, x):
        return ad.layer_norm(x, self.weight, self.bias)


class Attention(Block):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, nn.Parameter(torch.empty(d, d)))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, nn.Parameter(torch.zeros(d)))

    def reset(self, gen):
        d = self.wq.shape[1]
        for name in ("wq", "wk", "wv", "wo"):
            self._fill(name, _normal((d, d), 1 / math.sqrt(d), gen))
        for name in ("bq", "bk", "bv", "bo"):
            self._fill(name, torch.zeros(d))

    def weights(self) -> ad.AttentionWeights:
        return ad.AttentionWeights(self.wq, self.wk, self.wv, self.wo, self.bq, self.bk, self.bv, self.bo)

    def forward(self, query, key, value, causal=False):
        return ad.multi_head_attention(query, key, value, self.weights(), self.n_heads, causal)


class FeedForward(Block):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_ff, d))
        self.b1 = nn.Parameter(torch.zeros(d_ff))
        self.w2 = nn.Parameter(torch.empty(d, d_ff))
        self.b2 = nn.Parameter(torch.zeros(d))

    def reset(self, gen):
        d_ff, d = self.w1.shape
        self._fill("w1", _normal((d_ff, d), 1 / math.sqrt(d), gen))
        self._fill("b1", torch.zeros(d_ff))
        self._fill("w2", _normal((d, d_ff), 1 / math.sqrt(d_ff), gen))
        self._fill("b2", torch.zeros(d))

    def forward(self, x):
        return ad.linear(ad.gelu(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, n_heads)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, x):
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, h))
        return ad.add(x, self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.self_attn = Attention(d, n_heads)
        self.ln2 = LayerNorm(d)
        self.cross_attn = Attention(d, n_heads)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, x, memory):
        h = self.ln1(x)
        x = ad.add(x, self.self_attn(h, h, h, causal=True))
        h = self.ln2(x)
        x = ad.add(x, self.cross_attn(h, memory, memory))
        return ad.add(x, self.ff(self.ln3(x)))


class RawCompressor(Block):
    """Two strided 1-D convolutions: spatial mixing of all channels plus temporal compression."""

    def __init__(self, n_channels: int, conv: ConvConfig, d_model: int):
        super().__init__()
        self.conv = conv
        self.w1 = nn.Parameter(torch.empty(conv.c1, n_channels, conv.k1))
        self.b1 = nn.Parameter(torch.zeros(conv.c1))
        self.w2 = nn.Parameter(torch.empty(d_model, conv.c1, conv.k2))
        self.b2 = nn.Parameter(torch.zeros(d_model))

    def reset(self, gen):
        for name in ("w1", "w2"):
            shape = getattr(self, name).shape
            self._fill(name, _normal(shape, 1 / math.sqrt(shape[1] * shape[2]), gen))
        self._fill("b1", torch.zeros(self.b1.shape))
        self._fill("b2", torch.zeros(self.b2.shape))

    def forward(self, x):
        h = ad.gelu(ad.conv1d(x, self.w1, self.b1, self.conv.s1))
        return ad.transpose(ad.conv1d(h, self.w2, self.b2, self.conv.s2))


class SpectrogramCompressor(Block):
    """2-D convolutions over (frequency, frame); every frame becomes one d_model vector."""

    def __init__(self, n_channels: int, sc: SpecConvConfig, d_model: int):
        super().__init__()
        self.sc = sc
        self.w1 = nn.Parameter(torch.empty(sc.c1, n_channels, sc.kf1, 1))
        self.b1 = nn.Parameter(torch.zeros(sc.c1))
        self.w2 = nn.Parameter(torch.empty(sc.c2, sc.c1, sc.kf2, sc.kt2))
        self.b2 = nn.Parameter(torch.zeros(sc.c2))
        self.proj = nn.Parameter(torch.empty(d_model, sc.c2 * sc.freq_out()))
        self.proj_b = nn.Parameter(torch.zeros(d_model))

    def reset(self, gen):
        for name in ("w1", "w2", "proj"):
            shape = getattr(self, name).shape
            self._fill(name, _normal(shape, 1 / math.sqrt(math.prod(shape[1:])), gen))
        for name in ("b1", "b2", "proj_b"):
            self._fill(name, torch.zeros(getattr(self, name).shape))

    def forward(self, x):
        sc = self.sc
        h = ad.gelu(ad.conv2d(x, self.w1, self.b1, (sc.sf1, 1)))
        h = ad.gelu(ad.conv2d(h, self.w2, self.b2, (sc.sf2, sc.st2)))
        c, f, t = h.shape
        return ad.linear(ad.transpose(ad.reshape(h, (c * f, t))), self.proj, self.proj_b)


class ReconstructionHead(Block):
    """Transposed convolutions mirroring :class:`RawCompressor`: ``[T', d] -> [C, T]``."""

    def __init__(self, n_channels: int, conv: ConvConfig, d_model: int):
        super().__init__()
        self.conv = conv
        self.w2 = nn.Parameter(torch.empty(d_model, conv.c1, conv.k2))
        self.b2 = nn.Parameter(torch.zeros(conv.c1))
        self.w1 = nn.Parameter(torch.empty(conv.c1, n_channels, conv.k1))
        self.b1 = nn.Parameter(torch.zeros(n_channels))

    def reset(self, gen):
        for name in ("w2", "w1"):
            shape = getattr(self, name).shape
            self._fill(name, _normal(shape, 1 / math.sqrt(shape[0]), gen))
        self._fill("b2", torch.zeros(self.b2.shape))
        self._fill("b1", torch.zeros(self.b1.shape))

    def forward(self, states):
        h = ad.gelu(ad.conv_transpose1d(ad.transpose(states), self.w2, self.b2, self.conv.s2))
        return ad.conv_transpose1d(h, self.w1, self.b1, self.conv.s1)


# ---------------------------------------------------------------- encoders

def prepare_input(rec: EEGRecording, labels: Sequence[str], cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
    """Select ``labels`` (in that order) and convert to the configured input format."""
    index = {lab: i for i, lab in enumerate(rec.channel_labels)}
    missing = [lab for lab in labels if lab not in index]
    if missing:
        raise KeyError(f"recording {rec.id!r} lacks channel(s) {', '.join(missing[:5])}")
    x = rec.samples[[index[lab] for lab in labels]]
    if rec.n_timesteps < cfg.min_timesteps():
        raise ad.ShapeError(
            f"recording {rec.id!r} has {rec.n_timesteps} samples; the compressor needs >= {cfg.min_timesteps()}"
        )
    if cfg.input_mode == "spectrogram":
        x = spectrogram(x, cfg.spec_conv.window_len, cfg.spec_conv.hop_len).values
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


class SingleViewEncoder(nn.Module):
    """Compressor, sinusoidal positions, self-attention stack, final norm."""

    def __init__(self, n_channels: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.input_mode == "raw":
            self.compressor = RawCompressor(n_channels, cfg.conv, cfg.d_model)
        else:
            self.compressor = SpectrogramCompressor(n_channels, cfg.spec_conv, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim)
                                    for _ in range(cfg.n_encoder_layers))
        self.ln_f = LayerNorm(cfg.d_model)

    def compress(self, x: torch.Tensor) -> torch.Tensor:
        return self.compressor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.compressor(x)
        h = ad.add(h, sinusoidal_positions(h.shape[0], h.shape[1], h.dtype))
        for layer in self.layers:
            h = layer(h)
        return self.ln_f(h)


class MultiViewEncoder(nn.Module):
    """One single-view encoder per region, fused by a global self-attention stack.

    Regional memories are concatenated along the position axis after adding
    a learned per-region segment embedding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        part = cfg.partition
        self.regions = nn.ModuleList(SingleViewEncoder(n, cfg) for n in part.sizes)
        self.segment = nn.Parameter(torch.zeros(len(part), cfg.d_model))
        self.global_layers = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim)
                                           for _ in range(cfg.n_global_layers))
        self.ln_g = LayerNorm(cfg.d_model) if cfg.n_global_layers else None

    def regional(self, rec: EEGRecording) -> list[torch.Tensor]:
        dtype = self.segment.dtype
        views = split_by_region(rec, self.cfg.partition)
        return [enc(prepare_input(v, v.channel_labels, self.cfg, dtype)) for enc, v in zip(self.regions, views)]

    def fuse(self, regional: Sequence[torch.Tensor]) -> torch.Tensor:
        h = torch.cat([ad.add(m, self.segment[k]) for k, m in enumerate(regional)], dim=0)
        for layer in self.global_layers:
            h = layer(h)
        return self.ln_g(h) if self.ln_g is not None else h

    def forward(self, rec: EEGRecording) -> torch.Tensor:
        return self.fuse(self.regional(rec))


class TextDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.layers = nn.ModuleList(DecoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim)
                                    for _ in range(cfg.n_decoder_layers))
        self.ln_f = LayerNorm(cfg.d_model)
        self.out = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.out_b = nn.Parameter(torch.zeros(cfg.vocab_size))

    def forward(self, memory: torch.Tensor, prefix) -> torch.Tensor:
        ids = torch.as_tensor(prefix, dtype=torch.long)
        if ids.ndim != 1 or ids.numel() < 1:
            raise ad.ShapeError("prefix must be a non-empty 1-D id sequence")
        if ids.numel() > self.cfg.max_text_len:
            raise ad.ShapeError(f"prefix length {ids.numel()} exceeds max_text_len {self.cfg.max_text_len}")
        h = ad.embedding_lookup(self.embed, ids)
        h = ad.add(h, sinusoidal_positions(h.shape[0], h.shape[1], h.dtype))
        for layer in self.layers:
            h = layer(h, memory)
        return ad.linear(self.ln_f(h), self.out, self.out_b)


# ---------------------------------------------------------------- full models

def reset_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: every :class:`Block` and bare embedding drawn from one seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, sub in module.named_modules():
        if isinstance(sub, Block):
            sub.reset(gen)
        elif isinstance(sub, TextDecoder):
            d = sub.cfg.d_model
            with torch.no_grad():
                sub.embed.copy_(_normal(sub.embed.shape, 1.0, gen).to(sub.embed.dtype))
                sub.out.copy_(_normal(sub.out.shape, 1 / math.sqrt(d), gen).to(sub.out.dtype))
                sub.out_b.zero_()
        elif isinstance(sub, MultiViewEncoder):
            with torch.no_grad():
                sub.segment.copy_(_normal(sub.segment.shape, 0.02, gen).to(sub.segment.dtype))
    return module


class EEG2Text(nn.Module):
    """Encoder (single- or multi-view) plus autoregressive text decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        if cfg.multiview:
            self.encoder = MultiViewEncoder(cfg)
        else:
            self.encoder = SingleViewEncoder(cfg.n_channels, cfg)
        self.decoder = TextDecoder(cfg)
        reset_parameters(self, seed)
        self.to(dtype)

    @property
    def dtype(self):
        return self.decoder.embed.dtype

    def encode(self, rec: EEGRecording) -> EncoderMemory:
        if self.cfg.multiview:
            states = self.encoder(rec)
        else:
            states = self.encoder(prepare_input(rec, self.cfg.channel_labels, self.cfg, self.dtype))
        return EncoderMemory(states, rec.id)

    def decode_text(self, memory: EncoderMemory | torch.Tensor, prefix) -> torch.Tensor:
        states = memory.states if isinstance(memory, EncoderMemory) else memory
        return self.decoder(states, prefix)

    @torch.no_grad()
    def generate(self, memory: EncoderMemory, mode: str = "greedy", beam_width: int = 4,
                 max_len: int | None = None) -> list[int]:
        """Decode from BOS until EOS or ``max_len`` generated tokens; returns ids without BOS/EOS."""
        max_len = self.cfg.max_text_len if max_len is None else max_len
        if max_len > self.cfg.max_text_len:
            raise ValueError(f"max_len {max_len} exceeds max_text_len {self.cfg.max_text_len}")
        if mode == "greedy":
            return greedy_search(lambda p: self.decode_text(memory, p)[-1], max_len)
        if mode == "beam":
            return beam_search(lambda p: self.decode_text(memory, p)[-1], max_len, beam_width)
        raise ValueError(f"unknown decoding mode {mode!r}")


def greedy_search(next_logits, max_len: int) -> list[int]:
    seq = [BOS]
    while len(seq) - 1 < max_len:
        tok = int(torch.argmax(next_logits(seq)))  # first maximum wins ties
        if tok == EOS:
            break
        seq.append(tok)
    return seq[1:]


def beam_search(next_logits, max_len: int, width: int) -> list[int]:
    """Beam search ranked by length-normalised log-probability (sum / generated length)."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    beams: list[tuple[float, list[int]]] = [(0.0, [BOS])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        cands = []
        for score, seq in beams:
            logp = ad.log_softmax(next_logits(seq).double())
            order = torch.sort(logp, descending=True, stable=True).indices[:width]
            cands.extend((score + float(logp[t]), seq + [int(t)]) for t in order)
        cands.sort(key=lambda c: -c[0])  # stable: earlier beams and lower ids win ties
        beams = []
        for score, seq in cands[:width]:
            (finished if seq[-1] == EOS else beams).append((score, seq))
        if not beams or len(finished) >= width:
            break
    finished.extend(beams)
    best = max(finished, key=lambda c: c[0] / max(len(c[1]) - 1, 1))
    seq = best[1][1:]
    return seq[:-1] if seq and seq[-1] == EOS else seq


class Pretrainer(nn.Module):
    """Masked-patch reconstruction model around a raw-mode single-view encoder.

    ``aux_channels`` lists channel counts of extra corpora whose layouts
    differ from ``cfg.channel_labels``; each gets a learned linear adapter
    into and out of the base layout, plus its own mask fill.
    """

    def __init__(self, cfg: ModelConfig, aux_channels: Sequence[int] = (), seed: int = 0, dtype=torch.float32):
        super().__init__()
        if cfg.input_mode != "raw":
            raise ValueError("masked pre-training operates on raw signal patches (input_mode='raw')")
        conv = cfg.conv
        if conv.k1 != conv.s1 or conv.k2 != conv.s2 or conv.s1 * conv.s2 != cfg.patch_len:
            raise ValueError("reconstruction needs non-overlapping convs with s1 * s2 == patch_len")
        self.cfg = cfg
        self.encoder = SingleViewEncoder(cfg.n_channels, cfg)
        self.recon = ReconstructionHead(cfg.n_channels, conv, cfg.d_model)
        self.mask_fill = nn.Parameter(torch.zeros(cfg.n_channels))
        self.adapters = nn.ModuleList(ChannelAdapter(n, cfg.n_channels) for n in aux_channels)
        reset_parameters(self, seed)
        self.to(dtype)

    def reconstruct(self, x: torch.Tensor, adapter: int | None = None) -> torch.Tensor:
        """``[C, T]`` (masked) signal -> reconstruction of the same shape."""
        if adapter is None:
            return self.recon(self.encoder(x))
        a = self.adapters[adapter]
        return a.backward_map(self.recon(self.encoder(a.forward_map(x))))


class ChannelAdapter(Block):
    def __init__(self, n_in: int, n_base: int):
        super().__init__()
        self.into = nn.Parameter(torch.empty(n_base, n_in))
        self.back = nn.Parameter(torch.empty(n_in, n_base))
        self.mask_fill = nn.Parameter(torch.zeros(n_in))

    def reset(self, gen):
        self._fill("into", _normal(self.into.shape, 1 / math.sqrt(self.into.shape[1]), gen))
        self._fill("back", _normal(self.back.shape, 1 / math.sqrt(self.back.shape[1]), gen))
        self._fill("mask_fill", torch.zeros(self.mask_fill.shape))

    def forward_map(self, x):
        return ad.matmul(self.into, x)

    def backward_map(self, x):
        return ad.matmul(self.back, x)
