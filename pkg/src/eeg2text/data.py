"""EEG/text pairs: data model, corpus container I/O, preprocessing and synthesis."""

from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import get_window

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    """Invalid corpus contents or a corpus directory that cannot be read."""


class ChannelMismatchError(CorpusError):
    pass


class ChecksumError(CorpusError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, keep punctuation marks as their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True, eq=False)
class EEGRecording:
    """One sentence-reading trial: ``samples`` is ``[n_channels, n_timesteps]`` in microvolts."""

    id: str
    channel_labels: tuple[str, ...]
    sample_rate: float
    samples: np.ndarray

    def __post_init__(self):
        labels = tuple(str(c) for c in self.channel_labels)
        object.__setattr__(self, "channel_labels", labels)
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise CorpusError(f"recording {self.id!r}: samples must be 2-D, got shape {samples.shape}")
        if samples.shape[0] != len(labels):
            raise ChannelMismatchError(
                f"recording {self.id!r}: {samples.shape[0]} signal rows for {len(labels)} channel labels"
            )
        if len(set(labels)) != len(labels):
            raise CorpusError(f"recording {self.id!r}: duplicate channel labels")
        if samples.shape[1] < 1:
            raise CorpusError(f"recording {self.id!r}: no timesteps")
        if not np.all(np.isfinite(samples)):
            raise CorpusError(f"recording {self.id!r}: non-finite sample values")
        if not self.sample_rate > 0:
            raise CorpusError(f"recording {self.id!r}: sample_rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EEGRecording):
            return NotImplemented
        return (
            self.id == other.id
            and self.channel_labels == other.channel_labels
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True)
class Sentence:
    raw_text: str
    tokens: tuple[str, ...] = field(default=())

    def __post_init__(self):
        toks = tuple(tokenize(self.raw_text))
        if not toks:
            raise CorpusError(f"sentence {self.raw_text!r} has no tokens")
        if self.tokens and tuple(self.tokens) != toks:
            raise CorpusError(f"tokens of {self.raw_text!r} do not match its tokenization")
        object.__setattr__(self, "tokens", toks)


@dataclass(frozen=True)
class Vocabulary:
    """Token/id bijection; ids 0-3 are always ``<pad> <bos> <eos> <unk>``."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        toks = tuple(self.tokens)
        if toks[:4] != SPECIAL_TOKENS:
            toks = SPECIAL_TOKENS + tuple(t for t in toks if t not in SPECIAL_TOKENS)
        if len(set(toks)) != len(toks):
            raise CorpusError("vocabulary contains duplicate tokens")
        for t in toks:
            if not t or any(ch.isspace() for ch in t):
                raise CorpusError(f"invalid vocabulary token {t!r}")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(toks)})

    @classmethod
    def build(cls, sentences: Iterable[Sentence]) -> "Vocabulary":
        """Words in first-seen order after the reserved specials."""
        seen: dict[str, None] = {}
        for s in sentences:
            for t in s.tokens:
                seen.setdefault(t, None)
        return cls(SPECIAL_TOKENS + tuple(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return out


@dataclass(frozen=True, eq=False)
class Corpus:
    name: str
    pairs: tuple[tuple[EEGRecording, Sentence], ...]
    vocabulary: Vocabulary
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((r, s) for r, s in self.pairs))
        if not self.pairs:
            raise CorpusError(f"corpus {self.name!r} is empty")
        first = self.pairs[0][0]
        for rec, _ in self.pairs[1:]:
            if rec.channel_labels != first.channel_labels:
                raise ChannelMismatchError(
                    f"corpus {self.name!r}: recording {rec.id!r} channel set differs from {first.id!r}"
                )
            if rec.sample_rate != first.sample_rate:
                raise CorpusError(f"corpus {self.name!r}: recording {rec.id!r} has a different sample_rate")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def channel_labels(self) -> tuple[str, ...]:
        return self.pairs[0][0].channel_labels

    @property
    def sample_rate(self) -> float:
        return self.pairs[0][0].sample_rate

    @property
    def recordings(self) -> list[EEGRecording]:
        return [r for r, _ in self.pairs]

    @property
    def sentences(self) -> list[Sentence]:
        return [s for _, s in self.pairs]

    @property
    def manifest(self) -> dict:
        return {
            "name": self.name,
            "sample_rate": self.sample_rate,
            "channel_labels": list(self.channel_labels),
            "n_pairs": len(self.pairs),
            "seed": self.seed,
            "format_version": FORMAT_VERSION,
        }

    def with_recordings(self, recordings: Sequence[EEGRecording]) -> "Corpus":
        pairs = tuple((r, s) for r, (_, s) in zip(recordings, self.pairs, strict=True))
        return Corpus(self.name, pairs, self.vocabulary, self.seed)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.name == other.name
            and self.seed == other.seed
            and self.vocabulary == other.vocabulary
            and self.pairs == other.pairs
        )

    __hash__ = None


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # [n_channels, n_freq_bins, n_frames]
    window_len: int
    hop_len: int

    @property
    def n_freq_bins(self) -> int:
        return self.values.shape[1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic corpus.

    Sentences are walks on a sparse random word graph (each word has
    ``branching`` possible successors) so masked spans stay partly
    predictable from context. ``split`` selects an independent sample of
    sentences over the same words, templates and word graph.
    ``n_sources``/``n_harmonics`` shape the templates (see
    :func:`synth_templates`).
    """

    n_sentences: int = 32
    vocab_size: int = 50
    sentence_length: tuple[int, int] = (4, 8)
    n_channels: int = 105
    template_len: int = 50
    word_stride: int | None = None
    noise_std: float = 0.1
    seed: int = 0
    sample_rate: float = 500.0
    branching: int = 4
    n_sources: int = 8
    n_harmonics: int = 4
    name: str = "synthetic"
    split: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sentence_length", tuple(int(v) for v in self.sentence_length))
        if self.word_stride is None:
            object.__setattr__(self, "word_stride", self.template_len)
        lo, hi = self.sentence_length
        counts = (self.n_sentences, self.vocab_size, self.n_channels, self.template_len, self.word_stride, self.branching,
                  self.n_sources, self.n_harmonics, lo)
        if min(counts) < 1:
            raise ValueError("SynthConfig counts must all be positive")
        if hi < lo:
            raise ValueError("sentence_length must be (min, max) with min <= max")
        if self.branching > self.vocab_size:
            raise ValueError("branching cannot exceed vocab_size")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------- synthesis

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def synth_words(n: int) -> list[str]:
    """Deterministic pronounceable pseudo-words: ``ba, be, ..., zu, baba, ...``."""
    sylls = [c + v for c in _ONSETS for v in _VOWELS]
    words: list[str] = []
    length = 1
    while len(words) < n:
        for idx in np.ndindex(*([len(sylls)] * length)):
            words.append("".join(sylls[i] for i in idx))
            if len(words) == n:
                break
        length += 1
    return words


def synth_channel_labels(n_channels: int) -> tuple[str, ...]:
    from eeg2text.regions import CANONICAL_LABELS

    if n_channels == len(CANONICAL_LABELS):
        return CANONICAL_LABELS
    return tuple(f"CH{i + 1}" for i in range(n_channels))


def _draw_templates(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    mixing = rng.standard_normal((cfg.n_channels, cfg.n_sources)) / np.sqrt(cfg.n_sources)
    coef = rng.standard_normal((cfg.vocab_size, cfg.n_sources, 2, cfg.n_harmonics))
    t = np.arange(cfg.template_len) / cfg.template_len
    k = np.arange(1, cfg.n_harmonics + 1)[:, None]
    basis = np.stack([np.cos(2 * np.pi * k * t), np.sin(2 * np.pi * k * t)])  # [2, H, L]
    sources = np.einsum("vsah,ahl->vsl", coef, basis) * np.sqrt(2.0 / cfg.n_harmonics)
    return np.einsum("cs,vsl->vcl", mixing, sources)


def synth_templates(cfg: SynthConfig) -> np.ndarray:
    """Per-word ``[n_channels, template_len]`` waveforms, ``[vocab_size, n_channels, template_len]``.

    Each word drives ``n_sources`` latent sources with a smooth waveform (a
    few random low harmonics over the template window); a corpus-wide
    mixing matrix projects the sources onto the channels, so channels are
    spatially correlated like scalp EEG. Draw order from
    ``default_rng(cfg.seed)``: mixing ``[C, S]``, then harmonic coefficients
    ``[V, S, 2, H]``.
    """
    return _draw_templates(cfg, np.random.default_rng(cfg.seed))


def synth_corpus(cfg: SynthConfig) -> Corpus:
    """Generate a corpus whose recordings are sums of per-word waveforms plus noise.

    Word ``j`` of a sentence starts at sample ``j * word_stride`` (default
    ``template_len``, i.e. plain concatenation); a shorter stride makes
    neighbouring responses overlap and add.
    Templates come from :func:`synth_templates`; the word graph is the next
    draw from the same generator. Sentences and noise come from
    ``default_rng([cfg.seed, cfg.split])``.
    """
    rng = np.random.default_rng(cfg.seed)
    templates = _draw_templates(cfg, rng)
    successors = np.stack([rng.choice(cfg.vocab_size, size=cfg.branching, replace=False)
                           for _ in range(cfg.vocab_size)])
    rng = np.random.default_rng([cfg.seed, cfg.split])
    words = synth_words(cfg.vocab_size)
    labels = synth_channel_labels(cfg.n_channels)
    lo, hi = cfg.sentence_length

    pairs = []
    for i in range(cfg.n_sentences):
        length = int(rng.integers(lo, hi + 1))
        ids = [int(rng.integers(cfg.vocab_size))]
        while len(ids) < length:
            ids.append(int(successors[ids[-1], rng.integers(cfg.branching)]))
        signal = np.zeros((cfg.n_channels, cfg.word_stride * (length - 1) + cfg.template_len))
        for j, w in enumerate(ids):
            signal[:, j * cfg.word_stride:j * cfg.word_stride + cfg.template_len] += templates[w]
        signal = signal + cfg.noise_std * rng.standard_normal(signal.shape)
        rec = EEGRecording(f"{cfg.name}-{i:05d}", labels, cfg.sample_rate, signal.astype(np.float32))
        pairs.append((rec, Sentence(" ".join(words[w] for w in ids))))
    vocab = Vocabulary(SPECIAL_TOKENS + tuple(words))
    return Corpus(cfg.name, tuple(pairs), vocab, cfg.seed)


# ---------------------------------------------------------------- container I/O

def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _write(path: Path, data: bytes, checksums: dict) -> None:
    path.write_bytes(data)
    checksums[path.name] = _crc(data)


def save_corpus(corpus: Corpus, path) -> None:
    if not isinstance(corpus, Corpus) or not corpus.pairs:
        raise CorpusError("cannot save an empty or invalid corpus")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    checksums: dict[str, int] = {}
    _write(root / "vocab.txt", ("\n".join(corpus.vocabulary.tokens) + "\n").encode("utf-8"), checksums)
    entries = []
    for idx, (rec, sent) in enumerate(corpus.pairs):
        sig_name, txt_name = f"sig_{idx}.f32", f"txt_{idx}.txt"
        _write(root / sig_name, rec.samples.astype("<f4", copy=False).tobytes(order="C"), checksums)
        _write(root / txt_name, sent.raw_text.encode("utf-8"), checksums)
        entries.append({
            "id": rec.id,
            "signal": sig_name,
            "text": txt_name,
            "n_channels": rec.n_channels,
            "n_timesteps": rec.n_timesteps,
        })
    manifest = corpus.manifest
    manifest["pairs"] = entries
    manifest["checksums"] = checksums
    text = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (root / "manifest.json").write_text(text, encoding="utf-8")
    logger.info("saved corpus %r (%d pairs) to %s", corpus.name, len(corpus), root)


def _read_checked(root: Path, name: str, checksums: dict) -> bytes:
    file = root / name
    if not file.is_file():
        raise CorpusError(f"missing corpus file {file}")
    data = file.read_bytes()
    if name not in checksums:
        raise ChecksumError(f"manifest has no checksum for {name}")
    if _crc(data) != checksums[name]:
        raise ChecksumError(f"checksum mismatch for {file}")
    return data


def load_corpus(path, zscore: bool = False) -> Corpus:
    """Read a corpus directory; ``zscore=True`` applies :func:`normalize` to every recording."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise CorpusError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorpusError(f"unreadable manifest {mpath}: {exc}") from exc
    if str(manifest.get("format_version")) != FORMAT_VERSION:
        raise CorpusError(f"unsupported corpus format_version {manifest.get('format_version')!r}")
    try:
        labels = tuple(manifest["channel_labels"])
        sample_rate = float(manifest["sample_rate"])
        checksums = manifest["checksums"]
        entries = manifest["pairs"]
        name = manifest["name"]
    except KeyError as exc:
        raise CorpusError(f"manifest {mpath} lacks field {exc}") from exc
    if manifest.get("n_pairs") != len(entries):
        raise CorpusError(f"manifest n_pairs={manifest.get('n_pairs')} but {len(entries)} pair entries")

    vocab_lines = _read_checked(root, "vocab.txt", checksums).decode("utf-8").split("\n")
    if vocab_lines and vocab_lines[-1] == "":
        vocab_lines.pop()
    if tuple(vocab_lines[:4]) != SPECIAL_TOKENS:
        raise CorpusError("vocab.txt must start with the reserved special tokens")
    vocab = Vocabulary(tuple(vocab_lines))

    pairs = []
    for entry in entries:
        n_ch, n_t = int(entry["n_channels"]), int(entry["n_timesteps"])
        if n_ch != len(labels):
            raise ChannelMismatchError(
                f"recording {entry['id']!r} has {n_ch} channels but the manifest declares {len(labels)}"
            )
        raw = _read_checked(root, entry["signal"], checksums)
        if len(raw) != 4 * n_ch * n_t:
            raise CorpusError(f"{entry['signal']}: {len(raw)} bytes, expected {4 * n_ch * n_t}")
        samples = np.frombuffer(raw, dtype="<f4").reshape(n_ch, n_t).astype(np.float32)
        text = _read_checked(root, entry["text"], checksums).decode("utf-8")
        rec = EEGRecording(entry["id"], labels, sample_rate, samples)
        if zscore:
            rec = normalize(rec)
        pairs.append((rec, Sentence(text)))
    return Corpus(name, tuple(pairs), vocab, manifest.get("seed"))


# ---------------------------------------------------------------- preprocessing

def normalize(rec: EEGRecording) -> EEGRecording:
    """Per-channel z-score (population variance); constant channels become zeros."""
    if rec.n_timesteps < 2:
        raise CorpusError(f"recording {rec.id!r}: need at least 2 timesteps to normalize")
    x = rec.samples.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    flat = std <= 1e-12
    z = np.where(flat, 0.0, (x - mean) / np.where(flat, 1.0, std))
    return EEGRecording(rec.id, rec.channel_labels, rec.sample_rate, z.astype(np.float32))


def patchify(rec: EEGRecording | np.ndarray, patch_len: int) -> np.ndarray:
    """Split into ``[n_patches, n_channels, patch_len]``; the trailing remainder is dropped."""
    x = rec.samples if isinstance(rec, EEGRecording) else np.asarray(rec)
    n_t = x.shape[-1]
    if not 1 <= patch_len <= n_t:
        raise ValueError(f"patch_len {patch_len} must be in [1, {n_t}]")
    n = n_t // patch_len
    return x[:, : n * patch_len].reshape(x.shape[0], n, patch_len).transpose(1, 0, 2)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    n, c, p = patches.shape
    return patches.transpose(1, 0, 2).reshape(c, n * p)


def spectrogram(rec: EEGRecording | np.ndarray, window_len: int = 64, hop_len: int = 32) -> Spectrogram:
    """Magnitude STFT with a periodic Hann window; one-sided, phase discarded."""
    x = rec.samples if isinstance(rec, EEGRecording) else np.asarray(rec)
    x = np.asarray(x, dtype=np.float64)
    if hop_len < 1:
        raise ValueError("hop_len must be >= 1")
    if not 1 <= window_len <= x.shape[-1]:
        raise ValueError(f"window_len {window_len} longer than signal ({x.shape[-1]} samples)")
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len, axis=-1)[:, ::hop_len]
    spec = np.abs(np.fft.rfft(frames * get_window("hann", window_len), axis=-1))
    return Spectrogram(spec.transpose(0, 2, 1), window_len, hop_len)
