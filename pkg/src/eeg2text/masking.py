"""Patch masking strategies for masked-signal pre-training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

STRATEGIES = ("random", "continuous", "remask")


@dataclass(frozen=True)
class MaskSpec:
    n_patches: int
    masked: tuple[int, ...]
    strategy: str
    epoch: int = 0
    seed: int | tuple[int, ...] = 0

    def __post_init__(self):
        masked = tuple(sorted(int(i) for i in self.masked))
        if len(set(masked)) != len(masked):
            raise ValueError("masked indices must be unique")
        if masked and (masked[0] < 0 or masked[-1] >= self.n_patches):
            raise ValueError(f"masked index out of range [0, {self.n_patches})")
        object.__setattr__(self, "masked", masked)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n_patches, dtype=bool)
        out[list(self.masked)] = True
        return out

    def runs(self) -> list[tuple[int, int]]:
        """Maximal contiguous runs as ``(start, length)``."""
        runs: list[tuple[int, int]] = []
        for i in self.masked:
            if runs and runs[-1][0] + runs[-1][1] == i:
                runs[-1] = (runs[-1][0], runs[-1][1] + 1)
            else:
                runs.append((i, 1))
        return runs


def mask_quota(n_patches: int, ratio: float) -> int:
    """round-half-up(ratio * n), at least one patch."""
    return min(n_patches, max(1, int(np.floor(ratio * n_patches + 0.5))))


def _key(seed) -> list[int]:
    return [int(s) for s in (seed if isinstance(seed, (tuple, list)) else (seed,))]


def make_mask(
    strategy: str,
    n_patches: int,
    ratio: float = 0.15,
    epoch: int = 0,
    seed: int | Sequence[int] = 0,
    mean_run: float = 3.0,
) -> MaskSpec:
    """Sample the set of hidden patches.

    ``random`` and ``continuous`` depend on ``seed`` only, so every epoch
    sees the same mask; ``remask`` also keys on ``epoch``. ``seed`` may be a
    sequence (e.g. ``(run_seed, recording_index)``) to give each recording
    its own mask.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown mask strategy {strategy!r}; expected one of {STRATEGIES}")
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    if mean_run < 1:
        raise ValueError("mean_run must be >= 1")
    quota = mask_quota(n_patches, ratio)
    key = _key(seed)
    seed_out = tuple(key) if len(key) > 1 else key[0]

    if strategy == "remask":
        rng = np.random.default_rng(key + [int(epoch)])
    else:
        rng = np.random.default_rng(key)

    if strategy in ("random", "remask"):
        masked = rng.choice(n_patches, size=quota, replace=False)
    else:
        chosen = np.zeros(n_patches, dtype=bool)
        count = 0
        while count < quota:
            length = min(int(rng.geometric(1.0 / mean_run)), quota - count)
            start = int(rng.integers(0, n_patches - length + 1))
            chosen[start:start + length] = True
            count = int(chosen.sum())
        masked = np.flatnonzero(chosen)
    return MaskSpec(n_patches, tuple(int(i) for i in masked), strategy, int(epoch), seed_out)


def apply_mask(patches, spec: MaskSpec, mask_fill) -> torch.Tensor:
    """Replace masked patches of ``[n_patches, n_channels, patch_len]`` by ``mask_fill`` (``[n_channels]``).

    Unmasked patches pass through untouched; gradients flow into ``mask_fill``.
    """
    x = torch.as_tensor(patches)
    if x.ndim != 3 or x.shape[0] != spec.n_patches:
        raise ValueError(f"expected {spec.n_patches} patches, got tensor of shape {tuple(x.shape)}")
    fill = torch.as_tensor(mask_fill, dtype=x.dtype)
    if fill.shape != (x.shape[1],):
        raise ValueError(f"mask_fill must have shape ({x.shape[1]},), got {tuple(fill.shape)}")
    if not spec.masked:
        return x
    sel = torch.from_numpy(spec.as_bool())[:, None, None]
    return torch.where(sel, fill[None, :, None].expand_as(x), x)
