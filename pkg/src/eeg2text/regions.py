"""Electrode-to-brain-region partition and per-region views of a recording."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from eeg2text.data import EEGRecording

_DEFAULT_GROUPS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("Prefrontal Cortex", (
        "E6", "E12", "E5", "E11", "E16", "E15", "E20", "E118", "E24", "E124",
        "E26", "E2", "E27", "E123", "E3", "E4", "E23", "E19", "E22", "E9",
        "E10", "E18", "E28", "E33", "E117", "E122",
    )),
    ("Premotor Cortex", (
        "CZ", "E7", "E106", "E105", "E104", "E115", "E114", "E120", "E110",
        "E116", "E121", "E111", "E112", "E109", "E13", "E30",
    )),
    ("Broca's Area", ("E29", "E36", "E35", "E34")),
    ("Auditory Association Area", (
        "E40", "E38", "E39", "E43", "E44", "E46", "E57", "E58", "E64",
    )),
    ("Primary Motor Cortex", (
        "E31", "E80", "E55", "E37", "E87", "E93", "E103", "E102", "E108",
    )),
    ("Primary Sensory Cortex", (
        "E54", "E79", "E61", "E78", "E62", "E53", "E86", "E92", "E98", "E100", "E101",
    )),
    ("Somatic Sensory Cortex", (
        "E67", "E77", "E71", "E72", "E76", "E66", "E84", "E60", "E85",
    )),
    ("Auditory Cortex", ("E59", "E91", "E97", "E51")),
    ("Wernicke's Area", ("E41", "E42", "E52", "E47", "E45", "E50")),
    ("Visual Area", (
        "E65", "E69", "E70", "E74", "E75", "E82", "E83", "E89", "E90", "E95", "E96",
    )),
)


def _natural_key(label: str):
    digits = "".join(ch for ch in label if ch.isdigit())
    prefix = "".join(ch for ch in label if not ch.isdigit())
    # numbered E-labels first, then named ones such as CZ
    return (prefix != "E", prefix, int(digits) if digits else -1)


#: The 105 labels of the default partition, in natural order (E2 .. E124, CZ).
CANONICAL_LABELS: tuple[str, ...] = tuple(
    sorted((lab for _, labs in _DEFAULT_GROUPS for lab in labs), key=_natural_key)
)


@dataclass(frozen=True)
class ChannelPartition:
    """Ordered list of named electrode groups."""

    groups: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        object.__setattr__(
            self,
            "groups",
            tuple((str(name), tuple(str(c) for c in labels)) for name, labels in self.groups),
        )

    @property
    def region_names(self) -> list[str]:
        return [name for name, _ in self.groups]

    @property
    def sizes(self) -> list[int]:
        return [len(labels) for _, labels in self.groups]

    @property
    def labels(self) -> list[str]:
        """All labels, concatenated in group order."""
        return [lab for _, labels in self.groups for lab in labels]

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, region: str) -> tuple[str, ...]:
        for name, labels in self.groups:
            if name == region:
                return labels
        raise KeyError(region)

    def to_json(self) -> list[dict]:
        return [{"region": name, "channels": list(labels)} for name, labels in self.groups]

    @classmethod
    def from_json(cls, data: list[dict]) -> "ChannelPartition":
        try:
            return cls(tuple((item["region"], tuple(item["channels"])) for item in data))
        except (TypeError, KeyError) as exc:
            raise ValueError(f"malformed partition JSON: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def default_partition() -> ChannelPartition:
    return ChannelPartition(_DEFAULT_GROUPS)


def single_group_partition(labels: Sequence[str] = CANONICAL_LABELS, name: str = "All") -> ChannelPartition:
    return ChannelPartition(((name, tuple(labels)),))


def load_partition(spec: str | Path) -> ChannelPartition:
    """Resolve ``--partition`` values: the literal ``default`` or a JSON file."""
    if str(spec) == "default":
        return default_partition()
    data = json.loads(Path(spec).read_text(encoding="utf-8"))
    return ChannelPartition.from_json(data)


def validate_partition(part: ChannelPartition, canonical: Sequence[str] | None = CANONICAL_LABELS) -> list[str]:
    """Return human-readable violations; an empty list means the partition is valid.

    ``canonical`` is the label set the partition must cover exactly. Pass
    ``None`` to only check disjointness and duplicates (custom layouts).
    """
    violations: list[str] = []
    if not part.groups:
        violations.append("partition has no groups")
    seen: dict[str, str] = {}
    names = part.region_names
    for dup in sorted({n for n in names if names.count(n) > 1}):
        violations.append(f"duplicate region name: {dup}")
    for name, labels in part.groups:
        if not labels:
            violations.append(f"region {name!r} is empty")
        local: set[str] = set()
        for lab in labels:
            if lab in local:
                violations.append(f"duplicate label {lab} within region {name!r}")
                continue
            local.add(lab)
            if lab in seen:
                violations.append(f"overlap: {lab} in both {seen[lab]!r} and {name!r}")
            else:
                seen[lab] = name
    if canonical is not None:
        canon = set(canonical)
        missing = [lab for lab in canonical if lab not in seen]
        unknown = [lab for lab in seen if lab not in canon]
        if missing:
            violations.append(f"missing labels ({len(missing)}): {', '.join(missing)}")
        if unknown:
            violations.append(f"unknown labels ({len(unknown)}): {', '.join(unknown)}")
    return violations


def split_by_region(rec: EEGRecording, part: ChannelPartition) -> list[EEGRecording]:
    """One view per group, channels in group order, time axis untouched."""
    index = {lab: i for i, lab in enumerate(rec.channel_labels)}
    views = []
    for name, labels in part.groups:
        missing = [lab for lab in labels if lab not in index]
        if missing:
            raise KeyError(f"recording {rec.id!r} lacks channel(s) {', '.join(missing)} required by region {name!r}")
        rows = [index[lab] for lab in labels]
        views.append(EEGRecording(rec.id, tuple(labels), rec.sample_rate, rec.samples[rows]))
    return views


def merge_views(views: Sequence[EEGRecording], channel_labels: Sequence[str]) -> np.ndarray:
    """Inverse of :func:`split_by_region` for the given target channel order."""
    rows = {}
    for view in views:
        for lab, row in zip(view.channel_labels, view.samples):
            rows[lab] = row
    return np.stack([rows[lab] for lab in channel_labels])
