"""n-way k-shot episode construction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import DEFAULT_SEED, DatasetError, Sample, derive_seed


class InsufficientSamplesError(DatasetError):
    pass


@dataclass
class Episode:
    n: int
    k: int
    classes: list[int]
    support: list[tuple[int, list[Sample]]]
    query: list[tuple[int, Sample]]

    def support_ids(self) -> list[str]:
        return [s.id for _, shots in self.support for s in shots]

    def query_ids(self) -> list[str]:
        return [s.id for _, s in self.query]

    def to_manifest(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "classes": list(self.classes),
            "support": [{"class": c, "ids": [s.id for s in shots]} for c, shots in self.support],
            "query": [{"class": c, "id": s.id} for c, s in self.query],
        }


def sample_classes(sample: Sample) -> set[int]:
    """Every label in the mask, background included."""
    return {int(c) for c in np.flatnonzero(np.bincount(sample.mask.ravel()))}


def sample_episode(
    dataset: Sequence[Sample],
    n: int,
    k: int,
    seed: int = DEFAULT_SEED,
    classes: Sequence[int] | None = None,
    queries_per_class: int = 1,
) -> Episode:
    """Draw ``n`` classes, then ``k`` support and ``queries_per_class`` query samples each.

    A sample belongs to class ``c`` when its mask contains ``c``; it can fill
    at most one slot per episode. ``classes`` restricts the candidate pool
    (default: every label present, background included).
    """
    if n < 1 or k < 1 or queries_per_class < 1:
        raise ValueError("n, k and queries_per_class must be positive")
    ordered = sorted(dataset, key=lambda s: s.id)
    members: dict[int, list[int]] = {}
    for idx, s in enumerate(ordered):
        for c in sample_classes(s):
            members.setdefault(c, []).append(idx)
    pool = sorted(members) if classes is None else sorted(set(classes))
    need = k + queries_per_class
    for c in pool:
        if len(members.get(c, [])) < need:
            raise InsufficientSamplesError(
                f"class {c} has {len(members.get(c, []))} samples, needs {need}"
            )
    if len(pool) < n:
        raise InsufficientSamplesError(f"{n}-way episode needs {n} classes, only {len(pool)} available")

    rng = np.random.default_rng(seed)
    chosen = [int(c) for c in rng.choice(np.array(pool), size=n, replace=False)] if n < len(pool) else list(pool)
    used: set[int] = set()
    picks: dict[int, list[int]] = {}
    # scarcest classes pick first so shared samples do not starve them
    for c in sorted(chosen, key=lambda c: (len(members[c]), c)):
        free = [i for i in members[c] if i not in used]
        if len(free) < need:
            raise InsufficientSamplesError(
                f"class {c}: only {len(free)} samples left after other classes, needs {need}"
            )
        sel = [free[int(j)] for j in rng.choice(len(free), size=need, replace=False)]
        used.update(sel)
        picks[c] = sel

    support = [(c, [ordered[i] for i in picks[c][:k]]) for c in chosen]
    query = [(c, ordered[i]) for c in chosen for i in picks[c][k:]]
    return Episode(n, k, chosen, support, query)


def episode_stream(
    dataset: Sequence[Sample],
    n: int,
    k: int,
    num_episodes: int,
    master_seed: int = DEFAULT_SEED,
    **kwargs,
) -> Iterator[Episode]:
    for i in range(num_episodes):
        yield sample_episode(dataset, n, k, derive_seed(master_seed, "episode", i), **kwargs)


def write_episode_manifest(path: str | Path, episodes: Sequence[Episode], seed: int) -> None:
    doc = {"seed": seed, "episodes": [ep.to_manifest() for ep in episodes]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_episode_manifest(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))["episodes"]
