"""Level plan, parent inheritance and random unlabeled subsets.

All randomness is derived from an integer base seed through ``derive_seed`` so
that results do not depend on the order in which sub-models are processed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import InvalidArgumentError


@dataclass(frozen=True)
class LevelSpec:
    level_index: int
    submodel_count: int
    subset_size: int


@dataclass(frozen=True)
class LevelPlan:
    levels: tuple
    n0: int

    @property
    def submodel_counts(self):
        return [lv.submodel_count for lv in self.levels]

    @property
    def subset_sizes(self):
        return [lv.subset_size for lv in self.levels]

    def to_dict(self):
        return {"n0": self.n0, "levels": [asdict(lv) for lv in self.levels]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LevelSpec(**lv) for lv in d["levels"]), d["n0"])


@dataclass(frozen=True)
class SubsetAssignment:
    level_index: int
    subsets: tuple  # one tuple of sample ids per sub-model


def derive_seed(base_seed, *keys):
    """Stable 32-bit seed from a base seed and integer keys (level, sub-model, ...)."""
    return int(np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, *map(int, keys)]).generate_state(1)[0])


def submodel_count(s1, n):
    return max(s1 // 2 ** (n - 1), 1)


def subset_size(n0, s_n):
    # floor(n0 / s_n + 0.5) in exact integer arithmetic
    return (2 * n0 + s_n) // (2 * s_n)


def plan_levels(s1, n0):
    if s1 < 1 or s1 & (s1 - 1):
        raise InvalidArgumentError(f"S_1 must be a power of two >= 1, got {s1}")
    if n0 < 0:
        raise InvalidArgumentError(f"N_0 must be >= 0, got {n0}")
    levels = []
    n = 1
    while True:
        s_n = submodel_count(s1, n)
        levels.append(LevelSpec(n, s_n, subset_size(n0, s_n)))
        if s_n == 1:
            break
        n += 1
    return LevelPlan(tuple(levels), n0)


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def select_parents(prev_count, next_count, rng):
    """``next_count`` distinct parent indices drawn uniformly from ``range(prev_count)``."""
    if next_count > prev_count or next_count < 1:
        raise InvalidArgumentError(f"cannot select {next_count} parents from {prev_count}")
    picks = _rng(rng).choice(prev_count, size=next_count, replace=False)
    return [int(i) for i in picks]


def assign_subsets(unlabeled_ids, subset_n, submodels, seed, level_index=0):
    """Independent without-replacement subsets per sub-model; subsets may overlap.

    Sub-model ``i`` draws from ``derive_seed(seed, level_index, i)``.
    """
    pool = sorted(unlabeled_ids)
    if len(set(pool)) != len(pool):
        raise InvalidArgumentError("unlabeled ids must be unique")
    if subset_n > len(pool):
        raise InvalidArgumentError(f"subset size {subset_n} exceeds pool of {len(pool)}")
    subsets = []
    for i in range(submodels):
        rng = np.random.default_rng(derive_seed(seed, level_index, i))
        idx = rng.choice(len(pool), size=subset_n, replace=False)
        subsets.append(tuple(pool[j] for j in idx))
    return SubsetAssignment(level_index, tuple(subsets))


def write_plan(path, plan, assignments=(), parents=None):
    doc = plan.to_dict()
    doc["assignments"] = {str(a.level_index): [list(s) for s in a.subsets] for a in assignments}
    doc["parents"] = {str(k): v for k, v in (parents or {}).items()}
    Path(path).write_text(json.dumps(doc, indent=1))
