"""Random minority-class upsampling."""

from __future__ import annotations

from collections import Counter
from typing import Hashable, Sequence, TypeVar

import numpy as np

from selfscreen.data import Label
from selfscreen.errors import DegenerateDataError

K = TypeVar("K", bound=Hashable)


def upsample_minority(
    entries: Sequence[tuple[K, Label]],
    seed: int | np.random.Generator,
) -> list[tuple[K, Label]]:
    """Duplicate random minority-class entries until both classes are equally frequent.

    Every original entry is kept; the extra copies are drawn uniformly with
    replacement from the minority class, and the result is shuffled. Both
    steps use ``seed``.
    """
    entries = [(k, Label(lbl)) for k, lbl in entries]
    counts = Counter(lbl for _, lbl in entries)
    if len(counts) < 2:
        raise DegenerateDataError(f"upsampling needs both classes, got {dict(counts)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    minority = min(counts, key=lambda lbl: (counts[lbl], lbl))
    deficit = max(counts.values()) - counts[minority]
    pool = [e for e in entries if e[1] is minority]
    extra = [pool[i] for i in rng.integers(0, len(pool), size=deficit)]
    out = entries + extra
    return [out[i] for i in rng.permutation(len(out))]
