import random

import numpy as np
import pytest

from selfscreen.data import Dataset, Label, Phq4Response, Sample

NEG_ITEMS = [(0, 0, 0, 0), (1, 0, 1, 0), (2, 1, 1, 1), (1, 1, 1, 1)]
POS_ITEMS = [(2, 2, 1, 1), (3, 3, 3, 3), (2, 2, 2, 1), (3, 1, 2, 1)]

SAD = "she looks sad tired and hopeless with downturned mouth"
HAPPY = "she looks happy relaxed and calm with a broad smile"


def make_sample(sid, subj, positive, description=None, image_path=None, variant=0):
    items = (POS_ITEMS if positive else NEG_ITEMS)[variant % 4]
    text = description if description is not None or image_path else (SAD if positive else HAPPY)
    return Sample(sid, subj, Phq4Response(items), text, image_path)


def cohort_dataset(seed=0, sizes=None, n_pos=41):
    """Synthetic cohort shaped like the collected one (147 samples, 108 subjects, 41 positive)."""
    rng = random.Random(seed)
    if sizes is None:
        # 108 subjects: one with nine samples, the rest mostly singletons
        sizes = [9, 5, 4, 3, 3] + [2] * 20 + [1] * 83
    n = sum(sizes)
    positives = set(rng.sample(range(n), n_pos))
    samples, k = [], 0
    for j, size in enumerate(sizes):
        for _ in range(size):
            pos = k in positives
            words = (SAD if pos else HAPPY).split()
            rng.shuffle(words)
            samples.append(make_sample(f"s{k:03d}", f"p{j:03d}", pos, " ".join(words[:6]) + f" w{k}", variant=k))
            k += 1
    return Dataset(tuple(samples), source_vlm="synthetic")


@pytest.fixture
def small_dataset():
    return Dataset((
        make_sample("a1", "A", False),
        make_sample("a2", "A", True),
        make_sample("b1", "B", True, variant=1),
        make_sample("c1", "C", False, variant=2),
        make_sample("c2", "C", False, variant=3),
        make_sample("d1", "D", True, variant=2),
    ))


def leakage_embeddings(dataset, dim=384):
    """Embeddings that are a deterministic function of the label: every fold is separable.

    Positives get +u and negatives -u for one fixed dense unit vector u, so every
    coordinate carries the label and default-rate Adam separates them quickly.
    """
    u = np.random.default_rng(1234).standard_normal(dim)
    u /= np.linalg.norm(u)
    return {s.sample_id: (u if s.label is Label.POSITIVE else -u).copy() for s in dataset}


@pytest.fixture
def cohort():
    return cohort_dataset()


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
