import numpy as np


def derive_seed(seed, *labels):
    """Derive a 64-bit child seed from ``seed`` and integer ``labels``.

    Children depend only on their labels, never on how many siblings were
    drawn before them, which keeps parallel work schedule-independent.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(l) for l in labels)]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def child_rng(seed, *labels):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, labels)]))
