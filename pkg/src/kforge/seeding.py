"""
Seed derivation. All randomness in kforge flows from one master seed.

    derive_seed(master, "augmentation")         section seed
    page_seed(section_seed, image_id)           per-page seed (XOR of a stable id hash)
    numpy.random.default_rng([seed, salt])      per-operation stream inside a page
"""

import hashlib

SEED_MASK = (1 << 63) - 1


def stable_hash(text: str) -> int:
    """63-bit hash of ``text`` that does not depend on PYTHONHASHSEED."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & SEED_MASK


def derive_seed(master: int, *labels: object) -> int:
    """Child seed for a named task, e.g. ``derive_seed(7, "recognizer")``."""
    key = ":".join([str(master), *(str(label) for label in labels)])
    return stable_hash(key)


def page_seed(seed: int, image_id: str) -> int:
    return (seed ^ stable_hash(image_id)) & SEED_MASK
