"""Shared fixtures-in-plain-python: toy datasets and tree hashing."""

import hashlib
from pathlib import Path

import numpy as np

from pixelcues.attention import FeatureVolume, ImageTags


def separable_head_dataset(num_labels: int = 4):
    """One image per tag subset, features = constant per-class indicator planes.

    Linearly separable: weight k on channel k alone predicts tag k.
    """
    object_ids = range(1, num_labels)
    subsets = []
    for bits in range(2 ** (num_labels - 1)):
        subsets.append({c for i, c in enumerate(object_ids) if bits >> i & 1})
    dataset = []
    for present in subsets:
        planes = np.zeros((num_labels - 1, 2, 2), dtype=np.float32)
        for class_id in present:
            planes[class_id - 1] = 1.0
        dataset.append((FeatureVolume(planes), ImageTags(frozenset(present), num_labels)))
    return dataset


def tag_accuracy(dataset, bank) -> float:
    """Fraction of (image, class) pairs where prob > 0.5 matches the tag."""
    from pixelcues.attention import head_forward

    correct = 0
    total = 0
    for feat, tags in dataset:
        _, scores = head_forward(feat, bank)
        for class_id, prob in zip(scores.class_ids, scores.prob):
            predicted = prob > 0.5
            correct += int(predicted == (class_id in tags.present))
            total += 1
    return correct / total


def tree_digest(root) -> dict:
    """Relative path -> sha256 for every file under root."""
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
