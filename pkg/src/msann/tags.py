"""Noisy-tag branch: vocabulary, binary tag vectors and the textual MLP."""
from __future__ import annotations

import warnings
from collections import Counter

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, VocabularyError
from .nn import Linear, Module

FULL_VOCAB_SIZE = 1000
FULL_HIDDEN = 2048


class TagVocabulary:
    """Ordered, duplicate-free tag list; index is the position in the list."""

    def __init__(self, tags):
        tags = list(tags)
        if len(set(tags)) != len(tags):
            raise VocabularyError("vocabulary tags must be unique")
        for t in tags:
            if not t or "\n" in t or "\t" in t:
                raise VocabularyError(f"invalid tag {t!r}")
        self.tags = tags
        self.index = {t: i for i, t in enumerate(tags)}

    def __len__(self):
        return len(self.tags)

    def __eq__(self, other):
        return isinstance(other, TagVocabulary) and self.tags == other.tags

    def __repr__(self):
        return f"TagVocabulary(size={len(self)})"

    @property
    def size(self):
        return len(self.tags)

    def vector(self, tags):
        """Binary vector for one image; unknown tags are dropped."""
        t = np.zeros(len(self.tags))
        for tag in tags:
            i = self.index.get(tag)
            if i is not None:
                t[i] = 1.0
        return t

    def vectors(self, tag_lists):
        return np.stack([self.vector(tags) for tags in tag_lists]) if tag_lists else np.zeros((0, len(self)))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(t + "\n" for t in self.tags)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))
        except FileNotFoundError as exc:
            raise DataError(f"vocabulary file missing: {path}") from exc


def build_vocabulary(tag_lists, size):
    """Keep the ``size`` most frequent tags; ties go to the lexicographically smaller tag."""
    if size < 1:
        raise ContractError("vocabulary size must be >= 1")
    counts = Counter(tag for tags in tag_lists for tag in tags)
    if not counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < size:
        warnings.warn(f"only {len(ranked)} distinct tags for a vocabulary of {size}", stacklevel=2)
    return TagVocabulary(tag for tag, _ in ranked[:size])


class TextualMLP(Module):
    """Two Linear->ReLU layers, T -> hidden -> feature_dim.

    The second layer's width is the visual feature width so the two
    modalities enter the joint feature with equal size.
    """

    def __init__(self, vocab_size, hidden, feature_dim, rng):
        self.hidden1 = Linear(vocab_size, hidden, rng)
        self.hidden2 = Linear(hidden, feature_dim, rng)

    @property
    def vocab_size(self):
        return self.hidden1.in_features

    @property
    def feature_dim(self):
        return self.hidden2.out_features

    def forward(self, t):
        return T.relu(self.hidden2(T.relu(self.hidden1(t))))


def encode_tags(mlp, t):
    t = t if isinstance(t, T.Tensor) else T.Tensor(t)
    if t.ndim != 2 or t.shape[1] != mlp.vocab_size:
        raise VocabularyError(f"tag batch {t.shape} does not match vocabulary size {mlp.vocab_size}")
    return mlp(t)


def joint_feature(f_v, f_t):
    """``[f_v, f_t]`` with the visual half first."""
    if f_v.shape != f_t.shape:
        raise DimensionError(f"visual feature {f_v.shape} and textual feature {f_t.shape} must match")
    return T.concat(f_v, f_t)
