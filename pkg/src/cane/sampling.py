"""Noise-class sampling from the complement of a candidate set.

Draws are taken with replacement from the class unigram renormalized
over the complement of the candidate set.  An alias table over the full
vocabulary gives O(1) draws; hits inside the candidate set are rejected
and redrawn, which is cheap because candidate sets are tiny.  Each draw
carries its renormalized probability, computed by exactly the same code
path as :func:`noise_prob` so the two agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ClassUnigram

__all__ = ["NoiseDraw", "NoiseSampler", "noise_prob", "sample_noises"]

# After this many rejected draws the sampler falls back to enumerating
# the complement explicitly; correctness is unaffected, only speed.
_MAX_REJECTS = 1000


@dataclass(frozen=True)
class NoiseDraw:
    """A sampled noise class and its renormalized probability."""

    class_id: int
    prob: float


class _AliasTable:
    """Walker/Vose alias table for O(1) categorical draws."""

    def __init__(self, weights: np.ndarray):
        n = weights.shape[0]
        scaled = weights * (n / weights.sum())
        self.accept = np.ones(n)
        self.alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            self.accept[s] = scaled[s]
            self.alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)

    def draw(self, rng: np.random.Generator) -> int:
        i = int(rng.integers(self.accept.shape[0]))
        if rng.random() < self.accept[i]:
            return i
        return int(self.alias[i])


class NoiseSampler:
    """Sampler over the complement of a per-call candidate set."""

    def __init__(self, unigram: ClassUnigram):
        self.unigram = unigram
        self.weights = unigram.weights
        # fsum makes the stored total as close to the true sum as the
        # complement sums it renormalizes against.
        self._total = math.fsum(self.weights.tolist())
        self._alias = _AliasTable(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def _complement_mass(self, candidates) -> float:
        mass = self._total
        for c in sorted(candidates):
            mass -= self.weights[c]
        return mass

    def noise_prob(self, candidates, j: int) -> float:
        """Renormalized probability of class ``j`` outside ``candidates``."""
        candidates = set(candidates)
        if j in candidates:
            raise ValueError(f"class {j} is in the candidate set")
        if len(candidates) >= self.num_classes:
            raise ValueError("candidate set leaves no classes to sample")
        return float(self.weights[j] / self._complement_mass(candidates))

    def sample(self, candidates, count: int, rng: np.random.Generator) -> list[NoiseDraw]:
        """``count`` i.i.d. draws (with replacement) outside ``candidates``."""
        if count < 1:
            raise ValueError("need at least one draw")
        candidates = set(candidates)
        if len(candidates) >= self.num_classes:
            raise ValueError("candidate set leaves no classes to sample")
        denom = self._complement_mass(candidates)
        draws: list[NoiseDraw] = []
        for _ in range(count):
            j = -1
            for _ in range(_MAX_REJECTS):
                cand = self._alias.draw(rng)
                if cand not in candidates:
                    j = cand
                    break
            if j < 0:
                complement = np.asarray(
                    [c for c in range(self.num_classes) if c not in candidates]
                )
                w = self.weights[complement]
                j = int(rng.choice(complement, p=w / w.sum()))
            draws.append(NoiseDraw(j, float(self.weights[j] / denom)))
        return draws


def noise_prob(unigram: ClassUnigram, candidates, j: int) -> float:
    return NoiseSampler(unigram).noise_prob(candidates, j)


def sample_noises(
    unigram: ClassUnigram, candidates, count: int, rng: np.random.Generator
) -> list[NoiseDraw]:
    return NoiseSampler(unigram).sample(candidates, count, rng)
