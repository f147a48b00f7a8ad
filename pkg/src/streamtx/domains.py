"""The two use-case domains and their one-hot conditioning vectors."""

from __future__ import annotations

from enum import Enum

import numpy as np


class Domain(Enum):
    VCMD = "vcmd"
    DICTATION = "dictation"


DOMAINS = (Domain.VCMD, Domain.DICTATION)

_VECTORS = {
    Domain.VCMD: np.array([1.0, 0.0]),
    Domain.DICTATION: np.array([0.0, 1.0]),
}

DOMAIN_VECTOR_DIM = 2


def domain_vector(domain: Domain) -> np.ndarray:
    """One-hot conditioning vector: VCMD -> [1, 0], DICTATION -> [0, 1]."""
    return _VECTORS[domain].copy()


def parse_domain(name: str) -> Domain:
    for d in DOMAINS:
        if d.value == name.lower():
            return d
    raise ValueError(f"unknown domain {name!r}; expected one of "
                     f"{[d.value for d in DOMAINS]}")
