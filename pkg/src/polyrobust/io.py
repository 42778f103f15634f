"""JSON serialization of instances, contrasts, certificates and configs.

Every file is ``{"type": <tag>, "data": <payload>}`` so a loader can check
it received what it expected.
"""

from __future__ import annotations

import json

import numpy as np

from .certification import RiskCertificate
from .errors import DomainError
from .harness import ExperimentConfig
from .model import ContrastMatrix, ProblemInstance

_TYPES = {
    "instance": ProblemInstance,
    "contrast": ContrastMatrix,
    "certificate": RiskCertificate,
    "config": ExperimentConfig,
}


def _tag(obj):
    for tag, cls in _TYPES.items():
        if isinstance(obj, cls):
            return tag
    raise DomainError(f"cannot serialize {type(obj).__name__}")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj):
    return json.dumps({"type": _tag(obj), "data": obj.to_dict()}, default=_default)


def loads(text, expect=None):
    d = json.loads(text)
    if not isinstance(d, dict) or "type" not in d or d["type"] not in _TYPES:
        raise DomainError("not a polyrobust document")
    if expect is not None and d["type"] != expect:
        raise DomainError(f"expected a {expect}, got a {d['type']}")
    return _TYPES[d["type"]].from_dict(d["data"])


def save(obj, path):
    with open(path, "w") as f:
        f.write(dumps(obj) + "\n")


def load(path, expect=None):
    with open(path) as f:
        return loads(f.read(), expect)


def load_vector(path):
    """A plain JSON list, or an object with key ``omega``."""
    with open(path) as f:
        d = json.load(f)
    if isinstance(d, dict):
        d = d["omega"]
    return np.asarray(d, dtype=float)
