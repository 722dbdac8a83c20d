"""Small shared helpers: canonical config hashing and float formatting."""

import hashlib
import json

import numpy as np


def canonical_json(obj):
    """Deterministic JSON text: sorted keys, arrays listed, floats via repr."""
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not serializable: {type(o)!r}")

    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      default=default)


def config_hash(obj):
    """Short content hash of a configuration mapping."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def fmt(x):
    """Render a float with 12 significant digits (stable across runs)."""
    return format(float(x), ".12g")
