"""The two simulation settings used throughout the tests and the CLI.

* ``laplace-k5``: five streams, Lap(0, 1) -> Lap(0.2, 1); bounded LLR, no truncation.
* ``gauss-k5-trunc2.5``: five streams, N(0, 1) -> N(0.5, 1); LLR truncated at 2.5.
"""

from __future__ import annotations

from .errors import PreconditionError
from .model import Gaussian, LaplaceLoc, StreamModel


def laplace_k5():
    return tuple(
        StreamModel(LaplaceLoc(0.0, 1.0), LaplaceLoc(0.2, 1.0), stream_id=f"s{k + 1}") for k in range(5)
    )


def gauss_k5_trunc(trunc_level=2.5):
    return tuple(
        StreamModel(Gaussian(0.0, 1.0), Gaussian(0.5, 1.0), trunc_level=trunc_level, stream_id=f"s{k + 1}")
        for k in range(5)
    )


PRESETS = {
    "laplace-k5": laplace_k5,
    "gauss-k5-trunc2.5": gauss_k5_trunc,
}


def load_preset(name, trunc_level=None):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise PreconditionError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if trunc_level is not None:
        if factory is not gauss_k5_trunc:
            raise PreconditionError(f"preset {name!r} has no truncation level to override")
        return factory(trunc_level)
    return factory()
