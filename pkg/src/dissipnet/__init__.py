"""Learning continuous-time input-output dynamics with hard dissipativity guarantees.

The package trains neural state-space models ``dx/dt = f(x) + g(x) u``,
``y = h(x) (+ j u)`` whose dissipativity (and its specializations: internal
stability, input-output stability, energy conservation, passivity) holds by
construction: the raw network dynamics are passed through an idempotent,
differentiable projection onto the subspace where the algebraic dissipation
certificate is satisfied for a chosen storage function and supply rate.
"""

from dissipnet.errors import (
    ConfigError,
    DimensionMismatch,
    FormatError,
    MissingEta,
    MissingStates,
    NonFiniteState,
    NotPSD,
    NotSymmetric,
    RankDeficient,
    TapeMismatch,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionMismatch",
    "FormatError",
    "MissingEta",
    "MissingStates",
    "NonFiniteState",
    "NotPSD",
    "NotSymmetric",
    "RankDeficient",
    "TapeMismatch",
    "__version__",
]
