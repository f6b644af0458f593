"""Multilayer perceptrons over the autodiff tape.

Networks are plain dataclasses holding one flat float64 parameter vector,
laid out layer by layer as ``[W0.ravel(row-major), b0, W1.ravel(), b1, ...]``
with weight matrices shaped (fan_out, fan_in).  An empty ``hidden_dims`` is a
single affine map.  ``output_scale`` multiplies the final output; it is used
to start the state-transition network small so early rollouts do not blow up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dissipnet import autodiff as ad
from dissipnet.errors import DimensionMismatch

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid")
LEAKY_SLOPE = 0.01


def _layer_dims(in_dim: int, out_dim: int, hidden_dims) -> list[tuple[int, int]]:
    dims = [in_dim] + list(hidden_dims) + [out_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def param_count(in_dim: int, out_dim: int, hidden_dims) -> int:
    return sum(fo * fi + fo for fo, fi in _layer_dims(in_dim, out_dim, hidden_dims))


@dataclass
class Mlp:
    in_dim: int
    out_dim: int
    hidden_dims: list[int] = field(default_factory=list)
    activation: str = "relu"
    output_scale: float = 1.0
    params: np.ndarray | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n = param_count(self.in_dim, self.out_dim, self.hidden_dims)
        if self.params is None:
            self.params = np.zeros(n)
        else:
            self.params = np.asarray(self.params, dtype=float)
            if self.params.shape != (n,):
                raise DimensionMismatch(
                    f"expected {n} parameters, got shape {self.params.shape}")

    @property
    def n_params(self) -> int:
        return self.params.size

    def layer_dims(self) -> list[tuple[int, int]]:
        return _layer_dims(self.in_dim, self.out_dim, self.hidden_dims)


def init_mlp(in_dim, out_dim, hidden_dims=(), activation="relu",
             output_scale=1.0, rng=None, output_bias="zero") -> Mlp:
    """Uniform ``+-sqrt(6/(fan_in+fan_out))`` weights, zero biases.

    ``output_bias="uniform"`` draws the final layer's bias like its weights.
    Zero biases make the whole network vanish at the origin, which is right
    for state-transition and output maps (rest stays at rest, the certificate
    is exact at x = 0) but kills the input coupling when rollouts start at
    x0 = 0 -- the input matrix map needs a live value there.
    """
    rng = np.random.default_rng(rng)
    layers = _layer_dims(in_dim, out_dim, hidden_dims)
    chunks = []
    for i, (fan_out, fan_in) in enumerate(layers):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        if output_bias == "uniform" and i == len(layers) - 1:
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
        else:
            chunks.append(np.zeros(fan_out))
    return Mlp(in_dim, out_dim, list(hidden_dims), activation, output_scale,
               np.concatenate(chunks))


def _activate(z, kind):
    if kind == "relu":
        return ad.relu(z)
    if kind == "leaky_relu":
        return ad.leaky_relu(z, LEAKY_SLOPE)
    return ad.sigmoid(z)


def mlp_forward(net: Mlp, x, tape=None):
    """Evaluate the network; ``x`` is a vector or a (batch, in_dim) array.

    With a tape, the flat parameter vector is registered as a leaf (cached per
    net per tape) and every operation is recorded.
    """
    xv = ad.value_of(x)
    single = xv.ndim == 1
    if (xv.shape[-1] if xv.ndim else 0) != net.in_dim:
        raise DimensionMismatch(
            f"input dim {xv.shape} does not match net.in_dim={net.in_dim}")
    h = ad.reshape(x, (1, net.in_dim)) if single else x
    if tape is not None:
        p = tape.param(id(net), net.params)
    else:
        p = net.params
    offset = 0
    layers = net.layer_dims()
    for i, (fan_out, fan_in) in enumerate(layers):
        w = ad.reshape(p[offset:offset + fan_out * fan_in], (fan_out, fan_in))
        offset += fan_out * fan_in
        b = p[offset:offset + fan_out]
        offset += fan_out
        h = ad.add(ad.matmul(h, ad.swapaxes(w, 0, 1)), b)
        if i < len(layers) - 1:
            h = _activate(h, net.activation)
    if net.output_scale != 1.0:
        h = ad.multiply(h, net.output_scale)
    return ad.reshape(h, (net.out_dim,)) if single else h


def grad_params(tape: ad.Tape, output_cotangent) -> np.ndarray:
    """Reverse-mode gradient of ``<cotangent, last output>`` over all
    parameter leaves registered on the tape, concatenated in registration
    order."""
    return tape.grad_params(output_cotangent)


def finite_diff_check(net: Mlp, x, eps: float = 1e-5, cotangent=None) -> float:
    """Max relative error between reverse-mode and central finite differences.

    The scalar under test is ``<cotangent, net(x)>`` (cotangent defaults to
    all ones).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x = np.asarray(x, dtype=float)
    if cotangent is None:
        cotangent = np.ones(net.out_dim)
    tape = ad.Tape()
    out = mlp_forward(net, x, tape)
    analytic = tape.grads(out, cotangent, [tape.param(id(net), net.params)])[0]
    base = net.params.copy()
    worst = 0.0
    for i in range(base.size):
        net.params = base.copy()
        net.params[i] += eps
        hi = float(cotangent @ mlp_forward(net, x))
        net.params = base.copy()
        net.params[i] -= eps
        lo = float(cotangent @ mlp_forward(net, x))
        numeric = (hi - lo) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    net.params = base
    return worst


def identity_affine(dim: int) -> Mlp:
    """Zero-hidden-layer net computing the identity map."""
    net = Mlp(dim, dim)
    net.params[:dim * dim] = np.eye(dim).ravel()
    return net


def affine_net(weight: np.ndarray, bias: np.ndarray | None = None) -> Mlp:
    """Zero-hidden-layer net computing ``W x + b`` exactly."""
    weight = np.asarray(weight, dtype=float)
    out_dim, in_dim = weight.shape
    net = Mlp(in_dim, out_dim)
    net.params[:out_dim * in_dim] = weight.ravel()
    if bias is not None:
        net.params[out_dim * in_dim:] = np.asarray(bias, dtype=float)
    return net


def net_to_dict(net: Mlp) -> dict:
    return {
        "in_dim": net.in_dim,
        "out_dim": net.out_dim,
        "hidden_dims": list(net.hidden_dims),
        "activation": net.activation,
        "output_scale": net.output_scale,
        "params": [float(v) for v in net.params],
    }


def net_from_dict(d: dict) -> Mlp:
    return Mlp(
        in_dim=int(d["in_dim"]),
        out_dim=int(d["out_dim"]),
        hidden_dims=[int(v) for v in d["hidden_dims"]],
        activation=str(d["activation"]),
        output_scale=float(d["output_scale"]),
        params=np.asarray(d["params"], dtype=float),
    )
