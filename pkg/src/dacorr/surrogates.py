"""Convolutional correction networks and the hybrid surrogate models.

A correction network is a stack of periodic 1-d convolutional layers over
the 36 slow variables, ending in a 1x1 projection layer with no activation.
Its flat parameter vector is the control vector for both offline training
and online joint estimation.  Hybrids come in two flavours:

  * resolvent correction (RC): the network output is added to the
    full-window resolvent of the physical model, with linear-in-time
    scaling for sub-window forecasts;
  * tendency correction (TC): the network output is added to the physical
    tendencies and integrated with the physical model's own RK4 scheme
    and step.

With all parameters zero both hybrids reduce to the physical model
bit-for-bit (the projection layer is initialised to exactly zero, so this
also holds at initialisation).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    filters: int
    window: int
    activation: str = "tanh"  # "tanh" or "none"

    def __post_init__(self):
        if self.window % 2 == 0:
            raise ValueError("convolution window must be odd for symmetric "
                             "periodic padding")
        if self.activation not in ("tanh", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self):
        return self.window * self.in_channels * self.filters + self.filters


@dataclass(frozen=True)
class CnnSpec:
    """Ordered layers, always ending with the 1x1 linear projection."""

    name: str
    layers: tuple


def _build(name, n_intermediate, filters, window, activation):
    layers = []
    in_ch = 1
    for _ in range(n_intermediate):
        layers.append(ConvLayerSpec(in_ch, filters, window, activation))
        in_ch = filters
    layers.append(ConvLayerSpec(in_ch, 1, 1, "none"))
    return CnnSpec(name, tuple(layers))


CNN_A = _build("cnn-a", 4, 16, 5, "tanh")
CNN_B = _build("cnn-b", 1, 16, 5, "none")
CNN_C = _build("cnn-c", 1, 16, 5, "tanh")

_PRESETS = {s.name: s for s in (CNN_A, CNN_B, CNN_C)}


def preset(name):
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}; "
                         f"choose from {sorted(_PRESETS)}") from None


def param_count(spec):
    return sum(layer.n_params for layer in spec.layers)


def param_layout(spec):
    """Per-layer (weight slice, weight shape, bias slice) into the flat vector."""
    layout = []
    offset = 0
    for layer in spec.layers:
        w_shape = (layer.filters, layer.in_channels, layer.window)
        w_size = layer.filters * layer.in_channels * layer.window
        layout.append((slice(offset, offset + w_size), w_shape,
                       slice(offset + w_size, offset + w_size + layer.filters)))
        offset += w_size + layer.filters
    return layout


def unflatten(spec, params):
    """Flat vector (array or node) -> list of (weights, biases) per layer."""
    layout = param_layout(spec)
    if isinstance(params, ad.Node):
        if params.value.shape != (param_count(spec),):
            raise ValueError("parameter vector length does not match the spec")
        return [(ad.reshape(ad.take_block(params, ws.start, ws.stop), shape),
                 ad.take_block(params, bs.start, bs.stop))
                for ws, shape, bs in layout]
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(spec),):
        raise ValueError("parameter vector length does not match the spec")
    return [(params[ws].reshape(shape), params[bs])
            for ws, shape, bs in layout]


def flatten(spec, layers):
    """Inverse of unflatten for plain arrays; round trip is lossless."""
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    flat = np.concatenate(parts)
    if flat.shape != (param_count(spec),):
        raise ValueError("layer shapes do not match the spec")
    return flat


def zero_params(spec):
    return np.zeros(param_count(spec))


GLOROT_GAIN = 6.0


def init_params(spec, seed):
    """Random intermediate weights, zero biases; projection layer all zero,
    so the initial correction output is exactly zero for any input."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer in spec.layers[:-1]:
        fan_in = layer.in_channels * layer.window
        fan_out = layer.filters * layer.window
        bound = np.sqrt(GLOROT_GAIN / (fan_in + fan_out))
        w = rng.uniform(-bound, bound,
                        (layer.filters, layer.in_channels, layer.window))
        layers.append((w, np.zeros(layer.filters)))
    last = spec.layers[-1]
    layers.append((np.zeros((last.filters, last.in_channels, last.window)),
                   np.zeros(last.filters)))
    return flatten(spec, layers)


def cnn_forward(spec, params, x):
    """Network output for slow-state input, shape-preserving (..., 36).

    ``params`` may be a flat array, a flat node, or a pre-unflattened
    layer list (so windows that evaluate the network many times on one
    tape can slice the parameter vector once).
    """
    layers = params if isinstance(params, list) else unflatten(spec, params)
    node_input = isinstance(x, ad.Node)
    shape = x.value.shape if node_input else np.shape(x)
    channel_shape = shape[:-1] + (1, shape[-1])
    h = ad.reshape(x, channel_shape) if node_input else np.reshape(x, channel_shape)
    for layer_spec, (w, b) in zip(spec.layers, layers):
        h = ad.conv1d_periodic(h, w, b)
        if layer_spec.activation == "tanh":
            h = ad.tanh(h)
    return ad.reshape(h, shape) if isinstance(h, ad.Node) else np.reshape(h, shape)


# ---------------------------------------------------------------------------
# hybrid surrogates

class TcSurrogate:
    """Physical model with the network output added to the tendencies."""

    mode = "tc"

    def __init__(self, spec, physical=dyn.L96):
        self.spec = spec
        self.physical = physical
        self.name = f"tc-{spec.name}"

    def tendency(self, params, x):
        return dyn.l96_tendency(x, self.physical.forcing) \
            + cnn_forward(self.spec, params, x)

    def resolvent(self, params, x, n_obs):
        """Corrected resolvent over n_obs observation intervals, integrated
        with the physical model's scheme and step."""
        layers = params if isinstance(params, list) \
            else unflatten(self.spec, params)
        f = lambda s: self.tendency(layers, s)
        steps = n_obs * self.physical.steps_per_obs
        return dyn.resolvent(f, x, self.physical.dt, steps)

    def window_states(self, params, x0, n_obs):
        layers = params if isinstance(params, list) \
            else unflatten(self.spec, params)
        states = [x0]
        for _ in range(n_obs - 1):
            states.append(self.resolvent(layers, states[-1], 1))
        return states


class RcSurrogate:
    """Physical model with the network output added to the resolvent.

    The network corrects the ``window_steps``-interval resolvent it was
    trained for; sub-window forecasts scale the correction linearly in
    time (l/window_steps), and forecasts beyond the trained horizon are
    refused.
    """

    mode = "rc"

    def __init__(self, spec, window_steps, physical=dyn.L96):
        if window_steps < 1:
            raise ValueError("window_steps must be at least 1")
        self.spec = spec
        self.window_steps = window_steps
        self.physical = physical
        self.name = f"rc-{spec.name}"

    def correction(self, params, x):
        return cnn_forward(self.spec, params, x)

    def resolvent(self, params, x, n_obs):
        if n_obs > self.window_steps:
            raise ValueError(
                f"resolvent correction is undefined beyond its training "
                f"horizon ({n_obs} > {self.window_steps} observation steps)")
        if n_obs == 0:
            return x
        phys = dyn.l96_resolvent(x, n_obs * self.physical.steps_per_obs,
                                 self.physical.forcing, self.physical.dt)
        scale = n_obs / self.window_steps
        return ad.axpy(scale, self.correction(params, x), phys)

    def window_states(self, params, x0, n_obs):
        if n_obs - 1 > self.window_steps:
            raise ValueError("window longer than the trained correction horizon")
        states = [x0]
        if n_obs == 1:
            return states
        corr = self.correction(params, x0)
        phys = x0
        for l in range(1, n_obs):
            phys = dyn.l96_resolvent(phys, self.physical.steps_per_obs,
                                     self.physical.forcing, self.physical.dt)
            states.append(ad.axpy(l / self.window_steps, corr, phys))
        return states


class FixedSurrogate:
    """A surrogate with its parameters bound: the trained-model object.

    Implements the same step protocol as the dynamics model wrappers so a
    trained surrogate drops into cycled assimilation unchanged.
    """

    def __init__(self, surrogate, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (param_count(surrogate.spec),):
            raise ValueError("parameter vector length does not match the spec")
        self.surrogate = surrogate
        self.params = params
        self.name = surrogate.name
        self.control_size = surrogate.physical.n_x

    @property
    def mode(self):
        return self.surrogate.mode

    def observed(self, x):
        return x

    def resolvent(self, x, n_obs):
        return self.surrogate.resolvent(self.params, x, n_obs)

    def step(self, x):
        if self.surrogate.mode == "rc":
            raise ValueError("an RC surrogate has no incremental step; "
                             "use window_states/forecast over full windows")
        return self.surrogate.resolvent(self.params, x, 1)

    def window_states(self, x0, n_obs):
        return self.surrogate.window_states(self.params, x0, n_obs)

    def forecast(self, x, n_obs):
        return self.surrogate.resolvent(self.params, np.asarray(x, dtype=float),
                                        n_obs)

    def predict(self, x, n_obs=None):
        """Forecast ``n_obs`` observation intervals ahead (default: the
        trained horizon for RC, one interval for TC)."""
        if n_obs is None:
            n_obs = self.surrogate.window_steps if self.mode == "rc" else 1
        return self.forecast(x, n_obs)
