"""Conditional normalizing flows over labels.

The flow is parameterized in the generation direction, ``y = g(z; x)``, where
each layer maps ``r -> s * r + b`` with ``s = exp(clamp(raw, -5, 5))``.
Labels are carried as a list of ``(N, 1)`` columns so that couplings never
need slicing ops on the tape.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore

LOG_SCALE_BOUND = 5.0
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected net; tanh on hidden layers, linear output.

    ``layer_widths`` includes the input width, so ``[30, 64, 64]`` has two
    linear layers.
    """

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"invalid MLP widths {self.layer_widths}")

    @property
    def n_linear(self) -> int:
        return len(self.layer_widths) - 1


@dataclass(frozen=True)
class MlpBank:
    """``count`` independent MLPs of identical shape, stored stacked.

    Weights have shape ``(count, fan_in, fan_out)``; applying the bank to a
    shared input returns ``(count, N, out)``.  Net ``k`` is exactly the MLP
    built from slice ``k`` of every weight and bias.
    """

    count: int
    spec: MlpSpec

    def init(self, store: ParamStore, prefix: str, rng, std: float = 0.01) -> None:
        widths = self.spec.layer_widths
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            store.add(f"{prefix}.{k}.W", rng.normal(0.0, std, size=(self.count, fan_in, fan_out)))
            store.add(f"{prefix}.{k}.b", np.zeros((self.count, 1, fan_out)))

    def apply(self, P, prefix: str, h):
        last = self.spec.n_linear - 1
        for k in range(self.spec.n_linear):
            h = dc.linear(h, P[f"{prefix}.{k}.W"], P[f"{prefix}.{k}.b"],
                          activation=None if k == last else "tanh")
        return h


@dataclass(frozen=True)
class ConditionalCouplingLayer:
    """Affine coupling on a 2-dim label: coordinate ``active`` is transformed,
    conditioned on the other coordinate and on ``x``.

    s = m_s(w_y(r_a) * w_x(x) + w_b(x)),  b = m_b(c_y(r_a) * c_x(x) + c_b(x))

    ``w_y``/``c_y`` live in this layer's bank; ``w_x, w_b, c_x, c_b`` come from
    the model-wide x-bank since they never see the label.
    """

    x_dim: int
    active: int
    hidden: int = 64

    kind = "coupling"
    x_nets = ("w_x", "w_b", "c_x", "c_b")

    @property
    def passive(self) -> int:
        return 1 - self.active

    def x_spec(self) -> MlpSpec:
        return MlpSpec((self.x_dim, self.hidden, self.hidden))

    def y_bank(self) -> MlpBank:
        return MlpBank(2, MlpSpec((1, self.hidden, self.hidden)))

    def init(self, store: ParamStore, prefix: str, rng) -> None:
        self.y_bank().init(store, f"{prefix}.wc_y", rng)
        for head in ("m_s", "m_b"):
            store.add(f"{prefix}.{head}.W", rng.normal(0.0, 0.01, size=(self.hidden, 1)))
            store.add(f"{prefix}.{head}.b", np.zeros((1, 1)))

    def scale_shift(self, P, prefix: str, xfeat, cols):
        """``(log_scale, shift)`` for the active coordinate, each (N, 1).

        ``xfeat`` holds this layer's ``w_x, w_b, c_x, c_b`` outputs.
        """
        w_y, c_y = dc.unstack(self.y_bank().apply(P, f"{prefix}.wc_y", cols[self.passive]))
        w_x, w_b, c_x, c_b = xfeat
        hs = dc.add(dc.mul(w_y, w_x), w_b)
        hb = dc.add(dc.mul(c_y, c_x), c_b)
        raw_s = dc.linear(hs, P[f"{prefix}.m_s.W"], P[f"{prefix}.m_s.b"])
        shift = dc.linear(hb, P[f"{prefix}.m_b.W"], P[f"{prefix}.m_b.b"])
        log_s = dc.clamp(raw_s, -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        return log_s, shift

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class ConditionalAffineLayer:
    """Scalar label transform ``y = s(x) * z + b(x)``; ``s``/``b`` come from the x-bank."""

    x_dim: int
    hidden: int = 64
    active: int = 0

    kind = "affine"
    x_nets = ("s_net", "b_net")

    def x_spec(self) -> MlpSpec:
        return MlpSpec((self.x_dim, self.hidden, self.hidden, 1))

    def init(self, store: ParamStore, prefix: str, rng) -> None:
        pass

    def scale_shift(self, P, prefix: str, xfeat, cols):
        raw_s, shift = xfeat
        return dc.clamp(raw_s, -LOG_SCALE_BOUND, LOG_SCALE_BOUND), shift

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


_LAYER_KINDS = {"coupling": ConditionalCouplingLayer, "affine": ConditionalAffineLayer}


class FlowModel:
    """Stack of conditional flow layers plus their parameters."""

    def __init__(self, layers, label_dim: int, x_dim: int, params: ParamStore | None = None,
                 seed: int | None = None, meta: dict | None = None):
        self.layers = list(layers)
        self.label_dim = label_dim
        self.x_dim = x_dim
        self.seed = seed
        self.meta = dict(meta or {})
        for layer in self.layers:
            if layer.x_dim != x_dim or layer.active >= label_dim:
                raise ValueError(f"layer {layer} inconsistent with x_dim={x_dim}, label_dim={label_dim}")
            if layer.x_spec() != self.layers[0].x_spec() or layer.x_nets != self.layers[0].x_nets:
                raise ValueError("all layers must share one x-conditioner shape")
        if params is None:
            params = ParamStore()
            rng = np.random.default_rng(seed)
            self.x_bank.init(params, "x_bank", rng)
            for i, layer in enumerate(self.layers):
                layer.init(params, f"layer{i}", rng)
        self.params = params

    @property
    def x_bank(self) -> MlpBank:
        """Every x-only conditioner of every layer; net ``k`` of layer ``i`` is
        bank slot ``i * len(layer.x_nets) + k``."""
        first = self.layers[0]
        return MlpBank(len(self.layers) * len(first.x_nets), first.x_spec())

    def x_features(self, P, x) -> list[list]:
        """Per-layer outputs of the x-only conditioners."""
        per = len(self.layers[0].x_nets)
        out = dc.unstack(self.x_bank.apply(P, "x_bank", x))
        return [out[i * per:(i + 1) * per] for i in range(len(self.layers))]

    def __repr__(self):
        return (f"FlowModel({len(self.layers)} layers, label_dim={self.label_dim}, "
                f"x_dim={self.x_dim}, params={self.params.total_dim})")


def coupling_flow(x_dim: int, n_steps: int = 8, hidden: int = 64, seed: int | None = 0) -> FlowModel:
    """Classification flow: each step transforms coordinate 0 then coordinate 1."""
    layers = [ConditionalCouplingLayer(x_dim, active, hidden)
              for _ in range(n_steps) for active in (0, 1)]
    return FlowModel(layers, label_dim=2, x_dim=x_dim, seed=seed)


def affine_flow(x_dim: int, n_layers: int = 8, hidden: int = 64, seed: int | None = 0) -> FlowModel:
    """Regression flow of scalar conditional affine layers."""
    layers = [ConditionalAffineLayer(x_dim, hidden) for _ in range(n_layers)]
    return FlowModel(layers, label_dim=1, x_dim=x_dim, seed=seed)


def _columns(a: np.ndarray, dim: int) -> list[np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :] if dim > 1 or a.size == 1 else a[:, None]
    if a.shape[1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got shape {a.shape}")
    return [a[:, [j]] for j in range(dim)]


def _as_rows(x: np.ndarray, x_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != x_dim:
        raise ValueError(f"expected {x_dim} features, got shape {x.shape}")
    return x


def generate_columns(model: FlowModel, P, x, cols):
    """Push latent columns through the stack; works on arrays or tape nodes.

    Returns ``(label_columns, logdet)`` with logdet of shape (N, 1).
    """
    cols = list(cols)
    logdet = 0.0
    xfeat = model.x_features(P, x)
    for i, layer in enumerate(model.layers):
        log_s, shift = layer.scale_shift(P, f"layer{i}", xfeat[i], cols)
        a = layer.active
        cols[a] = dc.add(dc.mul(dc.exp(log_s), cols[a]), shift)
        logdet = dc.add(logdet, log_s)
    return cols, logdet


def generate(model: FlowModel, x, z):
    """``y = g(z; x)`` and ``log|det dy/dz|`` per row.

    Returns ``(y, logdet)`` with shapes (N, label_dim) and (N,).
    """
    x = _as_rows(x, model.x_dim)
    zc = _columns(z, model.label_dim)
    if zc[0].shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows but {zc[0].shape[0]} latent rows")
    P = dict(model.params.items())
    cols, logdet = generate_columns(model, P, x, zc)
    return np.hstack(cols), np.broadcast_to(logdet, (x.shape[0], 1))[:, 0].copy()


def invert(model: FlowModel, x, y, return_logdet: bool = False):
    """``z = g^{-1}(y; x)``, optionally with the generation-direction logdet."""
    x = _as_rows(x, model.x_dim)
    cols = _columns(y, model.label_dim)
    if not all(np.isfinite(c).all() for c in cols):
        raise ValueError("labels must be finite")
    P = dict(model.params.items())
    logdet = np.zeros((x.shape[0], 1))
    xfeat = model.x_features(P, x)
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        log_s, shift = layer.scale_shift(P, f"layer{i}", xfeat[i], cols)
        a = layer.active
        cols[a] = (cols[a] - shift) * np.exp(-log_s)
        logdet = logdet + log_s
    z = np.hstack(cols)
    if return_logdet:
        return z, logdet[:, 0]
    return z


def log_normal(z: np.ndarray) -> np.ndarray:
    """Row-wise standard normal log density."""
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * (z * z).sum(axis=1) - 0.5 * z.shape[1] * _LOG_2PI


def log_prob(model: FlowModel, x, y) -> np.ndarray:
    """``log p(y | x)`` per row via the change of variables."""
    z, logdet = invert(model, x, y, return_logdet=True)
    return log_normal(z) - logdet


def sample_labels(model: FlowModel, x, n_samples: int = 10, rng=None) -> np.ndarray:
    """Average of ``n_samples`` generated labels per row of ``x``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng)
    x = _as_rows(x, model.x_dim)
    n = x.shape[0]
    z = rng.standard_normal((n_samples, n, model.label_dim))
    y, _ = generate(model, np.tile(x, (n_samples, 1)), z.reshape(-1, model.label_dim))
    return y.reshape(n_samples, n, model.label_dim).mean(axis=0)


def save_checkpoint(model: FlowModel, path) -> None:
    meta = {
        "label_dim": model.label_dim,
        "x_dim": model.x_dim,
        "seed": model.seed,
        "layers": [layer.to_dict() for layer in model.layers],
        "param_names": model.params.names(),
        "extra": model.meta,
    }
    arrays = {f"p:{name}": value for name, value in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> FlowModel:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = ParamStore()
        for name in meta["param_names"]:
            params.add(name, data[f"p:{name}"])
    layers = []
    for spec in meta["layers"]:
        spec = dict(spec)
        cls = _LAYER_KINDS[spec.pop("kind")]
        layers.append(cls(**spec))
    return FlowModel(layers, meta["label_dim"], meta["x_dim"], params=params,
                     seed=meta["seed"], meta=meta["extra"])
