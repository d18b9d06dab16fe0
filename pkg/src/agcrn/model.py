"""Graph-convolutional GRU forecasters.

Variants:

``agcrn``       node-adaptive convs over a learned graph, one embedding shared
                by the graph and every conv layer
``agcrn_i``     as ``agcrn`` with an independent embedding per layer and one
                for the graph
``napl_gcgru``  node-adaptive convs over a pre-defined graph
``dagg_gcgru``  shared-weight convs over a learned graph
``gcgru``       shared-weight convs over a pre-defined graph
``gru_ed``      per-node GRU encoder-decoder with weights shared across nodes
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import graph as G
from .layers import NAPLGraphConv, SharedGraphConv, glorot_bound, napl_gcn, propagate, shared_gcn
from .numerics import (
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    make_rng,
    matmul,
    no_grad,
    reshape,
    sigmoid,
    tanh,
    transpose,
)

VARIANTS = ("agcrn", "agcrn_i", "gcgru", "napl_gcgru", "dagg_gcgru", "gru_ed")
_NAPL = {"agcrn", "agcrn_i", "napl_gcgru"}
_PREDEFINED = {"gcgru", "napl_gcgru"}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_nodes: int
    input_dim: int = 1
    hidden: int = 64
    layers: int = 2
    embed_dim: int = 10
    horizon: int = 12
    lookback: int = 12
    variant: str = "agcrn"
    dagg_variant: str = "dagg_1"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dagg_variant not in G.DAGG_VARIANTS:
            raise ConfigError(f"unknown dagg_variant {self.dagg_variant!r}")
        for name in ("n_nodes", "input_dim", "hidden", "layers", "embed_dim", "horizon", "lookback"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_nodes < 2 and self.variant != "gru_ed":
            raise ConfigError("graph variants need at least 2 nodes")

    @property
    def support_variant(self) -> str | None:
        if self.variant == "gru_ed":
            return None
        return "predefined" if self.variant in _PREDEFINED else self.dagg_variant

    @property
    def n_supports(self) -> int:
        sv = self.support_variant
        return 0 if sv is None else G.n_supports(sv)

    @property
    def needs_graph(self) -> bool:
        return self.variant in _PREDEFINED

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CellParams:
    """Gate weights and biases for one recurrent layer.

    Node-adaptive layers hold pools (``d x K x Cin x H`` and ``d x H``);
    shared layers hold ``K x Cin x H`` and ``H``.
    """

    wz: Tensor
    wr: Tensor
    wh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor


def _gru_update(x_t, h_prev, gate_zr: Callable, gate_h: Callable) -> Tensor:
    xh = concat([x_t, h_prev], axis=-1)
    z_pre, r_pre = gate_zr(xh)
    z, r = sigmoid(z_pre), sigmoid(r_pre)
    h_hat = tanh(gate_h(concat([x_t, r * h_prev], axis=-1)))
    return z * h_prev + (1.0 - z) * h_hat


def cell_step(x_t, h_prev, supports, emb, params: CellParams) -> Tensor:
    """One graph-GRU step.  ``emb`` is None for shared-weight layers."""
    if emb is None:
        conv = lambda x, w, b: shared_gcn(x, supports, w, b)
    else:
        conv = lambda x, w, b: napl_gcn(x, supports, emb, w, b)
    return _gru_update(
        as_tensor(x_t), as_tensor(h_prev),
        lambda xh: (conv(xh, params.wz, params.bz), conv(xh, params.wr, params.br)),
        lambda c: conv(c, params.wh, params.bh))


class GraphGRULayer:
    def __init__(self, name: str, c_in: int, hidden: int, k: int, embed_dim: int | None,
                 rng: np.random.Generator):
        self.hidden = hidden
        width = c_in + hidden
        if embed_dim is None:
            make = lambda g: SharedGraphConv(f"{name}.{g}", k, width, hidden, rng)
        else:
            make = lambda g: NAPLGraphConv(f"{name}.{g}", embed_dim, k, width, hidden, rng)
        self.gate_z, self.gate_r, self.gate_h = make("gate_z"), make("gate_r"), make("gate_h")

    def parameters(self) -> list[Parameter]:
        return [p for c in (self.gate_z, self.gate_r, self.gate_h) for p in c.parameters()]

    def cell_params(self) -> CellParams:
        return CellParams(self.gate_z.weights, self.gate_r.weights, self.gate_h.weights,
                          self.gate_z.bias, self.gate_r.bias, self.gate_h.bias)

    def bind(self, supports: Tensor, emb) -> Callable[[Tensor, Tensor], Tensor]:
        fz, fr, fh = (c.bind(emb) for c in (self.gate_z, self.gate_r, self.gate_h))

        def gate_zr(xh):
            xg = propagate(xh, supports)
            return fz(xg), fr(xg)

        return lambda x, h: _gru_update(x, h, gate_zr, lambda c: fh(propagate(c, supports)))


class DenseGRULayer:
    def __init__(self, name: str, c_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        bound = glorot_bound(c_in + hidden, hidden)
        self.w = {g: Parameter(rng.uniform(-bound, bound, (c_in + hidden, hidden)), f"{name}.{g}.weight")
                  for g in ("gate_z", "gate_r", "gate_h")}
        self.b = {g: Parameter(np.zeros(hidden), f"{name}.{g}.bias") for g in ("gate_z", "gate_r", "gate_h")}

    def parameters(self) -> list[Parameter]:
        return [p for g in ("gate_z", "gate_r", "gate_h") for p in (self.w[g], self.b[g])]

    def __call__(self, x, h) -> Tensor:
        lin = lambda g, v: matmul(v, self.w[g]) + self.b[g]
        return _gru_update(x, h, lambda xh: (lin("gate_z", xh), lin("gate_r", xh)),
                           lambda c: lin("gate_h", c))


class ForecastModel:
    """A configured forecaster.  Call :meth:`forward` with a window
    ``T_in x N x C`` (or a batch ``B x T_in x N x C``)."""

    def __init__(self, config: ModelConfig, graph: G.PredefinedGraph | None = None):
        self.config = config
        self.graph = graph
        self.embeddings: dict[str, Parameter] = {}
        self.layers: list = []
        self.decoder: list[DenseGRULayer] = []
        self.frozen: set[str] = set()
        self._fixed_supports: G.SupportSet | None = None
        self.head_w: Parameter
        self.head_b: Parameter

    # parameters

    def parameters(self) -> list[Parameter]:
        ps = list(self.embeddings.values())
        for layer in self.layers + self.decoder:
            ps.extend(layer.parameters())
        ps.extend([self.head_w, self.head_b])
        return ps

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.name not in self.frozen]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self, *names: str) -> None:
        known = self.named_parameters()
        for n in names:
            if n not in known:
                raise KeyError(n)
        self.frozen.update(names)

    # graph

    @property
    def graph_embedding(self) -> Parameter | None:
        if self.config.variant == "agcrn_i":
            return self.embeddings["E_graph"]
        if self.config.variant in ("agcrn", "dagg_gcgru"):
            return self.embeddings["E"]
        return None

    def layer_embedding(self, i: int) -> Parameter | None:
        v = self.config.variant
        if v == "agcrn_i":
            return self.embeddings[f"E_layer{i}"]
        if v in ("agcrn", "napl_gcgru"):
            return self.embeddings["E"]
        return None

    def adaptive_graph(self) -> Tensor | None:
        emb = self.graph_embedding
        return None if emb is None else G.dagg_matrix(emb)

    def supports(self) -> G.SupportSet:
        if self.config.needs_graph:
            if self._fixed_supports is None:
                self._fixed_supports = G.build_supports(self.graph, "predefined")
            return self._fixed_supports
        return G.build_supports(self.adaptive_graph(), self.config.dagg_variant)

    # forward

    def _as_batch(self, window) -> tuple[np.ndarray, bool]:
        w = window.data if isinstance(window, Tensor) else np.asarray(window, dtype=np.float64)
        c = self.config
        single = w.ndim == 3
        if single:
            w = w[None]
        if w.ndim != 4 or w.shape[1:] != (c.lookback, c.n_nodes, c.input_dim):
            raise ShapeError(
                f"window shape {w.shape if not single else w.shape[1:]} does not match "
                f"(lookback={c.lookback}, nodes={c.n_nodes}, features={c.input_dim})")
        return w, single

    def forward(self, window) -> Tensor:
        """Predictions ``tau x N`` (``B x tau x N`` for a batch), in the
        scale of the inputs."""
        if self.config.variant == "gru_ed":
            return gru_ed_forward(self, window)
        w, single = self._as_batch(window)
        s = self.supports().stacked()
        steps = [layer.bind(s, self.layer_embedding(i)) for i, layer in enumerate(self.layers)]
        b, n = w.shape[0], self.config.n_nodes
        hs = [Tensor(np.zeros((b, n, layer.hidden))) for layer in self.layers]
        for t in range(self.config.lookback):
            x = Tensor(w[:, t])
            for i, step in enumerate(steps):
                hs[i] = step(x, hs[i])
                x = hs[i]
        out = transpose(matmul(hs[-1], self.head_w) + self.head_b)
        return reshape(out, out.shape[1:]) if single else out

    __call__ = forward

    def predict(self, window) -> np.ndarray:
        with no_grad():
            return self.forward(window).numpy()


def gru_ed_forward(model: ForecastModel, window) -> Tensor:
    """Encoder-decoder GRU run independently per node (nodes as batch items).

    The decoder starts from the last observed value of the first feature
    and feeds its own prediction back for each of the ``tau`` steps.
    """
    if model.config.variant != "gru_ed":
        raise ConfigError(f"gru_ed_forward needs a gru_ed model, got {model.config.variant!r}")
    c = model.config
    w, single = model._as_batch(window)
    b, n = w.shape[0], c.n_nodes
    seq = w.transpose(1, 0, 2, 3).reshape(c.lookback, b * n, c.input_dim)
    hs = [Tensor(np.zeros((b * n, layer.hidden))) for layer in model.layers]
    for t in range(c.lookback):
        x = Tensor(seq[t])
        for i, layer in enumerate(model.layers):
            hs[i] = layer(x, hs[i])
            x = hs[i]
    y = Tensor(seq[-1][:, :1])
    outs = []
    for _ in range(c.horizon):
        x = y
        for i, layer in enumerate(model.decoder):
            hs[i] = layer(x, hs[i])
            x = hs[i]
        y = matmul(x, model.head_w) + model.head_b
        outs.append(y)
    out = transpose(reshape(concat(outs, axis=-1), (b, n, c.horizon)))
    return reshape(out, out.shape[1:]) if single else out


def build(config: ModelConfig, rng: np.random.Generator | None = None,
          graph: G.PredefinedGraph | None = None) -> ForecastModel:
    """Construct and initialize a model; ``rng`` defaults to ``make_rng(config.seed)``."""
    if rng is None:
        rng = make_rng(config.seed)
    c = config
    if c.needs_graph:
        if graph is None:
            raise ConfigError(f"variant {c.variant!r} needs a pre-defined graph")
        if graph.n_nodes != c.n_nodes:
            raise ConfigError(f"graph has {graph.n_nodes} nodes, config has {c.n_nodes}")
    m = ForecastModel(c, graph if c.needs_graph else None)
    emb_shape = (c.n_nodes, c.embed_dim)
    if c.variant in ("agcrn", "napl_gcgru", "dagg_gcgru"):
        m.embeddings["E"] = Parameter(rng.standard_normal(emb_shape), "E")
    elif c.variant == "agcrn_i":
        m.embeddings["E_graph"] = Parameter(rng.standard_normal(emb_shape), "E_graph")
        for i in range(c.layers):
            m.embeddings[f"E_layer{i}"] = Parameter(rng.standard_normal(emb_shape), f"E_layer{i}")

    if c.variant == "gru_ed":
        for i in range(c.layers):
            m.layers.append(DenseGRULayer(f"encoder{i}", c.input_dim if i == 0 else c.hidden, c.hidden, rng))
        for i in range(c.layers):
            m.decoder.append(DenseGRULayer(f"decoder{i}", 1 if i == 0 else c.hidden, c.hidden, rng))
        out_dim = 1
    else:
        pool_dim = c.embed_dim if c.variant in _NAPL else None
        for i in range(c.layers):
            m.layers.append(GraphGRULayer(f"layer{i}", c.input_dim if i == 0 else c.hidden,
                                          c.hidden, c.n_supports, pool_dim, rng))
        out_dim = c.horizon
    bound = glorot_bound(c.hidden, out_dim)
    m.head_w = Parameter(rng.uniform(-bound, bound, (c.hidden, out_dim)), "head.weight")
    m.head_b = Parameter(np.zeros(out_dim), "head.bias")
    return m


def count_params(config: ModelConfig) -> int:
    """Number of scalar parameters :func:`build` registers for ``config``."""
    c = config
    h = c.hidden
    if c.variant == "gru_ed":
        gru = lambda cin: 3 * ((cin + h) * h + h)
        total = sum(gru(c.input_dim if i == 0 else h) for i in range(c.layers))
        total += sum(gru(1 if i == 0 else h) for i in range(c.layers))
        return total + h + 1
    k, d = c.n_supports, c.embed_dim
    total = 0
    for i in range(c.layers):
        width = (c.input_dim if i == 0 else h) + h
        if c.variant in _NAPL:
            total += 3 * (d * k * width * h) + 3 * (d * h)
        else:
            total += 3 * (k * width * h) + 3 * h
    n_emb = {"agcrn": 1, "napl_gcgru": 1, "dagg_gcgru": 1, "gcgru": 0, "agcrn_i": c.layers + 1}[c.variant]
    total += n_emb * c.n_nodes * d
    return total + h * c.horizon + c.horizon


# checkpoints

CHECKPOINT_FORMAT = "agcrn-checkpoint/1"


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_dict(model: ForecastModel, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "graph": None if model.graph is None else {
            "n_nodes": model.graph.n_nodes,
            "edges": [[u, v, float(w)] for u, v, w in model.graph.edges]},
        "frozen": sorted(model.frozen),
        "params": [{"name": p.name, "shape": list(p.shape), "dtype": "<f8", "data": _encode(p.data)}
                   for p in model.parameters()],
        "extra": extra or {},
    }


def save_checkpoint(model: ForecastModel, path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model, extra), fh, indent=1, sort_keys=True)
        fh.write("\n")


def model_from_dict(d: dict) -> tuple[ForecastModel, dict]:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a checkpoint (format={d.get('format')!r})")
    config = ModelConfig.from_dict(d["config"])
    graph = None
    if d.get("graph") is not None:
        graph = G.PredefinedGraph(d["graph"]["n_nodes"], [tuple(e) for e in d["graph"]["edges"]])
    model = build(config, graph=graph)
    params = model.named_parameters()
    stored = {p["name"]: p for p in d["params"]}
    if set(stored) != set(params):
        raise ConfigError(f"checkpoint parameters {sorted(set(stored) ^ set(params))} do not match the config")
    for name, p in params.items():
        value = _decode(stored[name]["data"], stored[name]["shape"])
        if value.shape != p.shape:
            raise ConfigError(f"{name}: stored shape {value.shape} vs built {p.shape}")
        p.data[...] = value
    model.frozen = set(d.get("frozen", []))
    return model, d.get("extra", {})


def load_checkpoint(path) -> tuple[ForecastModel, dict]:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
