"""Small message-passing regressors over molecular graphs.

Parameters live in one flat float64 vector whose layout is a pure
function of :class:`RegressorConfig` (see :func:`param_layout`).  Torch
is used for the tensor algebra and reverse-mode gradients only; the
layers themselves are written out here.

Layer equations (``h`` node states, ``u`` one-hot bond orders, ``s`` = SiLU):

* ``gcn``:  ``h_i' = s((h_i W + sum_j (h_j W + u_ij E)) / (deg_i + 1) + b)``
* ``gin``:  ``h_i' = s(s((h_i + sum_j s(h_j + u_ij E)) W1 + b1) W2 + b2)``
* ``gatv2lite``: single-head additive attention over neighbours and self,
  ``e_ij = a . leaky_relu(h_i Ws + h_j Wt)``, values ``h_j Wt + u_ij E``.

Readout is a sum over nodes followed by a two-layer head; the MVE
variant adds a second head whose output goes through softplus.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .molgraph import MolecularGraph

__all__ = [
    "ARCHITECTURES",
    "LayoutError",
    "ModelParams",
    "MVEConfig",
    "Prediction",
    "RegressorConfig",
    "TrainConfig",
    "TrainingDivergedError",
    "embed",
    "forward",
    "init_params",
    "load_params",
    "loss_and_grad",
    "mve_loss",
    "param_layout",
    "predict_batch",
    "save_params",
    "train",
    "train_mse",
    "train_mve",
]

ARCHITECTURES = ("gcn", "gin", "gatv2lite")
NODE_DIM = 6
EDGE_DIM = 3
SIGMA2_FLOOR = 1e-6
# atomic weight column is rescaled so all input features are O(1)
FEATURE_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 0.1, 1.0])
CHECKPOINT_FORMAT = "cftruth.model/1"

DTYPE = torch.float64


class LayoutError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressorConfig:
    architecture: str = "gatv2lite"
    layers: int = 3
    hidden_dim: int = 32
    mve: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")


@dataclass(frozen=True)
class MVEConfig:
    beta: float = 0.5
    warmup_epochs: int = 50


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    batch_size: int = 32
    grad_clip_norm: float = 5.0
    momentum: float = 0.9
    mve: MVEConfig | None = None
    # "cosine" anneals the learning rate per epoch down to final_lr_fraction * learning_rate
    lr_schedule: str = "constant"
    final_lr_fraction: float = 0.05

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must be in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate, batch_size and grad_clip_norm must be positive")
        if self.mve is not None and self.epochs and self.mve.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")


def param_layout(config: RegressorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` blocks of the flat parameter vector."""
    d = config.hidden_dim
    out: list[tuple[str, tuple[int, ...]]] = []
    d_in = NODE_DIM
    for l in range(config.layers):
        p = f"layer{l}."
        if config.architecture == "gcn":
            out += [(p + "W", (d_in, d)), (p + "E", (EDGE_DIM, d)), (p + "b", (d,))]
        elif config.architecture == "gin":
            out += [
                (p + "E", (EDGE_DIM, d_in)),
                (p + "W1", (d_in, d)),
                (p + "b1", (d,)),
                (p + "W2", (d, d)),
                (p + "b2", (d,)),
            ]
        else:
            out += [
                (p + "Ws", (d_in, d)),
                (p + "Wt", (d_in, d)),
                (p + "a", (d,)),
                (p + "E", (EDGE_DIM, d)),
                (p + "b", (d,)),
            ]
        d_in = d
    out += [("head.W1", (d, d)), ("head.b1", (d,)), ("head.W2", (d, 1)), ("head.b2", (1,))]
    if config.mve:
        out += [("var.W1", (d, d)), ("var.b1", (d,)), ("var.W2", (d, 1)), ("var.b2", (1,))]
    return out


def layout_size(config: RegressorConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_layout(config))


@dataclass(frozen=True, eq=False)
class ModelParams:
    config: RegressorConfig
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != layout_size(self.config):
            raise LayoutError(
                f"parameter vector has {theta.size} entries, layout for {self.config} needs "
                f"{layout_size(self.config)}"
            )
        if not np.all(np.isfinite(theta)):
            raise LayoutError("parameter vector contains non-finite entries")
        theta = theta.copy()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.config == other.config
            and np.array_equal(self.theta, other.theta)
        )


@dataclass(frozen=True)
class Prediction:
    y_hat: float
    embedding: np.ndarray = field(repr=False)
    sigma2: float | None = None


def init_params(config: RegressorConfig, rng: np.random.Generator) -> ModelParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    chunks = []
    for name, shape in param_layout(config):
        n = math.prod(shape)
        if len(shape) == 2:
            chunks.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=n))
        elif name.endswith(".a"):
            chunks.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=n))
        else:
            chunks.append(np.zeros(n))
    return ModelParams(config, np.concatenate(chunks))


def _unpack(theta: torch.Tensor, config: RegressorConfig) -> dict[str, torch.Tensor]:
    out = {}
    k = 0
    for name, shape in param_layout(config):
        n = math.prod(shape)
        out[name] = theta[k : k + n].view(shape)
        k += n
    return out


# ----------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    x: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    edge_attr: torch.Tensor
    node_graph: torch.Tensor
    in_degree: torch.Tensor
    n_graphs: int


def _graph_arrays(g: MolecularGraph):
    c = g.canonical
    x = c.node_features * FEATURE_SCALE
    pairs = []
    for e, (i, j, _) in enumerate(c.bonds):
        pairs.append((j, i, e))  # (dst, src, bond)
        pairs.append((i, j, e))
    pairs.sort()
    dst = np.array([p[0] for p in pairs], dtype=np.int64)
    src = np.array([p[1] for p in pairs], dtype=np.int64)
    ea = c.edge_features[[p[2] for p in pairs]] if pairs else np.zeros((0, EDGE_DIM))
    return x, src, dst, ea


def collate(arrays: Sequence[tuple]) -> GraphBatch:
    xs, srcs, dsts, eas, owner = [], [], [], [], []
    offset = 0
    for k, (x, src, dst, ea) in enumerate(arrays):
        xs.append(x)
        srcs.append(src + offset)
        dsts.append(dst + offset)
        eas.append(ea)
        owner.append(np.full(len(x), k, dtype=np.int64))
        offset += len(x)
    dst = torch.from_numpy(np.concatenate(dsts))
    n = offset
    deg = torch.zeros(n, dtype=DTYPE).index_add_(0, dst, torch.ones(len(dst), dtype=DTYPE))
    return GraphBatch(
        x=torch.from_numpy(np.concatenate(xs)),
        src=torch.from_numpy(np.concatenate(srcs)),
        dst=dst,
        edge_attr=torch.from_numpy(np.concatenate(eas)),
        node_graph=torch.from_numpy(np.concatenate(owner)),
        in_degree=deg,
        n_graphs=len(arrays),
    )


def make_batch(graphs: Sequence[MolecularGraph]) -> GraphBatch:
    return collate([_graph_arrays(g) for g in graphs])


# ----------------------------------------------------------------------
# forward pass


def _scatter_sum(values: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    return torch.zeros((n,) + values.shape[1:], dtype=values.dtype).index_add(0, index, values)


def _run(theta: torch.Tensor, config: RegressorConfig, b: GraphBatch):
    """Returns ``(y_hat, sigma2 or None, embedding)`` for every graph in ``b``."""
    P = _unpack(theta, config)
    act = torch.nn.functional.silu
    h = b.x
    n = h.shape[0]
    for l in range(config.layers):
        p = f"layer{l}."
        if config.architecture == "gcn":
            hw = h @ P[p + "W"]
            msg = hw[b.src] + b.edge_attr @ P[p + "E"]
            agg = hw + _scatter_sum(msg, b.dst, n)
            h = act(agg / (b.in_degree + 1.0).unsqueeze(1) + P[p + "b"])
        elif config.architecture == "gin":
            msg = act(h[b.src] + b.edge_attr @ P[p + "E"])
            agg = h + _scatter_sum(msg, b.dst, n)
            h = act(act(agg @ P[p + "W1"] + P[p + "b1"]) @ P[p + "W2"] + P[p + "b2"])
        else:
            s = h @ P[p + "Ws"]
            t = h @ P[p + "Wt"]
            loops = torch.arange(n)
            dst = torch.cat([b.dst, loops])
            src = torch.cat([b.src, loops])
            values = torch.cat([t[b.src] + b.edge_attr @ P[p + "E"], t])
            scores = torch.nn.functional.leaky_relu(s[dst] + t[src], 0.2) @ P[p + "a"]
            peak = torch.full((n,), -torch.inf, dtype=DTYPE).scatter_reduce(0, dst, scores, "amax")
            w = torch.exp(scores - peak[dst].detach())
            alpha = w / _scatter_sum(w, dst, n)[dst]
            h = act(_scatter_sum(alpha.unsqueeze(1) * values, dst, n) + P[p + "b"])
    emb = _scatter_sum(h, b.node_graph, b.n_graphs)
    y = (act(emb @ P["head.W1"] + P["head.b1"]) @ P["head.W2"] + P["head.b2"]).squeeze(1)
    sigma2 = None
    if config.mve:
        raw = act(emb @ P["var.W1"] + P["var.b1"]) @ P["var.W2"] + P["var.b2"]
        sigma2 = torch.nn.functional.softplus(raw.squeeze(1)) + SIGMA2_FLOOR
    return y, sigma2, emb


def _theta_for(params, config: RegressorConfig | None) -> tuple[np.ndarray, RegressorConfig]:
    if isinstance(params, ModelParams):
        if config is not None and config != params.config:
            raise LayoutError(f"params were built for {params.config}, not {config}")
        return params.theta, params.config
    if config is None:
        raise LayoutError("a raw parameter vector needs an explicit config")
    theta = np.asarray(params, dtype=np.float64)
    if theta.ndim != 1 or theta.size != layout_size(config):
        raise LayoutError(f"parameter vector has {theta.size} entries, layout needs {layout_size(config)}")
    return theta, config


def forward(params, config: RegressorConfig | None, g: MolecularGraph) -> Prediction:
    """Prediction for a single graph; identical for any atom numbering of ``g``."""
    theta, config = _theta_for(params, config)
    with torch.no_grad():
        y, s2, emb = _run(torch.tensor(theta), config, make_batch([g]))
    return Prediction(
        y_hat=float(y[0]),
        embedding=emb[0].numpy().copy(),
        sigma2=None if s2 is None else float(s2[0]),
    )


def embed(params, config: RegressorConfig | None, g: MolecularGraph) -> np.ndarray:
    """Pooled pre-head representation of ``g`` (length ``hidden_dim``)."""
    return forward(params, config, g).embedding


def predict_batch(
    params, graphs: Sequence[MolecularGraph], chunk: int = 512
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Vectorized ``(y_hat, sigma2 or None, embeddings)`` for many graphs."""
    theta, config = _theta_for(params, None)
    t = torch.tensor(theta)
    ys, s2s, embs = [], [], []
    with torch.no_grad():
        for k in range(0, len(graphs), chunk):
            y, s2, emb = _run(t, config, make_batch(graphs[k : k + chunk]))
            ys.append(y.numpy())
            embs.append(emb.numpy())
            if s2 is not None:
                s2s.append(s2.numpy())
    if not ys:
        d = config.hidden_dim
        return np.zeros(0), (np.zeros(0) if config.mve else None), np.zeros((0, d))
    return (
        np.concatenate(ys),
        np.concatenate(s2s) if config.mve else None,
        np.concatenate(embs),
    )


# ----------------------------------------------------------------------
# losses and training


def mve_loss(y, y_hat, sigma2, beta: float, scale=None):
    """Beta-weighted Gaussian NLL, ``mean(scale/2 * ((y - y_hat)^2 / sigma2 + log sigma2))``.

    ``scale`` defaults to ``sigma2 ** beta`` with gradient flow blocked.
    Works on torch tensors and numpy arrays alike.
    """
    if scale is None:
        scale = sigma2.detach() ** beta if isinstance(sigma2, torch.Tensor) else sigma2**beta
    lib = torch if isinstance(sigma2, torch.Tensor) else np
    return (0.5 * scale * ((y - y_hat) ** 2 / sigma2 + lib.log(sigma2))).mean()


def _loss(theta, config, batch, y, kind: str, beta: float, scale=None):
    y_hat, s2, _ = _run(theta, config, batch)
    if kind == "mse":
        return ((y - y_hat) ** 2).mean()
    if kind == "mve":
        if s2 is None:
            raise LayoutError("MVE loss needs a config with mve=True")
        return mve_loss(y, y_hat, s2, beta, scale)
    raise ValueError(f"unknown loss {kind!r}")


def loss_and_grad(
    params,
    graphs: Sequence[MolecularGraph],
    y: Sequence[float],
    loss: str = "mse",
    beta: float = 0.5,
    config: RegressorConfig | None = None,
    scale: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Loss over ``graphs`` and its gradient with respect to the flat parameters.

    For ``loss="mve"`` the ``sigma2 ** beta`` factor is a constant in the
    gradient; pass ``scale`` to pin it to given values instead.
    """
    theta_np, config = _theta_for(params, config)
    theta = torch.tensor(theta_np, requires_grad=True)
    target = torch.as_tensor(np.asarray(y, dtype=np.float64))
    sc = None if scale is None else torch.as_tensor(np.asarray(scale, dtype=np.float64))
    value = _loss(theta, config, make_batch(graphs), target, loss, beta, sc)
    value.backward()
    return float(value.detach()), theta.grad.numpy().copy()


def epoch_learning_rate(tc: TrainConfig, epoch: int) -> float:
    if tc.lr_schedule == "constant" or tc.epochs < 2:
        return tc.learning_rate
    lo = tc.final_lr_fraction * tc.learning_rate
    return lo + 0.5 * (tc.learning_rate - lo) * (1 + math.cos(math.pi * epoch / (tc.epochs - 1)))


def train(
    dataset,
    rc: RegressorConfig,
    tc: TrainConfig,
    rng: np.random.Generator,
    loss: str = "mse",
    on_epoch_end: Callable[[int, np.ndarray], None] | None = None,
) -> ModelParams:
    """Mini-batch SGD with momentum and gradient-norm clipping.

    ``dataset`` holds objects with ``graph`` and ``y`` attributes.  With
    ``loss="mve"`` the first ``tc.mve.warmup_epochs`` epochs use MSE on
    the mean head.  ``on_epoch_end(epoch, theta)`` sees a copy of the
    parameters after every epoch.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if loss == "mve" and (tc.mve is None or not rc.mve):
        raise ValueError("MVE training needs tc.mve and a config with mve=True")
    params = init_params(rc, rng)
    if tc.epochs == 0:
        return params
    arrays = [_graph_arrays(s.graph) for s in dataset]
    ys = np.array([s.y for s in dataset], dtype=np.float64)
    theta = torch.tensor(params.theta, requires_grad=True)
    opt = torch.optim.SGD([theta], lr=tc.learning_rate, momentum=tc.momentum)
    n = len(arrays)
    for epoch in range(tc.epochs):
        for group in opt.param_groups:
            group["lr"] = epoch_learning_rate(tc, epoch)
        kind = "mve" if loss == "mve" and epoch >= tc.mve.warmup_epochs else "mse"
        beta = tc.mve.beta if tc.mve else 0.0
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            batch = collate([arrays[i] for i in idx])
            opt.zero_grad()
            value = _loss(theta, rc, batch, torch.from_numpy(ys[idx]), kind, beta)
            if not torch.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite {kind} loss at epoch {epoch}, batch starting {start}; "
                    "lower the learning rate or the clip norm"
                )
            value.backward()
            torch.nn.utils.clip_grad_norm_([theta], tc.grad_clip_norm)
            opt.step()
        if on_epoch_end is not None:
            on_epoch_end(epoch, theta.detach().numpy().copy())
    return ModelParams(rc, theta.detach().numpy().copy())


def train_mse(dataset, rc: RegressorConfig, tc: TrainConfig, rng: np.random.Generator, **kw) -> ModelParams:
    return train(dataset, rc, tc, rng, loss="mse", **kw)


def train_mve(dataset, rc: RegressorConfig, tc: TrainConfig, rng: np.random.Generator, **kw) -> ModelParams:
    if tc.mve is None:
        raise ValueError("train_mve needs tc.mve")
    if not rc.mve:
        rc = RegressorConfig(rc.architecture, rc.layers, rc.hidden_dim, mve=True)
    return train(dataset, rc, tc, rng, loss="mve", **kw)


# ----------------------------------------------------------------------
# checkpoints


def save_params(params: ModelParams, path) -> None:
    header = json.dumps({"format": CHECKPOINT_FORMAT, "config": asdict(params.config)})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), theta=params.theta)


def load_params(path) -> ModelParams:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        return ModelParams(RegressorConfig(**header["config"]), data["theta"].copy())
