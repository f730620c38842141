"""Classification and regression networks built from GCN layers and co-pooling."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .graphs import Batch
from .layers import Linear, gcn_forward, glorot, readout
from .pooling import CoPoolConfig, CoPoolParams, copool_forward
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    attr_dim: int
    hidden: int = 64
    dropout: float = 0.0
    pool: CoPoolConfig = field(default_factory=CoPoolConfig)
    task: str = "classification"
    num_classes: int = 2

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.attr_dim < 1:
            raise ValueError("attr_dim must be >= 1 (pad plain graphs first)")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification needs at least two classes")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pool"] = CoPoolConfig(**d["pool"])
        return cls(**d)


@dataclass
class ModelParams:
    convs: list[Tensor]
    pools: list[CoPoolParams]
    head: list[Linear]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, th in enumerate(self.convs):
            out[f"conv{i}.theta"] = th
        for i, p in enumerate(self.pools):
            for key in ("beta", "W_prox", "a", "W_fuse"):
                out[f"pool{i}.{key}"] = getattr(p, key)
        for i, lin in enumerate(self.head):
            out[f"lin{i}.weight"] = lin.weight
            out[f"lin{i}.bias"] = lin.bias
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.named().items():
            t.data[...] = snap[k]


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    h = config.hidden
    n_convs = 3 if config.task == "classification" else 2
    dims = [config.attr_dim] + [h] * n_convs
    convs = [glorot(rng, dims[i], dims[i + 1], f"conv{i}.theta") for i in range(n_convs)]
    pools = [CoPoolParams.init(rng, h, h, config.pool, f"pool{i}") for i in range(2)]
    h2 = max(1, h // 2)
    head = [
        Linear.init(rng, 4 * h, h, "lin0"),
        Linear.init(rng, h, h2, "lin1"),
        Linear.init(rng, h2, config.out_dim, "lin2"),
    ]
    return ModelParams(convs, pools, head)


def _head(x: Tensor, params: ModelParams, config: ModelConfig, train_mode: bool, rng) -> Tensor:
    lin0, lin1, lin2 = params.head
    x = T.relu(lin0(x))
    if train_mode and config.dropout:
        x = T.dropout(x, config.dropout, rng)
    x = T.relu(lin1(x))
    if train_mode and config.dropout:
        x = T.dropout(x, config.dropout, rng)
    return lin2(x)


def classify_forward(batch: Batch, params: ModelParams, config: ModelConfig, train_mode: bool = False, rng=None) -> Tensor:
    """Logits (slots x C): conv, conv, pool, conv, pool, readouts, 3-layer head."""
    if batch.attrs.shape[1] != config.attr_dim:
        raise T.ShapeError(f"batch attr_dim {batch.attrs.shape[1]} != model attr_dim {config.attr_dim}")
    g = batch.graph
    x = Tensor._wrap(batch.attrs, False)
    c1, c2, c3 = params.convs
    h = T.relu(gcn_forward(x, g, c1))
    h = T.relu(gcn_forward(h, g, c2))
    p1 = copool_forward(h, g, params.pools[0], config.pool)
    r1 = readout(p1.Z, p1.graph.offsets)
    h = T.relu(gcn_forward(p1.Z, p1.graph, c3))
    p2 = copool_forward(h, p1.graph, params.pools[1], config.pool)
    r2 = readout(p2.Z, p2.graph.offsets)
    return _head(T.concat_cols([r1, r2]), params, config, train_mode, rng)


def regress_forward(batch: Batch, params: ModelParams, config: ModelConfig, train_mode: bool = False, rng=None) -> Tensor:
    """Predictions (slots x 1): conv, pool, conv, pool, readouts, 3-layer MLP."""
    if batch.attrs.shape[1] != config.attr_dim:
        raise T.ShapeError(f"batch attr_dim {batch.attrs.shape[1]} != model attr_dim {config.attr_dim}")
    g = batch.graph
    x = Tensor._wrap(batch.attrs, False)
    c1, c2 = params.convs
    h = T.relu(gcn_forward(x, g, c1))
    p1 = copool_forward(h, g, params.pools[0], config.pool)
    r1 = readout(p1.Z, p1.graph.offsets)
    h = T.relu(gcn_forward(p1.Z, p1.graph, c2))
    p2 = copool_forward(h, p1.graph, params.pools[1], config.pool)
    r2 = readout(p2.Z, p2.graph.offsets)
    return _head(T.concat_cols([r1, r2]), params, config, train_mode, rng)


def forward(batch: Batch, params: ModelParams, config: ModelConfig, train_mode: bool = False, rng=None) -> Tensor:
    fn = classify_forward if config.task == "classification" else regress_forward
    return fn(batch, params, config, train_mode, rng)


def loss(outputs: Tensor, targets, task: str) -> Tensor:
    """Mean NLL of log-softmax logits, or mean absolute error for regression."""
    if task == "classification":
        return T.nll(T.log_softmax(outputs), targets)
    if task == "regression":
        return T.mae(outputs, np.asarray(targets, dtype=np.float64).reshape(-1, 1))
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> Path:
    """Write an ``.npz`` holding every parameter plus a JSON header."""
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.snapshot().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_dict(header["config"])
        params = init_params(config, np.random.default_rng(0))
        named = params.named()
        stored = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    if set(stored) != set(named):
        raise ValueError("checkpoint parameters do not match the model layout")
    for k, t in named.items():
        if stored[k].shape != t.shape:
            raise ValueError(f"{k}: shape {stored[k].shape} != {t.shape}")
        t.data = stored[k].astype(np.float64).copy()
    return params, config, header.get("extra", {})
