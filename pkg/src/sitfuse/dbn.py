"""Restricted Boltzmann machines and greedy deep belief network training.

The first layer is Gaussian-Bernoulli with energy

    E(v, h) = sum_i (v_i - b_i)^2 / (2 s_i^2) - sum_j c_j h_j - sum_ij (v_i / s_i^2) W_ij h_j

where ``s_i = exp(z_i)``. Upper layers are Bernoulli-Bernoulli. Training uses
CD-k with sampled hidden units and, for Gaussian visibles, mean
reconstructions in the negative chain.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

LOGIT_CLAMP = 500.0

Kind = Literal["GB", "BB"]


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values."""


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)))


@dataclass(frozen=True, eq=False)
class RbmLayer:
    kind: Kind
    W: np.ndarray  # (V, H)
    b: np.ndarray  # (V,)
    c: np.ndarray  # (H,)
    z: np.ndarray  # (V,) log std, only meaningful for GB

    def __post_init__(self):
        if self.kind not in ("GB", "BB"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        V, H = self.W.shape
        if self.b.shape != (V,) or self.c.shape != (H,) or self.z.shape != (V,):
            raise ValueError("inconsistent RBM parameter shapes")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.z)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "c": self.c, "z": self.z}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.5
    weight_decay: float = 1e-4
    cd_k: int = 1
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    learn_sigma: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.cd_k < 1:
            raise ValueError("cd_k must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True, eq=False)
class DbnModel:
    layers: tuple[RbmLayer, ...]
    configs: tuple[TrainConfig, ...] = field(default=())

    def __post_init__(self):
        layers = tuple(self.layers)
        if not 1 <= len(layers) <= 3:
            raise ValueError(f"a DBN has 1-3 layers, got {len(layers)}")
        if layers[0].kind != "GB" or any(l.kind != "BB" for l in layers[1:]):
            raise ValueError("layer 0 must be GB and upper layers BB")
        for lower, upper in zip(layers, layers[1:]):
            if lower.n_hidden != upper.n_visible:
                raise ValueError("layer dimensions do not chain")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "configs", tuple(self.configs))

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_visible

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_hidden

    def parameter_count(self) -> int:
        return sum(p.size for l in self.layers for k, p in l.params().items()
                   if k != "z" or l.kind == "GB")


def parameter_count(dims: Sequence[int]) -> int:
    """Parameters of a DBN with layer sizes ``dims`` (first layer GB, so it carries log-sigmas)."""
    total = 0
    for i, (v, h) in enumerate(zip(dims, dims[1:])):
        total += v * h + v + h + (v if i == 0 else 0)
    return total


def init_layer(kind: Kind, n_visible: int, n_hidden: int, seed: int = 0) -> RbmLayer:
    if n_visible < 1 or n_hidden < 1:
        raise ValueError("layer dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    return RbmLayer(kind, rng.normal(0.0, 0.01, size=(n_visible, n_hidden)),
                    np.zeros(n_visible), np.zeros(n_hidden), np.zeros(n_visible))


def _check_dim(layer: RbmLayer, arr: np.ndarray, axis_len: int, what: str):
    if arr.ndim != 2 or arr.shape[1] != axis_len:
        raise ValueError(f"{what} batch has shape {arr.shape}, layer expects (*, {axis_len})")


def hidden_probs(layer: RbmLayer, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _check_dim(layer, v, layer.n_visible, "visible")
    if layer.kind == "GB":
        v = v * np.exp(-2.0 * layer.z)
    return logistic(v @ layer.W + layer.c)


def visible_reconstruct(layer: RbmLayer, h: np.ndarray, mode: str = "mean",
                        rng: np.random.Generator | None = None) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    _check_dim(layer, h, layer.n_hidden, "hidden")
    pre = h @ layer.W.T + layer.b
    mean = pre if layer.kind == "GB" else logistic(pre)
    if mode == "mean":
        return mean
    if mode != "sample":
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs an rng")
    if layer.kind == "GB":
        return mean + rng.standard_normal(mean.shape) * layer.sigma
    return (rng.random(mean.shape) < mean).astype(np.float64)


def reconstruction_error(layer: RbmLayer, v: np.ndarray) -> float:
    """Mean squared error of the one-step mean-field reconstruction."""
    recon = visible_reconstruct(layer, hidden_probs(layer, v), "mean")
    return float(np.mean((np.asarray(v, dtype=np.float64) - recon) ** 2))


def cd_gradient(layer: RbmLayer, batch: np.ndarray, k: int, rng: np.random.Generator,
                learn_sigma: bool = False) -> dict[str, np.ndarray]:
    """CD-k estimate of the log-likelihood gradient (ascent direction)."""
    v0 = np.asarray(batch, dtype=np.float64)
    n = v0.shape[0]
    ph0 = hidden_probs(layer, v0)
    h = (rng.random(ph0.shape) < ph0).astype(np.float64)
    vk, phk = v0, ph0
    for step in range(k):
        vk = visible_reconstruct(layer, h, "mean" if layer.kind == "GB" else "sample", rng)
        phk = hidden_probs(layer, vk)
        if step < k - 1:
            h = (rng.random(phk.shape) < phk).astype(np.float64)

    grads = {}
    if layer.kind == "GB":
        inv_var = np.exp(-2.0 * layer.z)
        s0, sk = v0 * inv_var, vk * inv_var
        grads["W"] = (s0.T @ ph0 - sk.T @ phk) / n
        grads["b"] = ((v0 - layer.b) * inv_var).mean(axis=0) - ((vk - layer.b) * inv_var).mean(axis=0)
        if learn_sigma:
            # -dE/dz_i = (v_i - b_i)^2 / s_i^2 - 2 v_i (W h)_i / s_i^2
            def neg_dE_dz(v, ph):
                return (((v - layer.b) ** 2 - 2.0 * v * (ph @ layer.W.T)) * inv_var).mean(axis=0)
            grads["z"] = neg_dE_dz(v0, ph0) - neg_dE_dz(vk, phk)
        else:
            grads["z"] = np.zeros_like(layer.z)
    else:
        grads["W"] = (v0.T @ ph0 - vk.T @ phk) / n
        grads["b"] = v0.mean(axis=0) - vk.mean(axis=0)
        grads["z"] = np.zeros_like(layer.z)
    grads["c"] = ph0.mean(axis=0) - phk.mean(axis=0)
    return grads


def cd_step(layer: RbmLayer, batch: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
            velocity: dict[str, np.ndarray] | None = None):
    """One CD-k update with momentum and weight decay on ``W``.

    Returns ``(new_layer, reconstruction_error, new_velocity)``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    error = reconstruction_error(layer, batch)
    grads = cd_gradient(layer, batch, cfg.cd_k, rng, cfg.learn_sigma and layer.kind == "GB")
    grads["W"] = grads["W"] - cfg.weight_decay * layer.W
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in layer.params().items()}
    new_velocity = {k: cfg.momentum * velocity[k] + cfg.learning_rate * grads[k] for k in velocity}
    params = {k: v + new_velocity[k] for k, v in layer.params().items()}
    if not all(np.isfinite(p).all() for p in params.values()) or not np.isfinite(error):
        raise TrainingError("non-finite gradient during contrastive divergence")
    return replace(layer, **params), error, new_velocity


def train_layer(layer: RbmLayer, data: np.ndarray, cfg: TrainConfig) -> tuple[RbmLayer, list[float]]:
    """Mini-batch CD training; returns the layer and the per-epoch mean reconstruction error."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != layer.n_visible:
        raise ValueError(f"training data {data.shape} does not match {layer.n_visible} visible units")
    rng = np.random.default_rng(cfg.seed)
    velocity = None
    trace = []
    n = data.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            layer, err, velocity = cd_step(layer, batch, cfg, rng, velocity)
            total += err * len(batch)
        trace.append(total / n)
    return layer, trace


def train_dbn(data: np.ndarray, layer_dims: Sequence[int], configs: TrainConfig | Sequence[TrainConfig]):
    """Greedy layer-wise training.

    ``layer_dims`` lists the hidden sizes of each layer (1-3 entries); the
    input dimension comes from ``data``. Upper layers train on the hidden
    probabilities of the layer below. Returns ``(model, traces)``.
    """
    data = np.asarray(data, dtype=np.float64)
    if not 1 <= len(layer_dims) <= 3:
        raise ValueError("a DBN has 1-3 layers")
    if isinstance(configs, TrainConfig):
        configs = [replace(configs, seed=configs.seed + i) for i in range(len(layer_dims))]
    configs = list(configs)
    if len(configs) != len(layer_dims):
        raise ValueError("need one TrainConfig per layer")
    layers, traces = [], []
    inputs = data
    n_visible = data.shape[1]
    for i, (n_hidden, cfg) in enumerate(zip(layer_dims, configs)):
        layer = init_layer("GB" if i == 0 else "BB", n_visible, n_hidden, seed=cfg.seed)
        layer, trace = train_layer(layer, inputs, cfg)
        layers.append(layer)
        traces.append(trace)
        inputs = hidden_probs(layer, inputs)
        n_visible = n_hidden
    return DbnModel(tuple(layers), tuple(configs)), traces


def encode(model: DbnModel, samples: np.ndarray) -> np.ndarray:
    """Mean-field propagation of hidden probabilities through every layer."""
    out = np.asarray(samples, dtype=np.float64)
    for layer in model.layers:
        out = hidden_probs(layer, out)
    return out


def lipschitz_bound(model: DbnModel) -> float:
    """Upper bound on the Lipschitz constant of :func:`encode` (spectral norms)."""
    bound = 1.0
    for layer in model.layers:
        scale = max(1.0, float(np.exp(-2.0 * layer.z).max())) if layer.kind == "GB" else 1.0
        bound *= np.linalg.norm(layer.W, 2) * scale / 4.0
    return bound


# --- checkpoints ------------------------------------------------------------

def save_dbn(model: DbnModel, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "sitfuse-dbn/1",
        "layers": [{"kind": l.kind, "n_visible": l.n_visible, "n_hidden": l.n_hidden} for l in model.layers],
        "train_configs": [asdict(c) for c in model.configs],
    }
    if extra:
        manifest.update(extra)
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params().items():
            (directory / f"layer{i}_{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dbn(directory) -> DbnModel:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    layers = []
    for i, spec in enumerate(manifest["layers"]):
        v, h = spec["n_visible"], spec["n_hidden"]
        shapes = {"W": (v, h), "b": (v,), "c": (h,), "z": (v,)}
        arrays = {}
        for name, shape in shapes.items():
            raw = np.frombuffer((directory / f"layer{i}_{name}.bin").read_bytes(), dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise ValueError(f"layer{i}_{name}.bin has {raw.size} values, expected {shape}")
            arrays[name] = raw.reshape(shape).astype(np.float64)
        layers.append(RbmLayer(spec["kind"], **arrays))
    configs = tuple(TrainConfig(**c) for c in manifest.get("train_configs", []))
    return DbnModel(tuple(layers), configs)
