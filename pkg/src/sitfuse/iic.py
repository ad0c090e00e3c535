"""Hierarchical invariant-information-clustering heads over frozen latent features.

Each node of the tree is a linear softmax head trained to maximize the mutual
information between the cluster assignments of a sample and of a noisy copy
of it. Children are trained only on the samples their parent assigned to the
corresponding cluster.

Leaf labels encode the path ``(p_0, ..., p_{d-1})`` of a pixel as
``sum_l p_l * k**(max_depth - 1 - l)``, with levels below a childless node
counted as 0.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12
NO_LABEL = -1


@dataclass(frozen=True, eq=False)
class ClusterHead:
    A: np.ndarray  # (D, k)
    bias: np.ndarray  # (k,)
    node_id: str = "root"

    def __post_init__(self):
        if self.A.ndim != 2 or self.bias.shape != (self.A.shape[1],):
            raise ValueError("inconsistent head parameter shapes")
        if self.A.shape[1] < 2:
            raise ValueError("a clustering head needs k >= 2")

    @property
    def k(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class HeadConfig:
    sigma: float = 0.05
    lam: float = 1.0
    lr: float = 0.05
    epochs: int = 30
    batch: int = 1024
    n_subheads: int = 1
    init_scale: float = 0.1
    # small subsets still get this many updates
    min_steps: int = 200
    seed: int = 0


@dataclass(frozen=True)
class TreeConfig:
    k: int = 5
    max_depth: int = 2
    min_node_samples: int = 500
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"tree branching factor k must be >= 2, got {self.k}")
        if self.max_depth < 1:
            raise ValueError(f"tree max_depth must be >= 1, got {self.max_depth}")
        if self.min_node_samples < 1:
            raise ValueError("min_node_samples must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeConfig":
        obj = dict(obj)
        head = HeadConfig(**obj.pop("head", {}))
        return cls(head=head, **obj)


@dataclass(eq=False)
class TreeNode:
    head: ClusterHead
    path: tuple[int, ...]
    subset_size: int
    children: dict[int, "TreeNode"] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    # indices into the training features; not persisted
    sample_index: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return len(self.path)

    def walk(self):
        yield self
        for idx in sorted(self.children):
            yield from self.children[idx].walk()


@dataclass(eq=False)
class ClusterTree:
    root: TreeNode
    k: int
    max_depth: int
    min_node_samples: int

    def nodes(self) -> list[TreeNode]:
        return list(self.root.walk())

    @property
    def n_leaves_max(self) -> int:
        return self.k ** self.max_depth


@dataclass(frozen=True, eq=False)
class HierarchicalLabelMap:
    leaf: np.ndarray  # (H, W) int64, NO_LABEL where no sample
    path: np.ndarray  # (H, W, max_depth) int64, NO_LABEL below the stopping level
    k: int

    @property
    def valid(self) -> np.ndarray:
        return self.leaf != NO_LABEL


def node_name(path: tuple[int, ...]) -> str:
    return "root" + "".join(f"-{p}" for p in path)


def init_head(n_features: int, k: int, seed: int = 0, scale: float = 0.1, node_id: str = "root") -> ClusterHead:
    rng = np.random.default_rng(seed)
    return ClusterHead(rng.normal(0.0, scale, size=(n_features, k)), np.zeros(k), node_id)


def perturb(features: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-noise copy of ``features`` clamped to the encoder range [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    features = np.asarray(features, dtype=np.float64)
    if sigma == 0:
        return features.copy()
    return np.clip(features + rng.normal(0.0, sigma, size=features.shape), 0.0, 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def head_forward(head: ClusterHead, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != head.A.shape[0]:
        raise ValueError(f"features {features.shape} do not match head input {head.A.shape[0]}")
    return softmax(features @ head.A + head.bias)


def joint_distribution(z: np.ndarray, z_pair: np.ndarray) -> np.ndarray:
    """Symmetrized, normalized joint of paired soft assignments."""
    z = np.asarray(z, dtype=np.float64)
    z_pair = np.asarray(z_pair, dtype=np.float64)
    if z.shape != z_pair.shape or z.ndim != 2:
        raise ValueError("paired assignments must share shape (N, k)")
    if z.shape[0] == 0:
        raise ValueError("joint distribution needs at least one sample")
    P = z.T @ z_pair / z.shape[0]
    P = (P + P.T) / 2.0
    return P / P.sum()


def _check_joint(P: np.ndarray):
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("joint matrix must be square")
    if np.any(P < 0) or not np.isfinite(P).all() or abs(P.sum() - 1.0) > 1e-6:
        raise ValueError("joint matrix must be non-negative and sum to 1")


def iic_loss(P: np.ndarray, lam: float = 1.0) -> float:
    """``sum_ij P_ij (lam*ln(P_i P_j) - ln P_ij)``; equals ``-I(P)`` at ``lam=1``."""
    P = np.asarray(P, dtype=np.float64)
    _check_joint(P)
    if lam < 1.0:
        raise ValueError("marginal weight must be >= 1")
    # exactly rounded sums make the value independent of row/column order
    Pc = np.maximum(P, PROB_FLOOR)
    pi = np.maximum([math.fsum(row) for row in P], PROB_FLOOR)
    pj = np.maximum([math.fsum(col) for col in P.T], PROB_FLOOR)
    terms = P * (lam * (np.log(pi)[:, None] + np.log(pj)[None, :]) - np.log(Pc))
    return math.fsum(terms.ravel())


def _loss_grad_joint(P: np.ndarray, lam: float) -> np.ndarray:
    Pc = np.maximum(P, PROB_FLOOR)
    pi = np.maximum(P.sum(axis=1), PROB_FLOOR)
    pj = np.maximum(P.sum(axis=0), PROB_FLOOR)
    row = (P.sum(axis=1) / pi)[:, None]
    col = (P.sum(axis=0) / pj)[None, :]
    return lam * (np.log(pi)[:, None] + np.log(pj)[None, :] + row + col) - np.log(Pc) - P / Pc


def _softmax_backward(z: np.ndarray, dz: np.ndarray) -> np.ndarray:
    return z * (dz - np.sum(dz * z, axis=1, keepdims=True))


def head_loss_and_grad(head: ClusterHead, x: np.ndarray, x_pair: np.ndarray, lam: float = 1.0):
    """IIC loss of a head on a fixed pair batch with gradients w.r.t. ``A`` and ``bias``."""
    n = x.shape[0]
    z = head_forward(head, x)
    zp = head_forward(head, x_pair)
    M = z.T @ zp / n
    total = M.sum()
    P = (M + M.T) / (2.0 * total)
    loss = iic_loss(P, lam)
    G = _loss_grad_joint(P, lam)
    Gs = (G + G.T) / 2.0
    # d/dM of P = sym(M)/sum(M); the sum term vanishes for simplex rows but is kept for exactness
    dM = (Gs - np.sum(Gs * P)) / total
    dz = zp @ dM.T / n
    dzp = z @ dM / n
    dlog = _softmax_backward(z, dz)
    dlogp = _softmax_backward(zp, dzp)
    dA = x.T @ dlog + x_pair.T @ dlogp
    dbias = dlog.sum(axis=0) + dlogp.sum(axis=0)
    return loss, dA, dbias


def _adam_train(head: ClusterHead, features: np.ndarray, cfg: HeadConfig, rng: np.random.Generator):
    A, bias = head.A.copy(), head.bias.copy()
    mA, vA = np.zeros_like(A), np.zeros_like(A)
    mb, vb = np.zeros_like(bias), np.zeros_like(bias)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    trace = []
    n = features.shape[0]
    batches = max(1, -(-n // cfg.batch))
    epochs = max(cfg.epochs, -(-cfg.min_steps // batches)) if cfg.epochs > 0 else 0
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            if len(idx) < 2:
                continue
            x = features[idx]
            xp = perturb(x, cfg.sigma, rng)
            loss, dA, db = head_loss_and_grad(replace(head, A=A, bias=bias), x, xp, cfg.lam)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite IIC loss")
            step += 1
            mA = beta1 * mA + (1 - beta1) * dA
            vA = beta2 * vA + (1 - beta2) * dA ** 2
            mb = beta1 * mb + (1 - beta1) * db
            vb = beta2 * vb + (1 - beta2) * db ** 2
            corr1, corr2 = 1 - beta1 ** step, 1 - beta2 ** step
            A = A - cfg.lr * (mA / corr1) / (np.sqrt(vA / corr2) + eps)
            bias = bias - cfg.lr * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
            total += loss * len(idx)
            count += len(idx)
        trace.append(total / max(count, 1))
    return replace(head, A=A, bias=bias), trace


def evaluation_loss(head: ClusterHead, features: np.ndarray, cfg: HeadConfig, seed: int) -> float:
    """Full-batch IIC loss with a fixed perturbation draw."""
    rng = np.random.default_rng(seed)
    pair = perturb(features, cfg.sigma, rng)
    return iic_loss(joint_distribution(head_forward(head, features), head_forward(head, pair)), cfg.lam)


def train_head(head: ClusterHead, features: np.ndarray, cfg: HeadConfig):
    """Adam descent on the IIC loss; returns ``(head, loss_trace)``.

    With ``n_subheads > 1`` extra heads are initialized from ``seed + i`` and
    the one with the lowest final full-batch loss is kept.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < head.k:
        raise ValueError(f"need at least k={head.k} samples, got {features.shape[0]}")
    best = None
    for i in range(max(cfg.n_subheads, 1)):
        start = head if i == 0 else init_head(features.shape[1], head.k, cfg.seed + i, cfg.init_scale, head.node_id)
        rng = np.random.default_rng([cfg.seed, i])
        trained, trace = _adam_train(start, features, cfg, rng)
        final = evaluation_loss(trained, features, cfg, cfg.seed)
        if best is None or final < best[0]:
            best = (final, trained, trace)
    _, trained, trace = best
    counts = np.bincount(hard_assign(trained, features), minlength=trained.k)
    if np.count_nonzero(counts) <= 1:
        warnings.warn(f"clustering head {trained.node_id} collapsed to a single cluster", RuntimeWarning)
    return trained, trace


def hard_assign(head: ClusterHead, features: np.ndarray) -> np.ndarray:
    """Argmax cluster per sample; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(head_forward(head, features), axis=1)


def build_tree(features: np.ndarray, cfg: TreeConfig) -> ClusterTree:
    """Train heads top-down; each child sees only its parent cluster's samples."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("build_tree needs a non-empty (N, D) feature matrix")
    if cfg.max_depth < 1:
        raise ValueError("max_depth must be >= 1")

    def grow(path: tuple[int, ...], index: np.ndarray) -> TreeNode:
        seed = int(np.random.SeedSequence([cfg.head.seed, len(path), *path]).generate_state(1)[0])
        head_cfg = replace(cfg.head, seed=seed)
        head = init_head(features.shape[1], cfg.k, seed, cfg.head.init_scale, node_name(path))
        subset = features[index]
        head, trace = train_head(head, subset, head_cfg)
        node = TreeNode(head, path, len(index), loss_trace=trace, sample_index=index)
        if len(path) + 1 < cfg.max_depth:
            assigned = hard_assign(head, subset)
            for cluster in range(cfg.k):
                child_index = index[assigned == cluster]
                if len(child_index) >= max(cfg.min_node_samples, cfg.k):
                    node.children[cluster] = grow(path + (cluster,), child_index)
        return node

    root = grow((), np.arange(features.shape[0]))
    return ClusterTree(root, cfg.k, cfg.max_depth, cfg.min_node_samples)


def assign_paths(tree: ClusterTree, features: np.ndarray) -> np.ndarray:
    """Per-sample cluster path, shape ``(N, max_depth)``, ``NO_LABEL`` below the stopping level."""
    features = np.asarray(features, dtype=np.float64)
    paths = np.full((features.shape[0], tree.max_depth), NO_LABEL, dtype=np.int64)

    def descend(node: TreeNode, index: np.ndarray):
        if len(index) == 0:
            return
        assigned = hard_assign(node.head, features[index])
        paths[index, node.depth] = assigned
        for cluster, child in node.children.items():
            descend(child, index[assigned == cluster])

    descend(tree.root, np.arange(features.shape[0]))
    return paths


def leaf_labels(paths: np.ndarray, k: int) -> np.ndarray:
    depth = paths.shape[1]
    weights = k ** np.arange(depth - 1, -1, -1, dtype=np.int64)
    return np.maximum(paths, 0) @ weights


def assign_labels(tree: ClusterTree, features: np.ndarray, coords: np.ndarray,
                  shape: tuple[int, int]) -> HierarchicalLabelMap:
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) != len(features):
        raise ValueError("features and coords differ in length")
    paths = assign_paths(tree, features)
    leaf = np.full(shape, NO_LABEL, dtype=np.int64)
    path_grid = np.full(tuple(shape) + (tree.max_depth,), NO_LABEL, dtype=np.int64)
    if len(coords):
        leaf[coords[:, 0], coords[:, 1]] = leaf_labels(paths, tree.k)
        path_grid[coords[:, 0], coords[:, 1]] = paths
    return HierarchicalLabelMap(leaf, path_grid, tree.k)


# --- checkpoints ------------------------------------------------------------

def save_tree(tree: ClusterTree, directory, head_cfg: HeadConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes = []
    for node in tree.nodes():
        name = node.head.node_id
        nodes.append({
            "id": name,
            "path": list(node.path),
            "subset_size": int(node.subset_size),
            "children": {str(c): child.head.node_id for c, child in sorted(node.children.items())},
        })
        (directory / f"node_{name}_A.bin").write_bytes(np.ascontiguousarray(node.head.A, dtype="<f4").tobytes())
        (directory / f"node_{name}_bias.bin").write_bytes(np.ascontiguousarray(node.head.bias, dtype="<f4").tobytes())
    manifest = {
        "format": "sitfuse-tree/1",
        "k": tree.k,
        "max_depth": tree.max_depth,
        "min_node_samples": tree.min_node_samples,
        "latent_dim": int(tree.root.head.A.shape[0]),
        "nodes": nodes,
    }
    if head_cfg is not None:
        manifest["head_config"] = asdict(head_cfg)
    (directory / "tree_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_tree(directory) -> ClusterTree:
    directory = Path(directory)
    manifest = json.loads((directory / "tree_manifest.json").read_text())
    k, dim = manifest["k"], manifest["latent_dim"]
    by_id = {}
    for entry in manifest["nodes"]:
        name = entry["id"]
        A = np.frombuffer((directory / f"node_{name}_A.bin").read_bytes(), dtype="<f4")
        b = np.frombuffer((directory / f"node_{name}_bias.bin").read_bytes(), dtype="<f4")
        if A.size != dim * k or b.size != k:
            raise ValueError(f"node {name} parameters have the wrong size")
        head = ClusterHead(A.reshape(dim, k).astype(np.float64), b.astype(np.float64), name)
        by_id[name] = (TreeNode(head, tuple(entry["path"]), entry["subset_size"]), entry["children"])
    for node, children in by_id.values():
        node.children = {int(c): by_id[cid][0] for c, cid in children.items()}
    return ClusterTree(by_id["root"][0], k, manifest["max_depth"], manifest["min_node_samples"])
