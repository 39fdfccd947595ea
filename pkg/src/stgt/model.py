"""The spatio-temporal graph transformer and its focal loss.

Per (substation, day) sample the network

1. embeds each of the ``L`` window days with a linear map plus a learnable
   positional vector,
2. runs two pre-norm transformer encoder blocks over the window and keeps the
   last day's output as the temporal summary,
3. adds the substation's node embedding and attends over the substations of
   the same day, restricted by the proximity adjacency,
4. maps the static vector through a two-layer MLP and concatenates it with
   the spatial output,
5. applies a three-layer head and a sigmoid.

Row-vector convention throughout: a linear layer is ``x @ W`` with ``W`` of
shape ``(in, out)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError

CHECKPOINT_VERSION = 1
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    n_temporal: int = 24
    n_static: int = 15
    n_nodes: int = 10
    d: int = 64
    heads: int = 8
    lookback: int = 14
    n_blocks: int = 2
    ff_mult: int = 4
    static_hidden: int = 64
    head_hidden: tuple = (64, 32)
    mask_mode: str = "post_softmax"
    spatial: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValidationError("d must be divisible by heads")
        if self.mask_mode not in ("post_softmax", "pre_softmax"):
            raise ValidationError(f"unknown mask_mode {self.mask_mode!r}")
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    gamma: float = 2.0
    positive_ratio: float = 0.05

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if not 0 < self.positive_ratio < 1:
            raise ValidationError("positive_ratio must lie in (0, 1)")

    @property
    def beta(self) -> float:
        r = self.positive_ratio
        return (1.0 - r) / r


class ModelParams(dict):
    """Ordered ``name -> Tensor`` map of every learnable array."""

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def copy_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.items()}

    def load_arrays(self, arrays):
        for k, v in self.items():
            v.data = np.array(arrays[k], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(v.data.size for v in self.values())


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.d
    p = ModelParams()

    def weight(name, fan_in, fan_out):
        p[name] = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True, name=name)

    def const(name, shape, value=0.0):
        p[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

    weight("embed.w", cfg.n_temporal, d)
    const("embed.pos", (cfg.lookback, d))
    for b in range(cfg.n_blocks):
        pre = f"block{b}."
        const(pre + "ln1.g", (1, d), 1.0)
        const(pre + "ln1.b", (1, d))
        for m in ("wq", "wk", "wv", "wo"):
            weight(pre + m, d, d)
        const(pre + "ln2.g", (1, d), 1.0)
        const(pre + "ln2.b", (1, d))
        weight(pre + "ff1.w", d, cfg.ff_mult * d)
        const(pre + "ff1.b", (1, cfg.ff_mult * d))
        weight(pre + "ff2.w", cfg.ff_mult * d, d)
        const(pre + "ff2.b", (1, d))
    const("node_emb", (cfg.n_nodes, d))
    weight("static.w1", cfg.n_static, cfg.static_hidden)
    const("static.b1", (1, cfg.static_hidden))
    weight("static.w2", cfg.static_hidden, d // 2)
    const("static.b2", (1, d // 2))
    widths = (d + d // 2,) + cfg.head_hidden + (1,)
    for i in range(len(widths) - 1):
        weight(f"head.w{i + 1}", widths[i], widths[i + 1])
        const(f"head.b{i + 1}", (1, widths[i + 1]))
    return p


# --- forward pieces ---------------------------------------------------------

def embed_inputs(params: ModelParams, windows: np.ndarray) -> Tensor:
    """``(N, L, F_x)`` windows to ``(N*L, d)`` embeddings ``x_k W + p_k``."""
    windows = np.asarray(windows, dtype=np.float64)
    pos = params["embed.pos"]
    L = pos.shape[0]
    if windows.ndim != 3 or windows.shape[1] != L:
        raise ShapeError(f"expected windows of shape (N, {L}, F), got {windows.shape}")
    n = windows.shape[0]
    x = Tensor(windows.reshape(n * L, windows.shape[2]))
    return ad.add(ad.matmul(x, params["embed.w"]), ad.tile_rows(pos, n))


def _linear(x, params, name):
    return ad.add(ad.matmul(x, params[name + ".w"]), params[name + ".b"])


def temporal_encoder(params: ModelParams, H: Tensor, n_seq: int, heads: int = 8,
                     keep_weights: bool = False):
    """Pre-norm encoder blocks over each length-L sequence; returns the last step.

    Returns ``(h_star, weights)`` where ``weights`` lists each block's
    ``(N, heads, L, L)`` attention weights when ``keep_weights`` is set.
    """
    L = H.shape[0] // n_seq
    index = np.arange(n_seq * L).reshape(n_seq, L)
    weights = []
    b = 0
    while f"block{b}.wq" in params:
        pre = f"block{b}."
        x = ad.layer_norm(H, params[pre + "ln1.g"], params[pre + "ln1.b"])
        att = ad.grouped_attention(ad.matmul(x, params[pre + "wq"]), ad.matmul(x, params[pre + "wk"]),
                                   ad.matmul(x, params[pre + "wv"]), index, heads=heads)
        if keep_weights:
            weights.append(att.extras["weights"])
        H = ad.add(H, ad.matmul(att, params[pre + "wo"]))
        x = ad.layer_norm(H, params[pre + "ln2.g"], params[pre + "ln2.b"])
        H = ad.add(H, _linear(ad.relu(_linear(x, params, pre + "ff1")), params, pre + "ff2"))
        b += 1
    last = np.arange(n_seq) * L + (L - 1)
    return ad.take_rows(H, last), weights


def check_group_masks(index, mask):
    """Validate per-group adjacency blocks: 0/1, symmetric, unit diagonal on members."""
    index = np.asarray(index)
    mask = np.asarray(mask)
    G, S = index.shape
    if mask.shape != (G, S, S):
        raise ShapeError(f"mask shape {mask.shape} does not match groups {(G, S)}")
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("adjacency blocks must contain only 0/1")
    if not np.array_equal(mask, mask.transpose(0, 2, 1)):
        raise ValidationError("adjacency blocks must be symmetric")
    diag = np.diagonal(mask, axis1=1, axis2=2)
    if np.any(diag[index >= 0] != 1):
        raise ValidationError("adjacency blocks need a unit diagonal")


def spatial_attention(h_star: Tensor, node_rows: Tensor, index, mask, mode: str = "post_softmax") -> Tensor:
    """Single-head attention over each day-group with ``q = k = v = h* + e_s``.

    Scores are scaled by ``1/sqrt(d)``. ``post_softmax`` multiplies the softmax
    weights by the adjacency block; ``pre_softmax`` removes non-adjacent pairs
    before normalising.
    """
    check_group_masks(index, mask)
    x = ad.add(h_star, node_rows)
    d = x.shape[1]
    return ad.grouped_attention(x, x, x, index, heads=1, mask=mask, mode=mode, scale_by=1.0 / np.sqrt(d))


def static_mlp(params: ModelParams, z) -> Tensor:
    z = ad.as_tensor(z)
    w1 = params["static.w1"]
    if z.shape[1] != w1.shape[0]:
        raise ShapeError(f"static vector has {z.shape[1]} features, model expects {w1.shape[0]}")
    hidden = ad.relu(ad.add(ad.matmul(z, w1), params["static.b1"]))
    return ad.add(ad.matmul(hidden, params["static.w2"]), params["static.b2"])


def fuse_and_classify(params: ModelParams, g: Tensor, z_star: Tensor) -> Tensor:
    """Concatenate ``[g; z*]`` and map it to a probability through the head."""
    f = ad.concat_cols(g, z_star)
    w1 = params["head.w1"]
    if f.shape[1] != w1.shape[0]:
        raise ShapeError(f"fused vector has {f.shape[1]} features, head expects {w1.shape[0]}")
    x = f
    i = 1
    while f"head.w{i + 1}" in params:
        x = ad.relu(ad.add(ad.matmul(x, params[f"head.w{i}"]), params[f"head.b{i}"]))
        i += 1
    logit = ad.add(ad.matmul(x, params[f"head.w{i}"]), params[f"head.b{i}"])
    return ad.sigmoid(logit)


def focal_loss(p, y, cfg: LossConfig, beta: float | None = None) -> Tensor:
    """Mean of ``-alpha (1 - p_t)^gamma log(p_t)``, positives multiplied by ``beta``.

    ``p`` is a column of probabilities, clamped to ``[1e-7, 1 - 1e-7]``;
    ``beta`` defaults to ``(1 - r) / r`` from ``cfg``.
    """
    p = ad.as_tensor(p)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ")
    beta = cfg.beta if beta is None else float(beta)
    a, gam = cfg.alpha, cfg.gamma
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)
    pos = y > 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    w = np.where(pos, beta, 1.0)
    q = 1.0 - pt
    log_pt = np.log(pt)
    per = -a * q ** gam * log_pt * w
    n = per.shape[0]

    def backward(g):
        qg1 = q ** (gam - 1.0) if gam != 0 else np.zeros_like(q)
        dpt = -a * w * (-gam * qg1 * log_pt + q ** gam / pt)
        dp = np.where(pos, dpt, -dpt) * inside
        return (g[0, 0] / n * dp,)

    return ad.custom(np.array([[per.mean()]]), (p,), backward)


# --- batches and the full forward pass --------------------------------------

@dataclass
class Batch:
    """Rows of one forward pass plus the day-groups spatial attention runs over.

    ``index``/``mask`` describe the groups (see :func:`grouped_attention`).
    ``targets`` are positions in the flattened valid entries of ``index`` whose
    prediction is wanted, with ``labels`` aligned to them.
    """
    windows: np.ndarray
    static: np.ndarray
    node: np.ndarray
    index: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    labels: np.ndarray = field(default=None)

    @property
    def members(self) -> np.ndarray:
        return self.index[self.index >= 0]


def forward(params: ModelParams, batch: Batch, cfg: ModelConfig, keep_weights: bool = False):
    """Probabilities (``T x 1``) for ``batch.targets``; optional attention weights."""
    n = batch.windows.shape[0]
    H = embed_inputs(params, batch.windows)
    h_star, t_weights = temporal_encoder(params, H, n, heads=cfg.heads, keep_weights=keep_weights)
    e = ad.take_rows(params["node_emb"], batch.node)
    mask, mode = batch.mask, cfg.mask_mode
    if not cfg.spatial:
        # identity blocks with pre-softmax masking: each row attends only to itself
        mask = np.broadcast_to(np.eye(mask.shape[1]), mask.shape).copy()
        mode = "pre_softmax"
    g = spatial_attention(h_star, e, batch.index, mask, mode=mode)
    z_star = static_mlp(params, batch.static)
    members = batch.members
    targets = np.asarray(batch.targets, dtype=np.int64)
    g_t = ad.take_rows(g, targets)
    z_t = ad.take_rows(z_star, members[targets])
    p = fuse_and_classify(params, g_t, z_t)
    if keep_weights:
        return p, {"temporal": t_weights, "spatial": g.extras["weights"]}
    return p


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, meta=None, arrays=None):
    """Write parameters (and extra arrays) to an ``.npz`` with a JSON header."""
    header = {"version": CHECKPOINT_VERSION, "model": asdict(cfg), "meta": meta or {},
              "shapes": {k: list(v.shape) for k, v in params.items()}}
    payload = {f"param/{k}": v.data for k, v in params.items()}
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)
    payload["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns ``(params, cfg, meta, extra_arrays)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig(**header["model"])
        params = ModelParams()
        for k, shape in header["shapes"].items():
            arr = z[f"param/{k}"]
            if list(arr.shape) != shape:
                raise ValidationError(f"{path}: parameter {k} has shape {arr.shape}, header says {shape}")
            params[k] = Tensor(arr.copy(), requires_grad=True, name=k)
        extra = {k[len("extra/"):]: z[k].copy() for k in z.files if k.startswith("extra/")}
    return params, cfg, header["meta"], extra
