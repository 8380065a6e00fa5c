"""A small vision transformer whose blocks carry channel-selectable square MLPs."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import ArgumentError, ConfigError, DimensionError, NumericError
from .numerics import Rng
from .selection import ChannelSelector, gumbel_pair, harden, soft_cost_tensor, soft_mask_tensor

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    image_side: int = 16
    channels: int = 1
    patch: int = 4
    D: int = 64
    heads: int = 4
    depth: int = 4
    mlp_layers: int = 2
    C: int = 4
    pos_embed: bool = False
    d_min: int = 8
    alpha_init: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_side % self.patch:
            raise ConfigError(f"image_side {self.image_side} is not divisible by patch {self.patch}")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.depth < 1 or self.mlp_layers < 1 or self.C < 2:
            raise ConfigError("depth and mlp_layers must be >= 1, C >= 2")

    @property
    def tokens(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def d_feat(self) -> int:
        return self.D

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patchify(image, patch: int) -> np.ndarray:
    """Split ``H x W x ch`` (or a batch ``B x H x W x ch``) into raster-ordered patches.

    Each patch is flattened channel-last, giving ``N x patch^2*ch`` rows.
    """
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if x.ndim == 2:
        x, single = x[:, :, None], True
    if single:
        x = x[None]
    B, H, W, ch = x.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} is not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    out = x.reshape(B, gh, patch, gw, patch, ch).transpose(0, 1, 3, 2, 4, 5).reshape(B, gh * gw, patch * patch * ch)
    return out[0] if single else out


class KcrNet:
    """Parameters live in ``params`` (name -> array).

    A supernet has full-width MLP weights and per-block ``alpha``. A pruned
    net stores, per block, the kept channel indices ``keep[j]`` and MLP weights
    of shape ``D~ x D~``; it has no architecture parameters.
    """

    def __init__(self, cfg: ModelConfig, params: dict, keep=None, tau: float = 4.5):
        self.cfg = cfg
        self.params = params
        self.keep = keep
        self.tau = float(tau)

    @property
    def pruned(self) -> bool:
        return self.keep is not None

    def alpha_names(self):
        return [f"blocks.{j}.alpha" for j in range(self.cfg.depth)] if not self.pruned else []

    def weight_names(self):
        skip = set(self.alpha_names())
        return [k for k in self.params if k not in skip]

    def selector(self, j: int) -> ChannelSelector:
        return ChannelSelector(self.params[f"blocks.{j}.alpha"], tau=self.tau, d_min=self.cfg.d_min)

    def selectors(self):
        return [self.selector(j) for j in range(self.cfg.depth)]

    def hard_masks(self):
        D = self.cfg.D
        if self.pruned:
            out = []
            for idx in self.keep:
                g = np.zeros(D, dtype=np.int64)
                g[idx] = 1
                out.append(g)
            return out
        return [harden(sel)[0] for sel in self.selectors()]

    def copy(self) -> "KcrNet":
        keep = None if self.keep is None else [k.copy() for k in self.keep]
        return KcrNet(self.cfg, {k: v.copy() for k, v in self.params.items()}, keep, self.tau)


def _uniform(rng: Rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return (rng.uniform(shape) * 2.0 - 1.0) * bound


def init_net(cfg: ModelConfig, rng: Rng, keep=None) -> KcrNet:
    """Fan-in uniform init for the backbone, zero classifier.

    ``keep`` (one index array per block) builds a pruned net with
    ``D~ x D~`` MLP layers; otherwise a full supernet with ``alpha``.
    """
    D, P = cfg.D, cfg.patch_dim
    p = {}
    p["patch_embed.w"] = _uniform(rng, P, (P, D))
    p["patch_embed.b"] = np.zeros(D)
    if cfg.pos_embed:
        p["pos"] = rng.normal((cfg.tokens, D)) * 0.02
    for j in range(cfg.depth):
        pre = f"blocks.{j}."
        p[pre + "ln1.g"] = np.ones(D)
        p[pre + "ln1.b"] = np.zeros(D)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = _uniform(rng, D, (D, D))
            p[pre + "attn.b" + name[1]] = np.zeros(D)
        p[pre + "ln2.g"] = np.ones(D)
        p[pre + "ln2.b"] = np.zeros(D)
        width = D if keep is None else len(keep[j])
        for k in range(cfg.mlp_layers):
            p[pre + f"mlp.{k}.w"] = _uniform(rng, width, (width, width))
            p[pre + f"mlp.{k}.b"] = np.zeros(width)
        if keep is None:
            p[pre + "alpha"] = np.full(D, float(cfg.alpha_init))
    p["head.w"] = np.zeros((D, cfg.C))
    keep = None if keep is None else [np.asarray(k, dtype=np.intp) for k in keep]
    return KcrNet(cfg, p, keep)


def init_pruned(cfg: ModelConfig, masks, rng: Rng) -> KcrNet:
    """Fresh network with the architecture given by 0/1 masks (one per block)."""
    keep = [np.flatnonzero(np.asarray(g)) for g in masks]
    if len(keep) != cfg.depth:
        raise DimensionError(f"{len(keep)} masks for depth {cfg.depth}")
    return init_net(cfg, rng, keep=keep)


def gather_supernet(net: KcrNet) -> KcrNet:
    """Physically prune a supernet at its hardened masks, keeping its weights."""
    if net.pruned:
        return net.copy()
    keep = [np.flatnonzero(g) for g in net.hard_masks()]
    p = {k: v.copy() for k, v in net.params.items() if not k.endswith(".alpha")}
    for j, idx in enumerate(keep):
        for k in range(net.cfg.mlp_layers):
            name = f"blocks.{j}.mlp.{k}."
            p[name + "w"] = net.params[name + "w"][np.ix_(idx, idx)].copy()
            p[name + "b"] = net.params[name + "b"][idx].copy()
    return KcrNet(net.cfg, p, keep, net.tau)


@dataclass
class Graph:
    """Result of one forward pass: output tensors plus the leaf tensors."""

    logits: Tensor
    features: Tensor
    leaves: dict
    masks: list = field(default_factory=list)


def _attention(h: Tensor, t: dict, pre: str, cfg: ModelConfig) -> Tensor:
    B, N, D = h.shape
    H = cfg.heads
    dh = D // H

    def heads(x):
        return x.reshape(B, N, H, dh).transpose(0, 2, 1, 3)

    q = heads(h @ t[pre + "attn.wq"] + t[pre + "attn.bq"])
    k = heads(h @ t[pre + "attn.wk"] + t[pre + "attn.bk"])
    v = heads(h @ t[pre + "attn.wv"] + t[pre + "attn.bv"])
    att = ((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))).softmax(axis=-1)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    return o @ t[pre + "attn.wo"] + t[pre + "attn.bo"]


def attention_weights(net: KcrNet, tokens, block: int = 0) -> np.ndarray:
    """Softmax attention matrices of one block for already-embedded tokens."""
    t = {k: Tensor(v) for k, v in net.params.items()}
    pre = f"blocks.{block}."
    h = Tensor(tokens).layer_norm(t[pre + "ln1.g"], t[pre + "ln1.b"], LN_EPS)
    B, N, D = h.shape
    H = net.cfg.heads
    dh = D // H
    q = (h @ t[pre + "attn.wq"] + t[pre + "attn.bq"]).data.reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    k = (h @ t[pre + "attn.wk"] + t[pre + "attn.bk"]).data.reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    return Tensor(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)).softmax(axis=-1).data


def _embed(net: KcrNet, images, t: dict) -> Tensor:
    cfg = net.cfg
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[0] == 0:
        raise DimensionError(f"expected a non-empty image batch, got shape {x.shape}")
    z = Tensor(patchify(x, cfg.patch)) @ t["patch_embed.w"] + t["patch_embed.b"]
    if cfg.pos_embed:
        z = z + t["pos"]
    return z


def block_forward(net: KcrNet, x: Tensor, t: dict, j: int, mode: str, mask=None) -> Tensor:
    cfg = net.cfg
    pre = f"blocks.{j}."
    x = x + _attention(x.layer_norm(t[pre + "ln1.g"], t[pre + "ln1.b"], LN_EPS), t, pre, cfg)
    u = x.layer_norm(t[pre + "ln2.g"], t[pre + "ln2.b"], LN_EPS)
    L = cfg.mlp_layers
    if mode == "hard":
        idx = net.keep[j] if net.pruned else np.flatnonzero(harden(net.selector(j))[0])
        u = u.take(idx, axis=-1)
        for k in range(L):
            w, b = t[pre + f"mlp.{k}.w"], t[pre + f"mlp.{k}.b"]
            if not net.pruned:
                w, b = w.take(idx, axis=0).take(idx, axis=1), b.take(idx, axis=0)
            u = u @ w + b
            if k < L - 1:
                u = u.gelu()
        u = u.scatter(idx, cfg.D, axis=-1)
    else:
        if net.pruned:
            raise ArgumentError(f"mode {mode!r} needs a supernet; pruned nets run in hard mode")
        if mask is not None:
            u = u * mask
        for k in range(L):
            u = u @ t[pre + f"mlp.{k}.w"] + t[pre + f"mlp.{k}.b"]
            if mask is not None:
                u = u * mask
            if k < L - 1:
                u = u.gelu()
    return x + u


def build_graph(net: KcrNet, images, mode="hard", rng: Rng | None = None, noise=None, track=False,
                masks=None) -> Graph:
    """Forward pass returning tensors.

    ``mode`` is ``"soft"`` (Gumbel masks, needs ``rng`` or ``noise``),
    ``"hard"`` (gathered channels) or ``"mask-free"``. ``masks`` (one vector
    per block) overrides soft sampling with fixed masks.
    """
    if mode not in ("soft", "hard", "mask-free"):
        raise ArgumentError(f"unknown forward mode {mode!r}")
    if mode == "soft" and rng is None and noise is None and masks is None:
        raise ArgumentError("soft mode requires an rng")
    t = {k: Tensor(v, requires_grad=track, name=k) for k, v in net.params.items()}
    x = _embed(net, images, t)
    used = []
    for j in range(net.cfg.depth):
        mask = None
        if mode == "soft":
            if masks is not None:
                mask = Tensor(np.asarray(masks[j], dtype=np.float64))
            else:
                eps1, eps2 = noise[j] if noise is not None else gumbel_pair(net.cfg.D, rng)
                mask = soft_mask_tensor(t[f"blocks.{j}.alpha"], net.tau, eps1, eps2)
            used.append(mask.data)
        x = block_forward(net, x, t, j, mode, mask)
    feats = x.mean(axis=1)
    logits = feats @ t["head.w"]
    return Graph(logits, feats, t, used)


def forward(net: KcrNet, images, mode="hard", rng: Rng | None = None, noise=None, masks=None):
    """Return ``(logits, features)`` as arrays."""
    g = build_graph(net, images, mode=mode, rng=rng, noise=noise, masks=masks)
    return g.logits.data, g.features.data


def _check_labels(labels, C):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ArgumentError(f"labels must lie in [0, {C})")
    return labels


def loss_ce(logits, labels) -> float:
    """Mean cross-entropy with max-subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def ce_tensor(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logits.log_softmax(axis=1) * onehot).sum() * (1.0 / len(labels))


def kcr_tensor(features: Tensor, u_rows, P_r, n: int = 1) -> Tensor:
    """Batch KCR term ``(1/(n B)) sum_i (|f_i|^2 - <u_i, f_i P_r>)`` on live features.

    Both parts are entries of the normalized gram ``K/n``, averaged over the batch.
    """
    B = features.shape[0]
    proj = features @ Tensor(P_r)
    return ((features * features).sum() - (proj * Tensor(u_rows)).sum()) * (1.0 / (n * B))


@dataclass
class LossSpec:
    """Which terms enter the composite loss.

    ``kcr`` is ``(u_rows, P_r, n)`` for the batch; ``cost_weight`` multiplies
    ``log soft_cost`` over the supernet's alphas.
    """

    mode: str = "hard"
    rng: Rng | None = None
    noise: list | None = None
    masks: list | None = None
    kcr_weight: float = 0.0
    kcr: tuple | None = None
    cost_weight: float = 0.0


def backward(net: KcrNet, images, labels, spec: LossSpec | None = None):
    """Reverse-mode gradients of ``CE + kcr_weight*KCR + cost_weight*log(cost)``.

    Returns ``(grads, parts)``: a name -> array bundle mirroring ``net.params``
    and the scalar value of each loss term.
    """
    spec = spec or LossSpec()
    g = build_graph(net, images, mode=spec.mode, rng=spec.rng, noise=spec.noise, masks=spec.masks, track=True)
    ce = ce_tensor(g.logits, labels)
    total = ce
    parts = {"ce": float(ce.data), "kcr": 0.0, "cost": 0.0}
    if spec.kcr_weight and spec.kcr is not None:
        kcr = kcr_tensor(g.features, *spec.kcr)
        parts["kcr"] = float(kcr.data)
        total = total + kcr * spec.kcr_weight
    if spec.cost_weight and not net.pruned:
        alphas = [g.leaves[n] for n in net.alpha_names()]
        cost = soft_cost_tensor([net.cfg.mlp_layers] * net.cfg.depth, alphas, [net.tau] * net.cfg.depth,
                                [sel.d_min for sel in net.selectors()])
        term = cost.log() * spec.cost_weight
        parts["cost"] = float(term.data)
        total = total + term
    for name, v in parts.items():
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite")
    total.backward()
    grads = {}
    for name, leaf in g.leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    parts["total"] = float(total.data)
    return grads, parts


def sgd_step(net: KcrNet, grads: dict, lr: float, weight_decay: float = 0.0, names=None):
    for name in names or grads:
        p = net.params[name]
        p -= lr * grads[name] + lr * weight_decay * p


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrix-shaped params only."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, params: dict, grads: dict, lr: float, names=None):
        for name in names if names is not None else sorted(grads):
            p = params[name]
            g = grads[name]
            m, v, t = self.state.get(name, (np.zeros_like(p), np.zeros_like(p), 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.state[name] = (m, v, t)
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            if self.weight_decay and p.ndim >= 2:
                p -= lr * self.weight_decay * p
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def adamw_step(net: KcrNet, grads: dict, state: AdamW, lr: float, names=None):
    state.step(net.params, grads, lr, names)


def extract_features(net: KcrNet, images, batch: int = 256) -> np.ndarray:
    """Hard-mode features for every image, rows in dataset order."""
    images = np.asarray(images)
    out = [forward(net, images[s: s + batch], mode="hard")[1] for s in range(0, len(images), batch)]
    return np.concatenate(out, axis=0)


def predict(net: KcrNet, images, batch: int = 256) -> np.ndarray:
    images = np.asarray(images)
    return np.concatenate([forward(net, images[s: s + batch], mode="hard")[0]
                           for s in range(0, len(images), batch)], axis=0)


# checkpoints -------------------------------------------------------------

def save_checkpoint(net: KcrNet, path, seed=None, extra=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    tensors, chunks, offset = [], [], 0
    for name in sorted(net.params):
        arr = np.ascontiguousarray(net.params[name], dtype="<f8")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float64-le", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "kcrlab-checkpoint",
        "version": 1,
        "blob": blob_path.name,
        "config": asdict(net.cfg),
        "seed": seed,
        "tau": net.tau,
        "keep": None if net.keep is None else [[int(i) for i in k] for k in net.keep],
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path, blob_path


def load_checkpoint(path) -> KcrNet:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "kcrlab-checkpoint":
        raise ConfigError(f"{manifest_path} is not a checkpoint manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    params = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    keep = manifest["keep"]
    keep = None if keep is None else [np.asarray(k, dtype=np.intp) for k in keep]
    return KcrNet(ModelConfig.from_dict(manifest["config"]), params, keep, manifest["tau"])
