"""Action policy: a small transformer over [visual || instruction] tokens.

Forward, backward and the AdamW loop are written directly in numpy so the
whole parameter set (including the visual patch projections, which are
part of the weight collection and trained jointly) has exact analytic
gradients. The action head reads a mean-pool of the final layer and
regresses the five action components in normalized units (each component
scaled by its clamp limit); :func:`forward` maps back to physical units
and clamps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Action, ActionLimits, DEFAULT_LIMITS
from .prompting import LinearProjection, ProjectionParams, PromptTensors
from .text import VOCAB, tokenize_instruction  # re-exported tokenizer surface

__all__ = [
    "PolicyConfig", "TrainConfig", "PolicyWeights", "CheckpointError",
    "init_policy", "forward", "loss_mse", "backward", "train",
    "save_checkpoint", "load_checkpoint", "tokenize_instruction", "VOCAB",
]

_LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)

CHECKPOINT_MAGIC = b"STVLA1\x00"


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = len(VOCAB)
    max_tokens: int = 160
    seed: int = 0
    rgb_patch_dim: int = 8 * 8 * 3
    depth_patch_dim: int = 8 * 8

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.layers < 1:
            raise ValueError("at least one layer required")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 1
    epochs: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip; <=0 disables
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class PolicyWeights:
    """Named tensor collection; all tensors float32 unless deliberately cast."""

    config: PolicyConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def projection_params(self) -> ProjectionParams:
        t = self.tensors
        return ProjectionParams(
            rgb=LinearProjection(w=t["proj_rgb.w"], b=t["proj_rgb.b"]),
            depth=LinearProjection(w=t["proj_depth.w"], b=t["proj_depth.b"]),
        )

    def copy(self) -> PolicyWeights:
        return PolicyWeights(self.config,
                             {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> PolicyWeights:
        return PolicyWeights(self.config,
                             {k: v.astype(dtype) for k, v in self.tensors.items()})

    def equals(self, other: PolicyWeights) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k])
                   for k in self.tensors)


def init_policy(cfg: PolicyConfig) -> PolicyWeights:
    """Seeded init: N(0, 0.02) matrices, zero biases, identity layer norms."""
    rng = np.random.default_rng(cfg.seed)
    d, m = cfg.d_model, cfg.d_model * cfg.ffn_mult

    def mat(*shape):
        return (rng.normal(0.0, 0.02, size=shape)).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    t: dict[str, np.ndarray] = {
        "proj_rgb.w": mat(cfg.rgb_patch_dim, d), "proj_rgb.b": zeros(d),
        "proj_depth.w": mat(cfg.depth_patch_dim, d), "proj_depth.b": zeros(d),
        "tok_emb": mat(cfg.vocab, d),
        "pos_emb": mat(cfg.max_tokens, d),
        "seg_emb": mat(2, d),
        "ln_f.g": np.ones(d, dtype=np.float32), "ln_f.b": zeros(d),
        "head.w": mat(d, 5), "head.b": zeros(5),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        t[p + "ln1.g"] = np.ones(d, dtype=np.float32)
        t[p + "ln1.b"] = zeros(d)
        t[p + "attn.wq"] = mat(d, d)
        t[p + "attn.bq"] = zeros(d)
        t[p + "attn.wk"] = mat(d, d)
        t[p + "attn.bk"] = zeros(d)
        t[p + "attn.wv"] = mat(d, d)
        t[p + "attn.bv"] = zeros(d)
        t[p + "attn.wo"] = mat(d, d)
        t[p + "attn.bo"] = zeros(d)
        t[p + "ln2.g"] = np.ones(d, dtype=np.float32)
        t[p + "ln2.b"] = zeros(d)
        t[p + "ffn.w1"] = mat(d, m)
        t[p + "ffn.b1"] = zeros(m)
        t[p + "ffn.w2"] = mat(m, d)
        t[p + "ffn.b2"] = zeros(d)
    return PolicyWeights(cfg, t)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u)), u


def _gelu_bwd(dy, x, u):
    th = np.tanh(u)
    dudx = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dudx)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)  # (H, N, dh)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _forward_cached(tensors: dict, cfg: PolicyConfig, prompt: PromptTensors):
    """Raw 5-vector in normalized action units plus every backward cache."""
    t = tensors
    if prompt.rgb_patches.shape[1] != t["proj_rgb.w"].shape[0]:
        raise ValueError("rgb patch dim does not match weights")
    if prompt.depth_patches.shape[1] != t["proj_depth.w"].shape[0]:
        raise ValueError("depth patch dim does not match weights")
    ids = prompt.instruction_tokens
    if ids.max() >= cfg.vocab or ids.min() < 0:
        raise ValueError("instruction token id outside vocabulary")
    n_vis = prompt.rgb_patches.shape[0]
    n = n_vis + len(ids)
    if n > cfg.max_tokens:
        raise ValueError(f"{n} tokens exceed max_tokens={cfg.max_tokens}")

    e_vis = (prompt.rgb_patches @ t["proj_rgb.w"] + t["proj_rgb.b"]
             + prompt.depth_patches @ t["proj_depth.w"] + t["proj_depth.b"]
             + prompt.depth_pos)
    e_ins = t["tok_emb"][ids]
    x = np.concatenate([e_vis, e_ins], axis=0)
    x = x + t["pos_emb"][:n]
    x = x + np.concatenate([np.repeat(t["seg_emb"][0:1], n_vis, axis=0),
                            np.repeat(t["seg_emb"][1:2], len(ids), axis=0)], axis=0)

    dh = cfg.d_model // cfg.heads
    scale = 1.0 / np.sqrt(dh)
    blocks = []
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        x_in = x
        y1, ln1c = _layer_norm(x_in, t[p + "ln1.g"], t[p + "ln1.b"])
        q = _split_heads(y1 @ t[p + "attn.wq"] + t[p + "attn.bq"], cfg.heads)
        k = _split_heads(y1 @ t[p + "attn.wk"] + t[p + "attn.bk"], cfg.heads)
        v = _split_heads(y1 @ t[p + "attn.wv"] + t[p + "attn.bv"], cfg.heads)
        att = _softmax(np.matmul(q, k.transpose(0, 2, 1)) * scale)
        ctx = _merge_heads(np.matmul(att, v))
        x_mid = x_in + ctx @ t[p + "attn.wo"] + t[p + "attn.bo"]
        y2, ln2c = _layer_norm(x_mid, t[p + "ln2.g"], t[p + "ln2.b"])
        h1 = y2 @ t[p + "ffn.w1"] + t[p + "ffn.b1"]
        g, u = _gelu(h1)
        x = x_mid + g @ t[p + "ffn.w2"] + t[p + "ffn.b2"]
        blocks.append(dict(x_in=x_in, y1=y1, ln1c=ln1c, q=q, k=k, v=v, att=att,
                           ctx=ctx, x_mid=x_mid, y2=y2, ln2c=ln2c, h1=h1, g=g, u=u))
    hf, lnfc = _layer_norm(x, t["ln_f.g"], t["ln_f.b"])
    pooled = hf.mean(axis=0)
    out = pooled @ t["head.w"] + t["head.b"]
    cache = dict(ids=ids, n_vis=n_vis, n=n, blocks=blocks,
                 hf=hf, lnfc=lnfc, pooled=pooled, scale=scale)
    return out, cache


def _backward_cached(tensors: dict, cfg: PolicyConfig, prompt: PromptTensors,
                     cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    t = tensors
    ids, n_vis, n = cache["ids"], cache["n_vis"], cache["n"]
    grads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in t.items()}

    grads["head.w"] = np.outer(cache["pooled"], dout)
    grads["head.b"] = dout.copy()
    dpooled = t["head.w"] @ dout
    dhf = np.broadcast_to(dpooled / n, cache["hf"].shape).copy()
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_bwd(dhf, t["ln_f.g"],
                                                           cache["lnfc"])
    scale = cache["scale"]
    for i in range(cfg.layers - 1, -1, -1):
        p = f"blocks.{i}."
        c = cache["blocks"][i]
        # FFN half
        dffn_out = dx
        grads[p + "ffn.w2"] = c["g"].T @ dffn_out
        grads[p + "ffn.b2"] = dffn_out.sum(axis=0)
        dg = dffn_out @ t[p + "ffn.w2"].T
        dh1 = _gelu_bwd(dg, c["h1"], c["u"])
        grads[p + "ffn.w1"] = c["y2"].T @ dh1
        grads[p + "ffn.b1"] = dh1.sum(axis=0)
        dy2 = dh1 @ t[p + "ffn.w1"].T
        dx_mid, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_bwd(
            dy2, t[p + "ln2.g"], c["ln2c"])
        dx_mid = dx_mid + dx  # residual
        # attention half
        dattn_out = dx_mid
        grads[p + "attn.wo"] = c["ctx"].T @ dattn_out
        grads[p + "attn.bo"] = dattn_out.sum(axis=0)
        dctx = _split_heads(dattn_out @ t[p + "attn.wo"].T, cfg.heads)
        datt = np.matmul(dctx, c["v"].transpose(0, 2, 1))
        dv = np.matmul(c["att"].transpose(0, 2, 1), dctx)
        ds = c["att"] * (datt - (datt * c["att"]).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, c["k"]) * scale
        dk = np.matmul(ds.transpose(0, 2, 1), c["q"]) * scale
        dq_f, dk_f, dv_f = (_merge_heads(a) for a in (dq, dk, dv))
        y1 = c["y1"]
        grads[p + "attn.wq"] = y1.T @ dq_f
        grads[p + "attn.bq"] = dq_f.sum(axis=0)
        grads[p + "attn.wk"] = y1.T @ dk_f
        grads[p + "attn.bk"] = dk_f.sum(axis=0)
        grads[p + "attn.wv"] = y1.T @ dv_f
        grads[p + "attn.bv"] = dv_f.sum(axis=0)
        dy1 = dq_f @ t[p + "attn.wq"].T + dk_f @ t[p + "attn.wk"].T \
            + dv_f @ t[p + "attn.wv"].T
        dx_in, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_bwd(
            dy1, t[p + "ln1.g"], c["ln1c"])
        dx = dx_in + dx_mid  # residual

    grads["pos_emb"][:n] = dx
    grads["seg_emb"][0] = dx[:n_vis].sum(axis=0)
    grads["seg_emb"][1] = dx[n_vis:].sum(axis=0)
    np.add.at(grads["tok_emb"], ids, dx[n_vis:])
    d_vis = dx[:n_vis]
    grads["proj_rgb.w"] = prompt.rgb_patches.T @ d_vis
    grads["proj_rgb.b"] = d_vis.sum(axis=0)
    grads["proj_depth.w"] = prompt.depth_patches.T @ d_vis
    grads["proj_depth.b"] = d_vis.sum(axis=0)
    return grads


def forward(prompt: PromptTensors, weights: PolicyWeights,
            limits: ActionLimits = DEFAULT_LIMITS) -> Action:
    """Deterministic action for a prompt, clamped to the component limits.

    The visual embedding is recomputed from the prompt's cached patch
    matrices with the weights' own projection blocks, so it tracks training
    even when prompts were built offline.
    """
    out, _ = _forward_cached(weights.tensors, weights.config, prompt)
    phys = np.asarray(out, dtype=np.float64) * limits.scales()
    return Action.from_array(phys).clamped(limits)


def loss_mse(pred: Action, target: Action) -> float:
    """Mean squared error over the five action components (physical units)."""
    diff = pred.as_array() - target.as_array()
    return float(np.mean(diff * diff))


def _normalize_target(target: Action, limits: ActionLimits) -> np.ndarray:
    return target.as_array() / limits.scales()


def _loss_and_grads(weights: PolicyWeights, prompt: PromptTensors,
                    target_norm: np.ndarray):
    out, cache = _forward_cached(weights.tensors, weights.config, prompt)
    diff = out - target_norm.astype(out.dtype)
    loss = float(np.mean(diff * diff))
    dout = (2.0 / len(diff)) * diff
    grads = _backward_cached(weights.tensors, weights.config, prompt, cache, dout)
    return loss, grads


def backward(prompt: PromptTensors, weights: PolicyWeights, target: Action,
             limits: ActionLimits = DEFAULT_LIMITS) -> dict[str, np.ndarray]:
    """Gradient of the normalized-unit MSE w.r.t. every weight tensor."""
    _, grads = _loss_and_grads(weights, prompt, _normalize_target(target, limits))
    return grads


def train(dataset: list[tuple[PromptTensors, Action]], cfg: TrainConfig,
          weights: PolicyWeights,
          limits: ActionLimits = DEFAULT_LIMITS) -> tuple[PolicyWeights, list[float]]:
    """AdamW behavior cloning over the dataset in its given, fixed order.

    Returns updated weights and the per-step loss curve. Aborts on a
    non-finite loss. Decoupled weight decay is applied to matrices only.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    w = weights.copy()
    t = w.tensors
    m_state = {k: np.zeros_like(v) for k, v in t.items()}
    v_state = {k: np.zeros_like(v) for k, v in t.items()}
    targets = [_normalize_target(a, limits) for _, a in dataset]
    losses: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        for start in range(0, len(dataset), cfg.batch_size):
            batch = range(start, min(start + cfg.batch_size, len(dataset)))
            loss_sum = 0.0
            grad_acc: dict[str, np.ndarray] | None = None
            for j in batch:
                loss, grads = _loss_and_grads(w, dataset[j][0], targets[j])
                loss_sum += loss
                if grad_acc is None:
                    grad_acc = grads
                else:
                    for k in grad_acc:
                        grad_acc[k] += grads[k]
            nb = len(batch)
            loss_mean = loss_sum / nb
            if not np.isfinite(loss_mean):
                raise RuntimeError(
                    f"non-finite loss {loss_mean} at step {step}; aborting")
            losses.append(loss_mean)
            assert grad_acc is not None
            if nb > 1:
                for k in grad_acc:
                    grad_acc[k] /= np.float32(nb)
            if cfg.grad_clip > 0:
                gnorm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                    for g in grad_acc.values()))
                if gnorm > cfg.grad_clip:
                    f = np.float32(cfg.grad_clip / gnorm)
                    for k in grad_acc:
                        grad_acc[k] *= f
            step += 1
            bc1 = 1.0 - cfg.beta1 ** step
            bc2 = 1.0 - cfg.beta2 ** step
            for k, g in grad_acc.items():
                m_state[k] = cfg.beta1 * m_state[k] + (1 - cfg.beta1) * g
                v_state[k] = cfg.beta2 * v_state[k] + (1 - cfg.beta2) * g * g
                update = (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2)
                                               + cfg.adam_eps)
                if t[k].ndim >= 2:
                    update = update + cfg.weight_decay * t[k]
                t[k] = (t[k] - cfg.learning_rate * update).astype(t[k].dtype)
    return w, losses


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed."""


def save_checkpoint(weights: PolicyWeights, path) -> None:
    """Binary format: magic, u32 header length, JSON header, float32 payload."""
    names = sorted(weights.tensors.keys())
    entries = []
    offset = 0
    for name in names:
        arr = weights.tensors[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps({"config": asdict(weights.config), "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(
                weights.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> PolicyWeights:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a policy checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise CheckpointError("truncated checkpoint: incomplete header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    pos += hlen
    payload = blob[pos:]
    expected = sum(int(np.prod(e["shape"])) for e in header["tensors"]) * 4
    if len(payload) != expected:
        raise CheckpointError(
            f"payload size {len(payload)} does not match header ({expected})")
    cfg = PolicyConfig(**header["config"])
    tensors: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=size,
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return PolicyWeights(cfg, tensors)
