"""Conditional consistency denoiser.

``denoise(params, x, sigma, cond) = c_skip(sigma) * x + c_out(sigma) * F(x, sigma, cond)``

``F`` is a stack of composite attention layers. Each layer attends, in
order, to the agent's own history tokens, the nearby map polylines and the
neighbouring agents. It then runs self-attention across agents (within one
sampled joint mode), cross-attention to the prior anchors and a feed-forward
block. Parameters live in a flat ``dict[str, ndarray]`` so the EMA teacher
is just a second dict run through the same functions.

Tensor layout: B scenes, K modes, A agents, L latent dims, D model width.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ectraj import autograd as ag
from ectraj.autograd import Tensor
from ectraj.schedule import SIGMA_MIN

SIGMA_DATA = 0.5
NEG_INF = -1e9


def c_skip(sigma, sigma_min: float = SIGMA_MIN):
    s = np.asarray(sigma, dtype=np.float64)
    return SIGMA_DATA**2 / ((s - sigma_min) ** 2 + SIGMA_DATA**2)


def c_out(sigma, sigma_min: float = SIGMA_MIN):
    s = np.asarray(sigma, dtype=np.float64)
    return SIGMA_DATA * (s - sigma_min) / np.sqrt(SIGMA_DATA**2 + s**2)


def c_in(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    return 1.0 / np.sqrt(s**2 + SIGMA_DATA**2)


@dataclass
class DenoiserConfig:
    latent_dim: int = 10
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 3
    sigma_embed_dim: int = 16
    ff_mult: int = 2
    hist_segments: int = 4
    hist_feat: int = 15
    map_feat: int = 50
    nbr_feat: int = 66
    use_priors: bool = True
    sigma_min: float = SIGMA_MIN


@dataclass
class Conditions:
    """Padded per-batch conditioning arrays (numpy)."""

    hist: np.ndarray  # [B, A, S, F_h]
    hist_flat: np.ndarray  # [B, A, S*F_h]
    map_tokens: np.ndarray  # [B, A, P, F_m]
    map_mask: np.ndarray  # [B, A, P]
    nbr: np.ndarray  # [B, A, A, F_n]
    nbr_mask: np.ndarray  # [B, A, A]
    agent_mask: np.ndarray  # [B, A]
    anchors: np.ndarray  # [B, A, Kp, L] codec latents of the prior anchors
    anchor_bias: np.ndarray  # [B, A, Kp] log-scores added to attention logits

    @property
    def shape(self) -> tuple[int, int]:
        return self.agent_mask.shape


# ---------------------------------------------------------------------------
# parameter init


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _mlp_params(p, rng, name, d_in, d_hidden, d_out):
    p[f"{name}.w1"] = _glorot(rng, d_in, d_hidden)
    p[f"{name}.b1"] = np.zeros(d_hidden)
    p[f"{name}.w2"] = _glorot(rng, d_hidden, d_out)
    p[f"{name}.b2"] = np.zeros(d_out)


def _ln_params(p, name, d):
    p[f"{name}.g"] = np.ones(d)
    p[f"{name}.b"] = np.zeros(d)


def _attn_params(p, rng, name, d):
    for m in ("q", "k", "v", "o"):
        p[f"{name}.w{m}"] = _glorot(rng, d, d)
    p[f"{name}.bo"] = np.zeros(d)
    _ln_params(p, f"{name}.ln", d)


CROSS_BLOCKS = ("hist", "map", "nbr", "prior")


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D = cfg.d_model
    p: dict[str, np.ndarray] = {}
    _mlp_params(p, rng, "enc.hist", cfg.hist_feat, D, D)
    p["enc.hist.pos"] = rng.normal(0.0, 0.02, size=(cfg.hist_segments, D))
    _mlp_params(p, rng, "enc.agent", cfg.hist_feat * cfg.hist_segments, D, D)
    _mlp_params(p, rng, "enc.map", cfg.map_feat, D, D)
    _mlp_params(p, rng, "enc.nbr", cfg.nbr_feat, D, D)
    _mlp_params(p, rng, "enc.prior", cfg.latent_dim, D, D)
    for blk in CROSS_BLOCKS:
        p[f"null.{blk}"] = rng.normal(0.0, 0.02, size=(D,))
    _mlp_params(p, rng, "sigma", cfg.sigma_embed_dim, D, D)
    p["in.w"] = _glorot(rng, cfg.latent_dim, D)
    p["in.b"] = np.zeros(D)
    for layer in range(cfg.n_layers):
        for blk in (*CROSS_BLOCKS, "self"):
            _attn_params(p, rng, f"L{layer}.{blk}", D)
        _ln_params(p, f"L{layer}.ff.ln", D)
        _mlp_params(p, rng, f"L{layer}.ff", D, cfg.ff_mult * D, D)
    _ln_params(p, "out.ln", D)
    # zero output head: F == 0 at init, so f starts as c_skip * x
    p["out.w"] = np.zeros((D, cfg.latent_dim))
    p["out.b"] = np.zeros(cfg.latent_dim)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks


def _mlp(P, name, x):
    h = ag.gelu(ag.linear(x, P[f"{name}.w1"], P[f"{name}.b1"]))
    return ag.linear(h, P[f"{name}.w2"], P[f"{name}.b2"])


def _ln(P, name, x):
    return ag.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def sigma_features(sigma: np.ndarray, dim: int) -> np.ndarray:
    """Fourier features of log(sigma); sigma is [B]."""
    half = dim // 2
    freqs = 2.0 ** np.linspace(0.0, 3.0, half)
    arg = (np.log(np.asarray(sigma, dtype=np.float64)) / 4.0)[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _split_heads(x: Tensor, H: int) -> Tensor:
    *lead, D = x.shape
    return x.reshape(*lead, H, D // H)


def _prepend_null(P, blk, tokens: Tensor, bias: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Add a learned always-visible key so fully masked rows stay well defined."""
    B, A, _, D = tokens.shape
    null = P[f"null.{blk}"].reshape(1, 1, 1, D).broadcast_to((B, A, 1, D))
    zeros = np.zeros((B, A, 1))
    return ag.concat([null, tokens], axis=2), np.concatenate([zeros, bias], axis=2)


def _cross_kv(P, name, tokens: Tensor, H: int):
    k = _split_heads(ag.linear(tokens, P[f"{name}.wk"]), H)  # [B, A, T, H, dh]
    v = _split_heads(ag.linear(tokens, P[f"{name}.wv"]), H)
    return k, v


def _cross_attend(P, name, h: Tensor, kv, bias: np.ndarray, H: int) -> Tensor:
    """Queries [B, K, A, D] against per-agent keys [B, A, T, D] shared over K."""
    k, v = kv
    B, K, A, D = h.shape
    dh = D // H
    q = _split_heads(ag.linear(_ln(P, f"{name}.ln", h), P[f"{name}.wq"]), H)
    logits = ag.einsum("bkahd,bathd->bkaht", q, k) * (1.0 / np.sqrt(dh))
    logits = logits + bias[:, None, :, None, :]
    att = ag.softmax(logits, axis=-1)
    out = ag.einsum("bkaht,bathd->bkahd", att, v).reshape(B, K, A, D)
    return ag.linear(out, P[f"{name}.wo"], P[f"{name}.bo"])


def _self_attend(P, name, h: Tensor, agent_bias: np.ndarray, H: int) -> Tensor:
    B, K, A, D = h.shape
    dh = D // H
    x = _ln(P, f"{name}.ln", h)
    q = _split_heads(ag.linear(x, P[f"{name}.wq"]), H)
    k = _split_heads(ag.linear(x, P[f"{name}.wk"]), H)
    v = _split_heads(ag.linear(x, P[f"{name}.wv"]), H)
    logits = ag.einsum("bkahd,bkchd->bkahc", q, k) * (1.0 / np.sqrt(dh))
    logits = logits + agent_bias[:, None, None, None, :]
    att = ag.softmax(logits, axis=-1)
    out = ag.einsum("bkahc,bkchd->bkahd", att, v).reshape(B, K, A, D)
    return ag.linear(out, P[f"{name}.wo"], P[f"{name}.bo"])


# ---------------------------------------------------------------------------
# network


@dataclass
class EncodedContext:
    agent: Tensor  # [B, A, D]
    tokens: dict  # block -> (tokens [B, A, T, D], bias [B, A, T])
    agent_bias: np.ndarray  # [B, A]


def encode_conditions(P: dict[str, Tensor], cond: Conditions, cfg: DenoiserConfig) -> EncodedContext:
    """Context tokens, computed once per batch and shared by all K modes."""
    def bias_of(mask):
        return np.where(mask, 0.0, NEG_INF)

    hist = _mlp(P, "enc.hist", Tensor(cond.hist)) + P["enc.hist.pos"]
    agent = _mlp(P, "enc.agent", Tensor(cond.hist_flat))
    maps = _mlp(P, "enc.map", Tensor(cond.map_tokens))
    nbrs = _mlp(P, "enc.nbr", Tensor(cond.nbr))
    B, A = cond.shape
    hist_bias = np.zeros(hist.shape[:3])
    tokens = {
        "hist": _prepend_null(P, "hist", hist, hist_bias),
        "map": _prepend_null(P, "map", maps, bias_of(cond.map_mask)),
        "nbr": _prepend_null(P, "nbr", nbrs, bias_of(cond.nbr_mask)),
    }
    if cfg.use_priors and cond.anchors.shape[2] > 0:
        pri = _mlp(P, "enc.prior", Tensor(cond.anchors))
        tokens["prior"] = _prepend_null(P, "prior", pri, cond.anchor_bias)
    else:
        empty = P["null.prior"].reshape(1, 1, 1, -1).broadcast_to((B, A, 1, cfg.d_model))
        tokens["prior"] = (empty, np.zeros((B, A, 1)))
    return EncodedContext(agent, tokens, bias_of(cond.agent_mask))


def trunk(P: dict[str, Tensor], x: np.ndarray | Tensor, sigma: np.ndarray, ctx: EncodedContext, cfg: DenoiserConfig) -> Tensor:
    """The trainable function F(x, sigma, C); x is [B, K, A, L], sigma is [B]."""
    x = ag.as_tensor(x)
    sigma = np.asarray(sigma, dtype=np.float64)
    B = x.shape[0]
    H = cfg.n_heads
    scale = c_in(sigma).reshape(B, 1, 1, 1)
    h = ag.linear(x * scale, P["in.w"], P["in.b"])
    s_emb = _mlp(P, "sigma", Tensor(sigma_features(sigma, cfg.sigma_embed_dim)))
    h = h + s_emb.reshape(B, 1, 1, cfg.d_model) + ctx.agent.reshape(B, 1, ctx.agent.shape[1], cfg.d_model)
    for layer in range(cfg.n_layers):
        for blk in CROSS_BLOCKS:
            toks, bias = ctx.tokens[blk]
            kv = _cross_kv(P, f"L{layer}.{blk}", toks, H)
            h = h + _cross_attend(P, f"L{layer}.{blk}", h, kv, bias, H)
            if blk == "nbr":
                h = h + _self_attend(P, f"L{layer}.self", h, ctx.agent_bias, H)
        h = h + _mlp(P, f"L{layer}.ff", _ln(P, f"L{layer}.ff.ln", h))
    return ag.linear(_ln(P, "out.ln", h), P["out.w"], P["out.b"])


def denoise(P: dict[str, Tensor], x, sigma, ctx: EncodedContext, cfg: DenoiserConfig, counter: "CallCounter | None" = None) -> Tensor:
    """Consistency function ``c_skip * x + c_out * F``; sigma is [B] (>= sigma_min)."""
    x = ag.as_tensor(x)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if np.any(sigma < cfg.sigma_min - 1e-15):
        raise ValueError("denoise requires sigma >= sigma_min")
    if counter is not None:
        counter.add(x.shape[0] * x.shape[1])
    B = x.shape[0]
    F = trunk(P, x, sigma, ctx, cfg)
    skip = c_skip(sigma, cfg.sigma_min).reshape(B, 1, 1, 1)
    out = c_out(sigma, cfg.sigma_min).reshape(B, 1, 1, 1)
    # boundary: where c_out == 0 the trunk contributes nothing, bit for bit
    res = x * skip + F * out
    if not np.isfinite(res.data).all():
        raise ag.NumericalError("denoise", stage="forward")
    return res


class CallCounter:
    """Counts denoiser evaluations in units of (scene, mode) pairs."""

    def __init__(self):
        self.calls = 0
        self.batches = 0

    def add(self, n: int) -> None:
        self.calls += int(n)
        self.batches += 1


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], alpha: float) -> dict[str, np.ndarray]:
    """``teacher <- alpha * teacher + (1 - alpha) * student`` on detached arrays (in place)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("EMA alpha must lie in [0, 1]")
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter sets differ")
    for k, s in student.items():
        t = teacher[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        if alpha == 1.0:
            continue
        if alpha == 0.0:
            t[...] = s
        else:
            t *= alpha
            t += (1.0 - alpha) * s
    return teacher
