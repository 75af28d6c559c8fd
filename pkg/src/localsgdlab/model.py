"""Tiny differentiable language models with exact hand-written gradients.

Two architectures are provided: a decoder-only pre-norm transformer
(learned positional embeddings, causal attention, GELU MLP with expansion 4)
and a simpler residual-MLP fallback. Everything operates on a single flat
float64 parameter vector with a named segment map, so optimizers and the
sync engine never need to know tensor shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, LayoutError

LN_EPS = 1e-5
INIT_STD = 0.02
MLP_EXPANSION = 4

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# Configuration and parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    arch: str = "transformer"  # "transformer" | "mlp"
    vocab_size: int = 256
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    seq_len: int = 64
    tie_embeddings: bool = False

    def validate(self):
        if self.arch not in ("transformer", "mlp"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        for name in ("d_model", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.arch == "transformer":
            if self.n_heads < 1:
                raise ConfigError("n_heads must be positive")
            if self.d_model % self.n_heads != 0:
                raise ConfigError(
                    f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
                )
        return self


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    is_embedding: bool


@dataclass
class ParameterVector:
    values: np.ndarray  # flat float64
    segments: list[Segment]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.segments)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros_like(self.values), self.segments)

    def segment_slice(self, name: str) -> np.ndarray:
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.length]
        raise LayoutError(f"no segment named {name!r}")

    def same_layout(self, other: "ParameterVector") -> bool:
        return (
            self.values.shape == other.values.shape
            and self.segments == other.segments
        )


@dataclass
class TokenBatch:
    inputs: np.ndarray   # int [rows, seq_len]
    targets: np.ndarray  # int [rows, seq_len]

    @property
    def token_count(self) -> int:
        return int(self.inputs.size)


@dataclass(frozen=True)
class _TensorSpec:
    name: str
    shape: tuple
    is_embedding: bool = False
    init: str = "normal"  # normal | normal_scaled | zeros | ones


def _tensor_table(config: ModelConfig) -> list[_TensorSpec]:
    d, V, T = config.d_model, config.vocab_size, config.seq_len
    table = [
        _TensorSpec("tok_emb", (V, d), is_embedding=True),
        _TensorSpec("pos_emb", (T, d), is_embedding=True),
    ]
    if config.arch == "transformer":
        for i in range(config.n_layers):
            p = f"layer{i}."
            table += [
                _TensorSpec(p + "ln1.g", (d,), init="ones"),
                _TensorSpec(p + "ln1.b", (d,), init="zeros"),
                _TensorSpec(p + "attn.w_qkv", (d, 3 * d)),
                _TensorSpec(p + "attn.b_qkv", (3 * d,), init="zeros"),
                _TensorSpec(p + "attn.w_o", (d, d), init="normal_scaled"),
                _TensorSpec(p + "attn.b_o", (d,), init="zeros"),
                _TensorSpec(p + "ln2.g", (d,), init="ones"),
                _TensorSpec(p + "ln2.b", (d,), init="zeros"),
                _TensorSpec(p + "mlp.w1", (d, MLP_EXPANSION * d)),
                _TensorSpec(p + "mlp.b1", (MLP_EXPANSION * d,), init="zeros"),
                _TensorSpec(p + "mlp.w2", (MLP_EXPANSION * d, d), init="normal_scaled"),
                _TensorSpec(p + "mlp.b2", (d,), init="zeros"),
            ]
        table += [
            _TensorSpec("ln_f.g", (d,), init="ones"),
            _TensorSpec("ln_f.b", (d,), init="zeros"),
        ]
    else:  # mlp
        for i in range(config.n_layers):
            p = f"layer{i}."
            table += [
                _TensorSpec(p + "w", (d, d), init="normal_scaled"),
                _TensorSpec(p + "b", (d,), init="zeros"),
            ]
    if not config.tie_embeddings:
        # Output projection is a vocabulary matrix; counted with embeddings
        # when reporting the non-embedding parameter count.
        table.append(_TensorSpec("out_proj", (d, V), is_embedding=True))
    return table


def layout(config: ModelConfig) -> dict:
    """Map segment name -> (offset, shape) for the given config."""
    out, offset = {}, 0
    for spec in _tensor_table(config):
        n = int(np.prod(spec.shape))
        out[spec.name] = (offset, spec.shape)
        offset += n
    return out


def build_model(config: ModelConfig, seed: int) -> ParameterVector:
    """Deterministically initialize a flat parameter vector for `config`."""
    config.validate()
    rng = np.random.default_rng(seed)
    scaled_std = INIT_STD / math.sqrt(2.0 * config.n_layers)
    chunks, segments, offset = [], [], 0
    for spec in _tensor_table(config):
        n = int(np.prod(spec.shape))
        if spec.init == "zeros":
            v = np.zeros(n)
        elif spec.init == "ones":
            v = np.ones(n)
        elif spec.init == "normal_scaled":
            v = rng.standard_normal(n) * scaled_std
        else:
            v = rng.standard_normal(n) * INIT_STD
        chunks.append(v)
        segments.append(Segment(spec.name, offset, n, spec.is_embedding))
        offset += n
    return ParameterVector(np.concatenate(chunks), segments)


def count_non_embedding(params: ParameterVector) -> int:
    """Parameter count excluding vocabulary and positional embedding segments."""
    return sum(s.length for s in params.segments if not s.is_embedding)


def flops_per_step(n_params: int, batch_tokens: float) -> float:
    """Training FLOPs for one full parameter update: 6 * N * B."""
    if n_params <= 0 or batch_tokens <= 0:
        raise ValueError("n_params and batch_tokens must be positive")
    return 6.0 * n_params * batch_tokens


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _views(params: ParameterVector, config: ModelConfig) -> dict:
    lay = layout(config)
    if len(lay) != len(params.segments):
        raise LayoutError("parameter vector does not match config layout")
    out = {}
    for seg in params.segments:
        if seg.name not in lay:
            raise LayoutError(f"unexpected segment {seg.name!r}")
        offset, shape = lay[seg.name]
        if offset != seg.offset or int(np.prod(shape)) != seg.length:
            raise LayoutError(f"segment {seg.name!r} does not match config layout")
        out[seg.name] = params.values[seg.offset:seg.offset + seg.length].reshape(shape)
    return out


def _check_batch(batch: TokenBatch, config: ModelConfig):
    if batch.inputs.size == 0:
        raise DataError("empty batch")
    if batch.inputs.shape != batch.targets.shape:
        raise DataError("inputs/targets shape mismatch")
    if batch.inputs.shape[1] != config.seq_len:
        raise DataError(
            f"batch seq_len {batch.inputs.shape[1]} != config seq_len {config.seq_len}"
        )
    for arr, label in ((batch.inputs, "input"), (batch.targets, "target")):
        if arr.min() < 0 or arr.max() >= config.vocab_size:
            raise DataError(f"{label} token id out of range [0, {config.vocab_size})")


def _gelu(x):
    """Tanh-approximate GELU; also returns the inner tanh for reuse in backward."""
    u = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x * x))
    return 0.5 * x * (1.0 + u), u


def _gelu_grad(x, u):
    du = (1.0 - u * u) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + u) + 0.5 * x * du


def _outer_grad(x, dy):
    """Weight gradient x^T dy with the leading (rows, T) dims flattened."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _forward(params: ParameterVector, config: ModelConfig, batch: TokenBatch,
             need_cache: bool):
    w = _views(params, config)
    _check_batch(batch, config)
    ids = batch.inputs
    rows, T = ids.shape
    d = config.d_model

    x = w["tok_emb"][ids] + w["pos_emb"][:T]
    cache = {"ids": ids, "x0": x} if need_cache else None
    layers = []

    if config.arch == "transformer":
        H = config.n_heads
        dh = d // H
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        for i in range(config.n_layers):
            p = f"layer{i}."
            lc = {"x_in": x}
            a, ln1c = _layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
            qkv = a @ w[p + "attn.w_qkv"] + w[p + "attn.b_qkv"]
            q, k, v = np.split(qkv, 3, axis=-1)
            # [rows, H, T, dh]
            q = q.reshape(rows, T, H, dh).transpose(0, 2, 1, 3)
            k = k.reshape(rows, T, H, dh).transpose(0, 2, 1, 3)
            v = v.reshape(rows, T, H, dh).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
            scores = np.where(mask, -np.inf, scores)
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            probs = e / e.sum(axis=-1, keepdims=True)
            ctx = probs @ v
            merged = ctx.transpose(0, 2, 1, 3).reshape(rows, T, d)
            attn_out = merged @ w[p + "attn.w_o"] + w[p + "attn.b_o"]
            x = x + attn_out

            lc2_in = x
            mh, ln2c = _layernorm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            pre = mh @ w[p + "mlp.w1"] + w[p + "mlp.b1"]
            act, gu = _gelu(pre)
            mlp_out = act @ w[p + "mlp.w2"] + w[p + "mlp.b2"]
            x = x + mlp_out
            if need_cache:
                lc.update(a=a, ln1c=ln1c, q=q, k=k, v=v, probs=probs,
                          merged=merged, x_mid=lc2_in, mh=mh, ln2c=ln2c,
                          pre=pre, act=act, gu=gu)
                layers.append(lc)
        xf, lnfc = _layernorm(x, w["ln_f.g"], w["ln_f.b"])
        if need_cache:
            cache.update(layers=layers, x_last=x, xf=xf, lnfc=lnfc)
        final = xf
    else:  # mlp
        for i in range(config.n_layers):
            p = f"layer{i}."
            pre = x @ w[p + "w"] + w[p + "b"]
            act, gu = _gelu(pre)
            if need_cache:
                layers.append({"x_in": x, "pre": pre, "gu": gu})
            x = x + act
        if need_cache:
            cache.update(layers=layers)
        final = x

    w_out = w["tok_emb"].T if config.tie_embeddings else w["out_proj"]
    logits = final @ w_out

    # stable log-softmax cross entropy, mean over all tokens, in nats
    zmax = logits.max(axis=-1, keepdims=True)
    z = logits - zmax
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n_tok = rows * T
    loss = -logp[np.arange(rows)[:, None], np.arange(T)[None, :], batch.targets].sum() / n_tok

    if need_cache:
        softmax = np.exp(logp)
        cache.update(final=final, softmax=softmax, w=w, n_tok=n_tok)
    return loss, cache


def forward_loss(params: ParameterVector, config: ModelConfig,
                 batch: TokenBatch) -> float:
    """Mean next-token cross-entropy in nats over every target token."""
    loss, _ = _forward(params, config, batch, need_cache=False)
    return float(loss)


def backward(params: ParameterVector, config: ModelConfig,
             batch: TokenBatch) -> tuple[float, ParameterVector]:
    """Exact gradient of forward_loss; returns (loss, gradient).

    The gradient shares the parameter vector's segment layout.
    """
    loss, cache = _forward(params, config, batch, need_cache=True)
    loss = float(loss)
    w = cache["w"]
    grad = params.zeros_like()
    g = _views(grad, config)
    ids = cache["ids"]
    rows, T = ids.shape
    d = config.d_model

    dlogits = cache["softmax"].copy()
    dlogits[np.arange(rows)[:, None], np.arange(T)[None, :], batch.targets] -= 1.0
    dlogits /= cache["n_tok"]

    final = cache["final"]
    if config.tie_embeddings:
        # logits = final @ tok_emb.T
        g["tok_emb"] += _outer_grad(dlogits, final)
        dx = dlogits @ w["tok_emb"]
    else:
        g["out_proj"] += _outer_grad(final, dlogits)
        dx = dlogits @ w["out_proj"].T

    if config.arch == "transformer":
        H = config.n_heads
        dh = d // H
        dx, dgain, dbias = _layernorm_backward(dx, w["ln_f.g"], cache["lnfc"])
        g["ln_f.g"] += dgain
        g["ln_f.b"] += dbias
        for i in reversed(range(config.n_layers)):
            p = f"layer{i}."
            lc = cache["layers"][i]
            # MLP branch
            d_mlp_out = dx
            g[p + "mlp.b2"] += d_mlp_out.sum(axis=(0, 1))
            g[p + "mlp.w2"] += _outer_grad(lc["act"], d_mlp_out)
            dact = d_mlp_out @ w[p + "mlp.w2"].T
            dpre = dact * _gelu_grad(lc["pre"], lc["gu"])
            g[p + "mlp.b1"] += dpre.sum(axis=(0, 1))
            g[p + "mlp.w1"] += _outer_grad(lc["mh"], dpre)
            dmh = dpre @ w[p + "mlp.w1"].T
            dxm, dgain, dbias = _layernorm_backward(dmh, w[p + "ln2.g"], lc["ln2c"])
            g[p + "ln2.g"] += dgain
            g[p + "ln2.b"] += dbias
            dx = dx + dxm
            # attention branch
            d_attn_out = dx
            g[p + "attn.b_o"] += d_attn_out.sum(axis=(0, 1))
            g[p + "attn.w_o"] += _outer_grad(lc["merged"], d_attn_out)
            dmerged = d_attn_out @ w[p + "attn.w_o"].T
            dctx = dmerged.reshape(rows, T, H, dh).transpose(0, 2, 1, 3)
            probs, q, k, v = lc["probs"], lc["q"], lc["k"], lc["v"]
            dprobs = dctx @ v.transpose(0, 1, 3, 2)
            dv = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dscores /= math.sqrt(dh)
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            dqkv = np.concatenate(
                [t.transpose(0, 2, 1, 3).reshape(rows, T, d) for t in (dq, dk, dv)],
                axis=-1,
            )
            g[p + "attn.b_qkv"] += dqkv.sum(axis=(0, 1))
            g[p + "attn.w_qkv"] += _outer_grad(lc["a"], dqkv)
            da = dqkv @ w[p + "attn.w_qkv"].T
            dxa, dgain, dbias = _layernorm_backward(da, w[p + "ln1.g"], lc["ln1c"])
            g[p + "ln1.g"] += dgain
            g[p + "ln1.b"] += dbias
            dx = dx + dxa
    else:
        for i in reversed(range(config.n_layers)):
            p = f"layer{i}."
            lc = cache["layers"][i]
            dact = dx
            dpre = dact * _gelu_grad(lc["pre"], lc["gu"])
            g[p + "b"] += dpre.sum(axis=(0, 1))
            g[p + "w"] += _outer_grad(lc["x_in"], dpre)
            dx = dx + dpre @ w[p + "w"].T

    # embeddings
    np.add.at(g["tok_emb"], ids, dx)
    g["pos_emb"][:T] += dx.sum(axis=0)
    return loss, grad


def grad_check(params: ParameterVector, config: ModelConfig, batch: TokenBatch,
               epsilon: float, n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error of `backward` vs central finite differences.

    Samples at least `n_samples` coordinates, guaranteeing coverage of every
    segment. The numeric side runs in the widest native precision
    (long double) so the rounding floor stays below the tolerance even for
    near-zero gradient coordinates. Relative error uses
    |a - n| / max(1e-12, |a| + |n|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, analytic = backward(params, config, batch)
    rng = np.random.default_rng(seed)
    coords = []
    for seg in params.segments:
        coords.append(seg.offset + rng.integers(0, seg.length))
    extra = max(0, n_samples - len(coords))
    coords.extend(rng.integers(0, params.values.size, size=extra))
    wide = ParameterVector(params.values.astype(np.longdouble), params.segments)
    eps = np.longdouble(epsilon)
    theta = wide.values
    max_err = 0.0
    for idx in sorted(set(int(c) for c in coords)):
        orig = theta[idx]
        theta[idx] = orig + eps
        lp, _ = _forward(wide, config, batch, need_cache=False)
        theta[idx] = orig - eps
        lm, _ = _forward(wide, config, batch, need_cache=False)
        theta[idx] = orig
        numeric = float((lp - lm) / (2.0 * eps))
        a = analytic.values[idx]
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        max_err = max(max_err, err)
    return max_err
