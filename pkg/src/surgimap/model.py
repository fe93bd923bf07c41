"""Transformer decoder over a clip-embedding + instruction prefix.

Pure numpy, manual forward/backward.  The input is a prefix of M+1 rows
(clip embedding then M instruction embeddings) followed by component-token
embeddings.  Prefix positions attend to the whole prefix; component
positions attend to the full prefix and causally among themselves.  Logits
are produced only over the annotation sub-vocabulary, and the training loss
is the masked next-token negative log-likelihood summed over batch and
positions.

Layer layout is pre-LN: x + attn(LN(x)), then x + ff(LN(x)), with a final
LayerNorm before the output projection.  GELU (exact erf form) feed-forward
of width 4D.  Weights init N(0, 0.02^2), zero biases, learned absolute
positional embeddings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "ModelConfig",
    "ModelState",
    "SequenceBatch",
    "ModelError",
    "NumericalFailure",
    "init_state",
    "build_prefix",
    "forward",
    "decode_logits",
    "loss",
    "loss_grad",
    "backward",
    "export_representation",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_HEADER = b"SMCKPT 1\n"

_INIT_SD = 0.02
_LN_EPS = 1e-5
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


class ModelError(ValueError):
    """Bad configuration or batch shapes."""


class NumericalFailure(FloatingPointError):
    """Non-finite activations; carries the layer index where they appeared."""

    def __init__(self, layer_index: int):
        super().__init__(f"non-finite activations at layer {layer_index}")
        self.layer_index = layer_index


@dataclass(frozen=True)
class ModelConfig:
    """Decoder geometry and vocabulary sizes."""

    n_layers: int
    n_heads: int
    embed_dim: int
    n_instruction_slots: int
    vocab_size: int
    annotation_vocab_size: int
    max_component_len: int
    n_tasks: int = 4
    feature_dim: int | None = None  # None: provider dim equals embed_dim

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ModelError(
                f"embed_dim {self.embed_dim} not divisible by {self.n_heads} heads"
            )
        if self.n_layers < 1:
            raise ModelError("need at least one layer")
        if self.max_component_len < 1:
            raise ModelError("max_component_len must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def max_positions(self) -> int:
        return self.n_instruction_slots + 1 + self.max_component_len

    def to_json_obj(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "embed_dim": self.embed_dim,
            "n_instruction_slots": self.n_instruction_slots,
            "vocab_size": self.vocab_size,
            "annotation_vocab_size": self.annotation_vocab_size,
            "max_component_len": self.max_component_len,
            "n_tasks": self.n_tasks,
            "feature_dim": self.feature_dim,
        }


@dataclass
class ModelState:
    """All trainable tensors and their gradient buffers."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    dtype: np.dtype = np.dtype(np.float32)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def astype(self, dtype) -> "ModelState":
        """Copy of the state in another precision (e.g. float64 for checks)."""
        dtype = np.dtype(dtype)
        return ModelState(
            config=self.config,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            grads={k: np.zeros_like(v, dtype=dtype) for k, v in self.params.items()},
            dtype=dtype,
        )


@dataclass
class SequenceBatch:
    """Teacher-forcing batch.

    ``target_ids`` are global token ids (used for input embeddings),
    ``target_out`` the annotation-local indices of the same tokens (used by
    the output head), and ``mask`` is 1 exactly on real component positions
    (including the terminal <eos>) and 0 on padding.
    """

    clip_embeddings: np.ndarray  # (B, feature_dim)
    instruction_ids: np.ndarray  # (B, M) int
    target_ids: np.ndarray  # (B, S) int, global
    target_out: np.ndarray  # (B, S) int, V_A-local; -1 where mask is 0
    mask: np.ndarray  # (B, S) float

    @property
    def batch_size(self) -> int:
        return self.clip_embeddings.shape[0]


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = config.embed_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_positions, d),
    }
    if config.feature_dim is not None and config.feature_dim != d:
        shapes["in_proj_w"] = (config.feature_dim, d)
        shapes["in_proj_b"] = (d,)
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + name] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + name] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ff.w1"] = (d, 4 * d)
        shapes[p + "ff.b1"] = (4 * d,)
        shapes[p + "ff.w2"] = (4 * d, d)
        shapes[p + "ff.b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["out_w"] = (d, config.annotation_vocab_size)
    shapes["out_b"] = (config.annotation_vocab_size,)
    return shapes


def init_state(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Random initialization: N(0, 0.02^2) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2", "out_b", "in_proj_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, _INIT_SD, size=shape).astype(dtype)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(config=config, params=params, grads=grads, dtype=dtype)


def _layer_norm(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mean) * rstd
    return xhat * g + b, xhat, rstd


def _layer_norm_backward(dy, xhat, rstd, g):
    dgamma = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbeta = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


def _gelu(x):
    """Exact GELU; returns (value, erf term) so backward can reuse the erf."""
    e = erf(x / np.sqrt(2.0))
    return 0.5 * x * (1.0 + e), e


def _gelu_grad(x, e):
    return 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) / _SQRT_2PI


def _scatter_rows(out: np.ndarray, indices: np.ndarray, rows: np.ndarray) -> None:
    """out[indices[i]] += rows[i], via a one-hot GEMM (faster than np.add.at
    at desk-scale vocabulary sizes)."""
    onehot = (indices[:, None] == np.arange(out.shape[0])[None, :]).astype(out.dtype)
    out += onehot.T @ rows


def _attention_mask(n_prefix: int, total: int) -> np.ndarray:
    """Boolean (total, total) matrix of allowed key positions per query.

    Prefix queries see the whole prefix; component queries see the prefix
    plus components up to and including themselves.
    """
    allowed = np.zeros((total, total), dtype=bool)
    allowed[:n_prefix, :n_prefix] = True
    for q in range(n_prefix, total):
        allowed[q, : q + 1] = True
    return allowed


def build_prefix(state: ModelState, clip_embeddings: np.ndarray,
                 instruction_ids: np.ndarray) -> np.ndarray:
    """Assemble the (B, M+1, D) prefix: clip row, instruction rows, positions."""
    cfg = state.config
    ev = np.asarray(clip_embeddings, dtype=state.dtype)
    if ev.ndim == 1:
        ev = ev[None, :]
    instruction_ids = np.atleast_2d(instruction_ids)
    if instruction_ids.shape[1] != cfg.n_instruction_slots:
        raise ModelError(
            f"instruction length {instruction_ids.shape[1]} != M={cfg.n_instruction_slots}"
        )
    if "in_proj_w" in state.params:
        row0 = ev @ state.params["in_proj_w"] + state.params["in_proj_b"]
    else:
        if ev.shape[1] != cfg.embed_dim:
            raise ModelError(
                f"clip embedding dim {ev.shape[1]} != D={cfg.embed_dim} "
                "and no input projection is configured"
            )
        row0 = ev
    prefix = np.concatenate(
        [row0[:, None, :], state.params["tok_emb"][instruction_ids]], axis=1
    )
    return prefix + state.params["pos_emb"][: cfg.n_instruction_slots + 1]


def _forward_core(state: ModelState, clip_embeddings, instruction_ids,
                  component_ids) -> tuple[np.ndarray, dict]:
    """Run the stack over prefix + component inputs; return final hidden + cache."""
    cfg = state.config
    p = state.params
    component_ids = np.atleast_2d(np.asarray(component_ids, dtype=np.int64))
    n_prefix = cfg.n_instruction_slots + 1
    n_comp = component_ids.shape[1]
    total = n_prefix + n_comp
    if total > cfg.max_positions:
        raise ModelError(
            f"sequence length {total} exceeds positional table {cfg.max_positions}"
        )

    prefix = build_prefix(state, clip_embeddings, instruction_ids)
    if n_comp:
        comp = p["tok_emb"][component_ids] + p["pos_emb"][n_prefix:total]
        x = np.concatenate([prefix, comp], axis=1)
    else:
        x = prefix
    allowed = _attention_mask(n_prefix, total)
    neg = np.where(allowed, 0.0, -np.inf).astype(state.dtype)

    cache: dict = {
        "component_ids": component_ids,
        "instruction_ids": np.atleast_2d(instruction_ids),
        "clip_embeddings": np.atleast_2d(np.asarray(clip_embeddings, dtype=state.dtype)),
        "n_prefix": n_prefix,
        "total": total,
        "layers": [],
    }
    b = x.shape[0]
    h, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)

    for i in range(cfg.n_layers):
        lp = f"layer{i}."
        lcache: dict = {"x_in": x}
        a, xhat1, rstd1 = _layer_norm(x, p[lp + "ln1.g"], p[lp + "ln1.b"])
        lcache.update(a=a, xhat1=xhat1, rstd1=rstd1)

        q = (a @ p[lp + "attn.wq"] + p[lp + "attn.bq"]).reshape(b, total, h, dh)
        k = (a @ p[lp + "attn.wk"] + p[lp + "attn.bk"]).reshape(b, total, h, dh)
        v = (a @ p[lp + "attn.wv"] + p[lp + "attn.bv"]).reshape(b, total, h, dh)
        q, k, v = (np.ascontiguousarray(t.transpose(0, 2, 1, 3))
                   for t in (q, k, v))  # (B, h, T, dh)

        scores = q @ k.transpose(0, 1, 3, 2) * scale + neg
        scores_max = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - scores_max)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = attn @ v
        ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(b, total, cfg.embed_dim)
        o = ctx_flat @ p[lp + "attn.wo"] + p[lp + "attn.bo"]
        x = x + o
        lcache.update(q=q, k=k, v=v, attn=attn, ctx_flat=ctx_flat, x_mid=x)

        a2, xhat2, rstd2 = _layer_norm(x, p[lp + "ln2.g"], p[lp + "ln2.b"])
        u = a2 @ p[lp + "ff.w1"] + p[lp + "ff.b1"]
        gu, erf_u = _gelu(u)
        f = gu @ p[lp + "ff.w2"] + p[lp + "ff.b2"]
        x = x + f
        lcache.update(a2=a2, xhat2=xhat2, rstd2=rstd2, u=u, gu=gu, erf_u=erf_u)
        cache["layers"].append(lcache)

        if not np.isfinite(x).all():
            raise NumericalFailure(i)

    h_final, xhatf, rstdf = _layer_norm(x, p["lnf.g"], p["lnf.b"])
    cache.update(x_last=x, h_final=h_final, xhatf=xhatf, rstdf=rstdf)
    return h_final, cache


def forward(state: ModelState, batch: SequenceBatch) -> tuple[np.ndarray, dict]:
    """Teacher-forcing forward pass.

    Returns logits of shape (B, S, |V_A|) where row i predicts target i
    (the last prefix position predicts target 0), plus the activation cache
    for :func:`backward`.
    """
    target_ids = np.atleast_2d(np.asarray(batch.target_ids, dtype=np.int64))
    if target_ids.shape[1] < 1:
        raise ModelError("need at least one target position")
    component_inputs = target_ids[:, :-1]
    h_final, cache = _forward_core(
        state, batch.clip_embeddings, batch.instruction_ids, component_inputs
    )
    m = state.config.n_instruction_slots
    head_in = h_final[:, m:, :]
    logits = head_in @ state.params["out_w"] + state.params["out_b"]
    cache["head_in"] = head_in
    cache["n_targets"] = target_ids.shape[1]
    return logits, cache


def decode_logits(state: ModelState, clip_embeddings, instruction_ids,
                  generated_ids) -> np.ndarray:
    """Next-token logits over V_A given the prefix and tokens generated so far."""
    h_final, _ = _forward_core(state, clip_embeddings, instruction_ids, generated_ids)
    return h_final[:, -1, :] @ state.params["out_w"] + state.params["out_b"]


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, target_out: np.ndarray, mask: np.ndarray) -> float:
    """Masked next-token NLL, summed over batch and positions.

    Exactly invariant to logits at mask-0 positions.
    """
    target_out = np.atleast_2d(target_out)
    mask = np.atleast_2d(mask)
    n_va = logits.shape[-1]
    active = mask > 0
    tgt = target_out[active]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_va):
        raise ModelError("target id outside the annotation vocabulary")
    logp = _log_softmax(logits[active])
    picked = logp[np.arange(tgt.size), tgt]
    return float(-picked.sum())


def loss_grad(logits: np.ndarray, target_out: np.ndarray,
              mask: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) for the summed masked NLL."""
    target_out = np.atleast_2d(target_out)
    mask = np.atleast_2d(mask)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    grad = probs.copy()
    b_idx, s_idx = np.nonzero(mask > 0)
    grad[b_idx, s_idx, target_out[b_idx, s_idx]] -= 1.0
    grad *= np.asarray(mask)[..., None]
    return grad


def backward(state: ModelState, cache: dict, d_logits: np.ndarray) -> None:
    """Accumulate parameter gradients from the logits gradient.

    Requires the cache of the matching :func:`forward` call.
    """
    if "head_in" not in cache:
        raise ModelError("backward requires a forward cache")
    cfg = state.config
    p, g = state.params, state.grads
    b = d_logits.shape[0]
    total = cache["total"]
    n_prefix = cache["n_prefix"]
    d = cfg.embed_dim
    heads, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)

    head_in = cache["head_in"]
    g["out_w"] += head_in.reshape(-1, d).T @ d_logits.reshape(-1, d_logits.shape[-1])
    g["out_b"] += d_logits.sum(axis=(0, 1))
    d_hfinal = np.zeros((b, total, d), dtype=state.dtype)
    m = cfg.n_instruction_slots
    d_hfinal[:, m:, :] = d_logits @ p["out_w"].T

    dx, dgf, dbf = _layer_norm_backward(d_hfinal, cache["xhatf"], cache["rstdf"],
                                        p["lnf.g"])
    g["lnf.g"] += dgf
    g["lnf.b"] += dbf

    for i in reversed(range(cfg.n_layers)):
        lp = f"layer{i}."
        lc = cache["layers"][i]

        # feed-forward block
        df = dx  # gradient reaching x_mid + f
        dgu = df @ p[lp + "ff.w2"].T
        g[lp + "ff.w2"] += lc["gu"].reshape(-1, 4 * d).T @ df.reshape(-1, d)
        g[lp + "ff.b2"] += df.sum(axis=(0, 1))
        du = dgu * _gelu_grad(lc["u"], lc["erf_u"])
        g[lp + "ff.w1"] += lc["a2"].reshape(-1, d).T @ du.reshape(-1, 4 * d)
        g[lp + "ff.b1"] += du.sum(axis=(0, 1))
        da2 = du @ p[lp + "ff.w1"].T
        dx_mid, dg2, db2 = _layer_norm_backward(da2, lc["xhat2"], lc["rstd2"],
                                                p[lp + "ln2.g"])
        g[lp + "ln2.g"] += dg2
        g[lp + "ln2.b"] += db2
        dx = df + dx_mid  # residual

        # attention block
        do = dx
        g[lp + "attn.wo"] += lc["ctx_flat"].reshape(-1, d).T @ do.reshape(-1, d)
        g[lp + "attn.bo"] += do.sum(axis=(0, 1))
        dctx_flat = do @ p[lp + "attn.wo"].T
        dctx = np.ascontiguousarray(
            dctx_flat.reshape(b, total, heads, dh).transpose(0, 2, 1, 3)
        )

        attn, q, k, v = lc["attn"], lc["q"], lc["k"], lc["v"]
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale

        def _merge(t):
            return np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(b, total, d)

        dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
        a_flat = lc["a"].reshape(-1, d)
        g[lp + "attn.wq"] += a_flat.T @ dq.reshape(-1, d)
        g[lp + "attn.bq"] += dq.sum(axis=(0, 1))
        g[lp + "attn.wk"] += a_flat.T @ dk.reshape(-1, d)
        g[lp + "attn.bk"] += dk.sum(axis=(0, 1))
        g[lp + "attn.wv"] += a_flat.T @ dv.reshape(-1, d)
        g[lp + "attn.bv"] += dv.sum(axis=(0, 1))
        da = (dq @ p[lp + "attn.wq"].T + dk @ p[lp + "attn.wk"].T
              + dv @ p[lp + "attn.wv"].T)
        dx_in, dg1, db1 = _layer_norm_backward(da, lc["xhat1"], lc["rstd1"],
                                               p[lp + "ln1.g"])
        g[lp + "ln1.g"] += dg1
        g[lp + "ln1.b"] += db1
        dx = do + dx_in  # residual

    # embeddings and input projection
    g["pos_emb"][:total] += dx.sum(axis=0)
    instruction_ids = cache["instruction_ids"]
    component_ids = cache["component_ids"]
    _scatter_rows(g["tok_emb"], instruction_ids.reshape(-1),
                  dx[:, 1:n_prefix, :].reshape(-1, d))
    if component_ids.shape[1]:
        _scatter_rows(g["tok_emb"], component_ids.reshape(-1),
                      dx[:, n_prefix:, :].reshape(-1, d))
    if "in_proj_w" in p:
        ev = cache["clip_embeddings"]
        g["in_proj_w"] += ev.T @ dx[:, 0, :]
        g["in_proj_b"] += dx[:, 0, :].sum(axis=0)


def export_representation(state: ModelState, batch: SequenceBatch) -> np.ndarray:
    """Final-layer activations mean-pooled over prefix + component positions."""
    target_ids = np.atleast_2d(np.asarray(batch.target_ids, dtype=np.int64))
    h_final, _ = _forward_core(
        state, batch.clip_embeddings, batch.instruction_ids, target_ids[:, :-1]
    )
    return h_final.mean(axis=1)


# ----------------------------------------------------------- checkpointing


def save_checkpoint(state: ModelState, path) -> None:
    """Write header, config JSON, then named float32 tensors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_HEADER)
        fh.write(json.dumps(state.config.to_json_obj(), sort_keys=True).encode())
        fh.write(b"\n")
        for name in sorted(state.params):
            arr = np.ascontiguousarray(state.params[name], dtype="<f4")
            dims = " ".join(str(s) for s in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}\n".encode())
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path, dtype=np.float32) -> ModelState:
    """Load a checkpoint, validating tensor shapes against the config."""
    with open(path, "rb") as fh:
        header = fh.readline()
        if header != CHECKPOINT_HEADER:
            raise ModelError(f"bad checkpoint header {header!r}")
        config = ModelConfig(**json.loads(fh.readline().decode()))
        expected = _param_shapes(config)
        params: dict[str, np.ndarray] = {}
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.decode().split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(x) for x in parts[2 : 2 + ndim])
            if name not in expected:
                raise ModelError(f"unexpected tensor {name!r} in checkpoint")
            if shape != expected[name]:
                raise ModelError(
                    f"tensor {name!r} has shape {shape}, config expects {expected[name]}"
                )
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * 4)
            if len(raw) != n * 4:
                raise ModelError(f"truncated tensor {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
    missing = expected.keys() - params.keys()
    if missing:
        raise ModelError(f"checkpoint missing tensor {sorted(missing)[0]!r}")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(config=config, params=params, grads=grads, dtype=np.dtype(dtype))
