"""Small GPT-2-style decoder over the binary vocabulary, with hand-written
backpropagation and Adam.

Architecture (pre-layernorm)::

    x = tok_emb[tokens] + pos_emb[:T]
    for each layer:
        x = x + Wo . MultiHeadCausalAttention(LN1(x))      (no projection biases)
        x = x + W2 . gelu(W1 . LN2(x) + c1) + c2
    logits = LN_f(x) . W_out          (W_out = tok_emb^T when tied)

Everything is float64.  Attention patterns are reported in the column
convention used elsewhere in the package: ``pattern[j, i]`` is the weight
that query position ``i`` puts on key position ``j <= i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from paritycot.numerics import RngStream

CHECKPOINT_VERSION = 1
INIT_STD = 0.02
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class GPTConfig:
    n_layers: int = 1
    n_heads: int = 1
    d_model: int = 128
    d_ff: int = 512
    T_max: int = 128
    vocab: int = 2
    ln_eps: float = 1e-5
    tied: bool = False

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "T_max", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


LAYER_KEYS = ("ln1_g", "ln1_b", "Wq", "Wk", "Wv", "Wo", "ln2_g", "ln2_b", "W1", "c1", "W2", "c2")


def param_shapes(cfg: GPTConfig) -> dict[str, tuple]:
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab, D), "pos_emb": (cfg.T_max, D)}
    for l in range(cfg.n_layers):
        per = {"ln1_g": (D,), "ln1_b": (D,), "Wq": (D, D), "Wk": (D, D), "Wv": (D, D), "Wo": (D, D),
               "ln2_g": (D,), "ln2_b": (D,), "W1": (D, F), "c1": (F,), "W2": (F, D), "c2": (D,)}
        shapes.update({f"L{l}.{key}": shape for key, shape in per.items()})
    shapes["lnf_g"] = (D,)
    shapes["lnf_b"] = (D,)
    if not cfg.tied:
        shapes["W_out"] = (D, cfg.vocab)
    return shapes


class GPTParams:
    """Named float64 tensors plus the config that shaped them."""

    def __init__(self, cfg: GPTConfig, tensors: dict[str, np.ndarray]):
        expected = param_shapes(cfg)
        if set(tensors) != set(expected):
            raise ValueError(f"parameter names mismatch: {sorted(set(tensors) ^ set(expected))}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(param_shapes(self.cfg))

    def copy(self) -> "GPTParams":
        return GPTParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def out_matrix(self) -> np.ndarray:
        return self.tensors["tok_emb"].T if self.cfg.tied else self.tensors["W_out"]


def gpt_init(cfg: GPTConfig, rng: RngStream) -> GPTParams:
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if short.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif short.endswith("_b") or short in ("c1", "c2"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(INIT_STD, shape)
    return GPTParams(cfg, tensors)


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    # tanh approximation; written with in-place products because ``x**3``
    # goes through the slow generic power loop
    t = x * x
    t *= 0.044715 * GELU_C
    t += GELU_C
    t *= x
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t


def _gelu_back(dy, x, t):
    x2 = x * x
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= GELU_C
    x2 *= 1.0 - t * t
    x2 *= x
    x2 += 1.0 + t
    x2 *= 0.5
    x2 *= dy
    return x2


def _outer_sum(a, b):
    """sum over all leading axes of a[..., :, None] * b[..., None, :]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _split_heads(x, H):
    N, T, D = x.shape
    return x.reshape(N, T, H, D // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    N, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(N, T, H * dh)


@dataclass
class GPTForward:
    logits: np.ndarray  # (N, T, vocab)
    patterns: list  # per layer: (N, H, T, T) in column convention [.., j, i]
    cache: dict


def gpt_forward(params: GPTParams, tokens, query_rows=None) -> GPTForward:
    """Full forward pass.

    ``query_rows`` (0-based slots, sorted, unique) restricts the *last* layer's
    queries, FFN and output head to those slots; logits then have shape
    (N, len(query_rows), vocab) and the last layer's pattern only covers those
    columns.  Training uses this because the loss reads a handful of slots.
    """
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    N, T = tokens.shape
    if T > cfg.T_max:
        raise ValueError(f"sequence length {T} exceeds T_max={cfg.T_max}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError("token id outside the vocabulary")
    H, dh = cfg.n_heads, cfg.head_dim
    all_rows = np.arange(T)
    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    layers, patterns = [], []
    for l in range(cfg.n_layers):
        last = l == cfg.n_layers - 1
        rows = all_rows if (query_rows is None or not last) else np.asarray(query_rows, dtype=np.int64)
        full = len(rows) == T
        p = {key: params[f"L{l}.{key}"] for key in LAYER_KEYS}
        c = {"x_in": x, "rows": rows, "full": full}
        a_in, c["ln1"] = _layernorm(x, p["ln1_g"], p["ln1_b"], cfg.ln_eps)
        c["a_in"] = a_in
        a_q = a_in if full else a_in[:, rows]
        q = _split_heads(a_q @ p["Wq"], H)
        k = _split_heads(a_in @ p["Wk"], H)
        v = _split_heads(a_in @ p["Wv"], H)
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        future = all_rows[None, :] > rows[:, None]  # row convention: key j > query i
        s = np.where(future, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)  # row convention [.., i, j]
        o = _merge_heads(att @ v)
        c.update(q=q, k=k, v=v, att=att, o=o)
        x = (x if full else x[:, rows]) + o @ p["Wo"]
        f_in, c["ln2"] = _layernorm(x, p["ln2_g"], p["ln2_b"], cfg.ln_eps)
        hid = f_in @ p["W1"] + p["c1"]
        act, t = _gelu(hid)
        c.update(f_in=f_in, hid=hid, tanh=t, act=act)
        x = x + act @ p["W2"] + p["c2"]
        layers.append(c)
        patterns.append(att.transpose(0, 1, 3, 2))
    xf, lnf = _layernorm(x, params["lnf_g"], params["lnf_b"], cfg.ln_eps)
    logits = xf @ params.out_matrix()
    cache = {"tokens": tokens, "layers": layers, "xf": xf, "lnf": lnf}
    return GPTForward(logits, patterns, cache)


def attention_patterns(params: GPTParams, tokens) -> np.ndarray:
    """Stacked patterns, shape (layers, heads, N, T, T), column convention."""
    return np.stack(gpt_forward(params, tokens).patterns, axis=0).transpose(0, 2, 1, 3, 4)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gpt_loss(params: GPTParams, tokens, scored_positions) -> float:
    fwd = gpt_forward(params, tokens)
    return _scored_ce(fwd.logits, fwd.cache["tokens"], scored_positions)[0]


def _check_positions(scored_positions, T):
    pos = np.asarray(scored_positions, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("scored_positions must be nonempty")
    if pos.min() < 1 or pos.max() > T - 1:
        raise ValueError(f"scored positions must lie in [1, {T - 1}] (each predicts the next token)")
    return pos


def _scored_ce(logits, tokens, scored_positions, slot_of=None):
    """Mean CE of the scored positions and its gradient w.r.t. ``logits``.

    ``slot_of`` maps a 0-based sequence slot to its row in ``logits`` when the
    forward pass was restricted to a subset of query slots.
    """
    T = tokens.shape[1]
    pos = _check_positions(scored_positions, T)
    rows = pos - 1  # 0-based query slot whose output predicts slot ``pos``
    idx = rows if slot_of is None else np.array([slot_of[r] for r in rows], dtype=np.int64)
    logp = _log_softmax(logits[:, idx, :])  # (N, P, V)
    target = tokens[:, pos]  # next token
    picked = np.take_along_axis(logp, target[:, :, None], axis=-1)[..., 0]
    loss = float(-picked.mean())
    # d loss / d logits for the gathered rows; duplicates accumulate below
    g = np.exp(logp)
    np.put_along_axis(g, target[:, :, None], np.take_along_axis(g, target[:, :, None], -1) - 1.0, -1)
    g /= picked.size
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, (slice(None), idx), g)
    return loss, dlogits


def gpt_loss_and_backward(params: GPTParams, tokens, scored_positions):
    """Mean next-token cross-entropy over ``scored_positions`` (1-based query
    positions; each predicts the token after it) and exact gradients.

    Returns ``(loss, grads, forward)`` with ``grads`` keyed like the params.
    The forward pass is restricted to the scored query slots, so the returned
    ``forward`` carries logits for those slots only.
    """
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    pos = _check_positions(scored_positions, tokens.shape[1])
    query_rows = np.unique(pos - 1)
    fwd = gpt_forward(params, tokens, query_rows=query_rows)
    cache = fwd.cache
    slot_of = {int(r): i for i, r in enumerate(query_rows)}
    loss, dlogits = _scored_ce(fwd.logits, tokens, pos, slot_of)
    H = cfg.n_heads
    grads = {}
    Wout = params.out_matrix()
    dWout = _outer_sum(cache["xf"], dlogits)
    dxf = dlogits @ Wout.T
    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_back(dxf, params["lnf_g"], cache["lnf"])
    dtok = np.zeros_like(params["tok_emb"])
    if cfg.tied:
        dtok += dWout.T
    else:
        grads["W_out"] = dWout
    for l in reversed(range(cfg.n_layers)):
        c = cache["layers"][l]
        p = {key: params[f"L{l}.{key}"] for key in LAYER_KEYS}
        g = {}
        # FFN branch (dx lives on the layer's query rows)
        g["c2"] = dx.reshape(-1, dx.shape[-1]).sum(axis=0)
        g["W2"] = _outer_sum(c["act"], dx)
        dact = dx @ p["W2"].T
        dhid = _gelu_back(dact, c["hid"], c["tanh"])
        g["c1"] = dhid.reshape(-1, dhid.shape[-1]).sum(axis=0)
        g["W1"] = _outer_sum(c["f_in"], dhid)
        df_in = dhid @ p["W1"].T
        dmid, g["ln2_g"], g["ln2_b"] = _layernorm_back(df_in, p["ln2_g"], c["ln2"])
        dx = dx + dmid
        # attention branch
        g["Wo"] = _outer_sum(c["o"], dx)
        do = _split_heads(dx @ p["Wo"].T, H)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        ds /= math.sqrt(cfg.head_dim)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        a_in = c["a_in"]
        rows, full = c["rows"], c["full"]
        a_q = a_in if full else a_in[:, rows]
        g["Wq"] = _outer_sum(a_q, dq)
        g["Wk"] = _outer_sum(a_in, dk)
        g["Wv"] = _outer_sum(a_in, dv)
        da_in = dk @ p["Wk"].T + dv @ p["Wv"].T
        dq_in = dq @ p["Wq"].T
        if full:
            da_in += dq_in
            resid = dx
        else:
            da_in[:, rows] += dq_in
            resid = np.zeros_like(da_in)
            resid[:, rows] = dx
        din, g["ln1_g"], g["ln1_b"] = _layernorm_back(da_in, p["ln1_g"], c["ln1"])
        dx = resid + din
        grads.update({f"L{l}.{key}": val for key, val in g.items()})
    T = tokens.shape[1]
    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:T] = dx.sum(axis=0)
    np.add.at(dtok, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["tok_emb"] = dtok
    return loss, grads, fwd


def predict_next(params: GPTParams, tokens) -> np.ndarray:
    """Greedy next-token prediction at every position, shape (N, T)."""
    return gpt_forward(params, tokens).logits.argmax(axis=-1)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        tensors = params.tensors if isinstance(params, GPTParams) else params
        return cls({k: np.zeros_like(t) for k, t in tensors.items()},
                   {k: np.zeros_like(t) for k, t in tensors.items()})


def adam_step(params, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place bias-corrected Adam update (decoupled weight decay if nonzero).

    ``params`` is a GPTParams or a plain dict of float arrays.
    """
    tensors = params.tensors if isinstance(params, GPTParams) else params
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p
        p -= update


def linear_decay(peak_lr: float, step: int, total_steps: int) -> float:
    """Learning rate at 0-based ``step`` decaying linearly from peak to 0."""
    if total_steps <= 0:
        return peak_lr
    return peak_lr * max(0.0, 1.0 - step / total_steps)


def save_checkpoint(path, params: GPTParams, *, seed: int, extra: dict | None = None) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, "kind": "standard", "config": asdict(params.cfg),
            "seed": seed}
    if extra:
        meta.update(extra)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **params.tensors)


def load_checkpoint(path) -> tuple[GPTParams, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION or meta.get("kind") != "standard":
            raise ValueError(f"{path}: not a standard-model checkpoint (meta={meta})")
        cfg = GPTConfig(**meta["config"])
        tensors = {name: z[name].copy() for name in z.files if name != "meta"}
    return GPTParams(cfg, tensors), meta
