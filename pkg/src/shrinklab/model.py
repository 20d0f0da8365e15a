"""A small decoder-only transformer over byte tokens.

Pre-norm blocks, learned positional embeddings, and an output head tied to
the token embedding.  Weights are plain numpy arrays stored as x @ W with
shape (in, out); linear projections may instead hold quantized views (see
compress), which are expanded to dense on use.  Inference runs in the dtype
of the stored weights, float32 by default, while softmax and log-likelihood
sums accumulate in float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

LN_EPS = 1e-5
INIT_STD = 0.02
BYTE_VOCAB = 256

# names of the linear projection attributes on a layer, in storage order
LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_in", "w_out")
_LAYER_TENSOR_NAMES = LINEAR_NAMES + ("ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int = BYTE_VOCAB
    context_len: int = 64

    def __post_init__(self):
        for field_name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "context_len"):
            v = getattr(self, field_name)
            if not isinstance(v, int) or v < 1:
                raise DomainError(f"{field_name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise DomainError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        if self.d_model % 4 != 0 or self.d_ff % 4 != 0:
            raise DomainError("d_model and d_ff must be divisible by 4")
        if self.vocab_size < 2:
            raise DomainError("vocab_size must be at least 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    """One transformer block.  Projections are (in, out) matrices without bias."""

    wq: object
    wk: object
    wv: object
    wo: object
    w_in: object
    w_out: object
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class Weights:
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    ln_f_g: np.ndarray
    ln_f_b: np.ndarray


@dataclass
class TinyLM:
    """A model instance: config, weights, and a per-head keep mask.

    head_mask has shape (n_layers, n_heads); entries are 1.0 for live heads
    and 0.0 for pruned ones.  Instances are treated as immutable; passes
    that modify a model return a new instance.
    """

    config: ModelConfig
    weights: Weights
    head_mask: np.ndarray


def dense_weight(w, dtype=None):
    """Return a plain array for a weight that may be a quantized view."""
    if isinstance(w, np.ndarray):
        return w if dtype is None else w.astype(dtype, copy=False)
    return w.dense(np.float32 if dtype is None else dtype)


def param_tensors(model: TinyLM) -> list[tuple[str, object]]:
    """Canonical (name, tensor) list of trainable parameters, in storage order."""
    out: list[tuple[str, object]] = [
        ("tok_emb", model.weights.tok_emb),
        ("pos_emb", model.weights.pos_emb),
    ]
    for i, lw in enumerate(model.weights.layers):
        for attr in _LAYER_TENSOR_NAMES:
            out.append((f"layers.{i}.{attr}", getattr(lw, attr)))
    out.append(("ln_f.g", model.weights.ln_f_g))
    out.append(("ln_f.b", model.weights.ln_f_b))
    return out


def _map_params(model: TinyLM, fn) -> TinyLM:
    """New model with fn applied to every dense parameter array.

    Quantized views are passed through untouched; fn receives only ndarrays.
    """

    def conv(w):
        return fn(w) if isinstance(w, np.ndarray) else w

    w = model.weights
    layers = [
        LayerWeights(**{attr: conv(getattr(lw, attr)) for attr in _LAYER_TENSOR_NAMES})
        for lw in w.layers
    ]
    new_w = Weights(conv(w.tok_emb), conv(w.pos_emb), layers, conv(w.ln_f_g), conv(w.ln_f_b))
    return TinyLM(model.config, new_w, model.head_mask.copy())


def astype(model: TinyLM, dtype, copy: bool = False) -> TinyLM:
    """Model with all dense parameters cast to dtype.

    With copy=False arrays already in the target dtype are shared, so the
    result may alias the input; pass copy=True for an independent model.
    """
    return _map_params(model, lambda a: np.array(a, dtype=dtype, copy=True) if copy
                       else a.astype(dtype, copy=False))


def copy_model(model: TinyLM) -> TinyLM:
    dt = model.weights.tok_emb.dtype
    return astype(model, dt, copy=True)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TinyLM:
    """Fresh model with Gaussian weights (std 0.02), deterministic per seed.

    All matrices and embeddings are drawn from one generator in a fixed
    order; norm gains start at 1 and biases at 0.
    """
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff

    def mat(rows, cols):
        return rng.normal(0.0, INIT_STD, size=(rows, cols)).astype(dtype)

    tok_emb = mat(config.vocab_size, d)
    pos_emb = mat(config.context_len, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=mat(d, d), wk=mat(d, d), wv=mat(d, d), wo=mat(d, d),
            w_in=mat(d, f), w_out=mat(f, d),
            ln1_g=np.ones(d, dtype=dtype), ln1_b=np.zeros(d, dtype=dtype),
            ln2_g=np.ones(d, dtype=dtype), ln2_b=np.zeros(d, dtype=dtype),
        ))
    weights = Weights(tok_emb, pos_emb, layers,
                      np.ones(d, dtype=dtype), np.zeros(d, dtype=dtype))
    mask = np.ones((config.n_layers, config.n_heads), dtype=dtype)
    return TinyLM(config, weights, mask)


def zero_model(config: ModelConfig, dtype=np.float32) -> TinyLM:
    """Model with every matrix and bias zero and norm gains one.

    Its logits are constant, so next-token distributions are exactly
    uniform; handy as a reference point.
    """
    m = init_model(config, seed=0, dtype=dtype)
    # norm gains and biases from init are already 1 and 0; only matrices vary
    return _map_params(m, lambda a: np.zeros_like(a) if a.ndim == 2 else a)


# ---------------------------------------------------------------------------
# tokenization

def tokenize(text: str | bytes) -> np.ndarray:
    """UTF-8 bytes of text as token ids in [0, 256)."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> str:
    """Inverse of tokenize; invalid UTF-8 byte runs are replaced."""
    toks = np.asarray(tokens)
    if toks.size and (toks.min() < 0 or toks.max() > 255):
        raise DomainError("byte tokens must lie in [0, 256)")
    return bytes(toks.astype(np.uint8).tolist()).decode("utf-8", errors="replace")


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim != 1 or toks.size == 0:
        raise DomainError("token sequence must be 1-D and non-empty")
    if toks.size > config.context_len:
        raise DomainError(
            f"sequence length {toks.size} exceeds context length {config.context_len}"
        )
    if not np.issubdtype(toks.dtype, np.integer):
        raise DomainError("token ids must be integers")
    if toks.min() < 0 or toks.max() >= config.vocab_size:
        raise DomainError(f"token ids must lie in [0, {config.vocab_size})")
    return toks.astype(np.int64)


# ---------------------------------------------------------------------------
# core math

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def gelu(x):
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x ** 3)))


def gelu_grad(x):
    inner = GELU_C * (x + GELU_K * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * GELU_C * (1.0 + 3.0 * GELU_K * x ** 2)


def ln_detail(x, g, b):
    """Layer norm over the last axis; also returns the pieces backprop needs."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * g + b, xhat, inv_std


def layer_norm(x, g, b):
    return ln_detail(x, g, b)[0]


def softmax_rows(x):
    """Softmax over the last axis, accumulated in float64, cast back to x's dtype."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.astype(np.asarray(x).dtype)


def log_softmax_rows(x):
    """Log softmax over the last axis in float64."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class AttentionTrace:
    """Post-softmax attention maps, shape (n_layers, n_heads, seq, seq).

    Rows are recorded before the head keep-mask is applied, so pruned heads
    still show what they would have attended to.
    """

    probs: np.ndarray


# ---------------------------------------------------------------------------
# forward pass

def _forward_full(model: TinyLM, tokens: np.ndarray, want_cache: bool):
    """Single forward implementation behind both inference and backprop.

    Returns (logits, trace, cache); cache is None unless requested.
    """
    cfg = model.config
    W = model.weights
    n = tokens.size
    h_dim, n_heads = cfg.d_head, cfg.n_heads
    dtype = W.tok_emb.dtype

    x = W.tok_emb[tokens] + W.pos_emb[:n]
    mask_lower = np.tril(np.ones((n, n), dtype=bool))
    trace = np.zeros((cfg.n_layers, n_heads, n, n), dtype=dtype)
    cache: dict | None = {"x_emb": x, "layers": []} if want_cache else None

    for li, lw in enumerate(W.layers):
        x_in = x
        a, xhat1, inv1 = ln_detail(x_in, lw.ln1_g, lw.ln1_b)
        q = a @ dense_weight(lw.wq, dtype)
        k = a @ dense_weight(lw.wk, dtype)
        v = a @ dense_weight(lw.wv, dtype)
        qh = q.reshape(n, n_heads, h_dim).transpose(1, 0, 2)
        kh = k.reshape(n, n_heads, h_dim).transpose(1, 0, 2)
        vh = v.reshape(n, n_heads, h_dim).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(h_dim)
        scores = np.where(mask_lower, scores, -np.inf)
        probs = softmax_rows(scores)
        trace[li] = probs
        head_keep = model.head_mask[li].astype(dtype)[:, None, None]
        ctx = (probs @ vh) * head_keep
        merged = ctx.transpose(1, 0, 2).reshape(n, cfg.d_model)
        x_mid = x_in + merged @ dense_weight(lw.wo, dtype)
        h, xhat2, inv2 = ln_detail(x_mid, lw.ln2_g, lw.ln2_b)
        u = h @ dense_weight(lw.w_in, dtype)
        act = gelu(u)
        x = x_mid + act @ dense_weight(lw.w_out, dtype)
        if want_cache:
            cache["layers"].append({
                "x_in": x_in, "a": a, "xhat1": xhat1, "inv1": inv1,
                "qh": qh, "kh": kh, "vh": vh, "probs": probs,
                "merged": merged, "x_mid": x_mid,
                "h": h, "xhat2": xhat2, "inv2": inv2, "u": u, "act": act,
            })

    xf, xhatf, invf = ln_detail(x, W.ln_f_g, W.ln_f_b)
    logits = xf @ dense_weight(W.tok_emb, dtype).T
    if want_cache:
        cache["x_last"] = x
        cache["xf"] = xf
        cache["xhatf"] = xhatf
        cache["invf"] = invf
    return logits, AttentionTrace(trace), cache


def forward(model: TinyLM, tokens) -> tuple[np.ndarray, AttentionTrace]:
    """Logits (seq, vocab) and attention trace for one sequence."""
    toks = _check_tokens(tokens, model.config)
    logits, trace, _ = _forward_full(model, toks, want_cache=False)
    return logits, trace


# ---------------------------------------------------------------------------
# likelihoods

def mean_nll(logits, targets) -> float:
    """Mean negative log-likelihood of targets under row-wise softmax, in nats.

    Accumulates in float64 regardless of the logits dtype.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if z.ndim != 2:
        raise DomainError("logits must be 2-D (positions, vocab)")
    if t.ndim != 1 or t.size != z.shape[0]:
        raise DomainError("need exactly one target per logit row")
    if t.size == 0:
        raise DomainError("mean_nll needs at least one position")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= z.shape[1]:
        raise DomainError("targets must be valid class indices")
    ls = log_softmax_rows(z)
    return float(-ls[np.arange(t.size), t].mean())


def perplexity(model: TinyLM, corpus, window: int | None = None,
               stride: int | None = None) -> float:
    """exp(mean NLL per token) of the corpus, scored in windows.

    By default the corpus is cut into independent chunks of context_len
    tokens; inside each chunk every token with a predecessor is scored once,
    so the first token of each chunk is never scored.  A stride smaller than
    the window slides the window instead, giving each newly scored token at
    least window - stride tokens of context; every token is still scored
    exactly once.
    """
    cfg = model.config
    if window is None:
        window = cfg.context_len
    if stride is None:
        stride = window
    if not 1 <= window <= cfg.context_len:
        raise DomainError(f"window must lie in [1, {cfg.context_len}]")
    if not 1 <= stride <= window:
        raise DomainError("stride must lie in [1, window]")
    toks = np.asarray(corpus)
    if toks.ndim != 1 or toks.size < 2:
        raise DomainError("perplexity needs a corpus of at least 2 tokens")

    total = 0.0
    count = 0
    start = 0
    scored_upto = 1  # corpus position 0 has no predecessor anywhere
    n = toks.size
    while scored_upto < n:
        end = min(start + window, n)
        first = max(scored_upto, start + 1)
        if first < end:
            chunk = _check_tokens(toks[start:end], cfg)
            logits, _, _ = _forward_full(model, chunk, want_cache=False)
            idx = np.arange(first, end)
            rows = logits[idx - 1 - start]
            total += mean_nll(rows, chunk[idx - start]) * idx.size
            count += idx.size
        scored_upto = end
        start += stride
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# generation

def generate(model: TinyLM, prompt, steps: int, mode: str = "greedy",
             temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    """Continue prompt by steps tokens; returns prompt plus continuation.

    greedy takes the argmax at each step; sample draws from the
    temperature-scaled softmax with a generator seeded by seed, so results
    are reproducible.  Greedy is the temperature -> 0 limit of sampling.
    """
    toks = _check_tokens(prompt, model.config)
    if steps < 0:
        raise DomainError("steps must be non-negative")
    if toks.size + steps > model.config.context_len:
        raise DomainError(
            f"prompt of {toks.size} plus {steps} steps exceeds context length "
            f"{model.config.context_len}"
        )
    if mode not in ("greedy", "sample"):
        raise DomainError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    if mode == "sample" and temperature <= 0:
        raise DomainError("temperature must be positive")

    rng = np.random.default_rng(seed)
    seq = list(toks)
    for _ in range(steps):
        logits, _, _ = _forward_full(model, np.asarray(seq, dtype=np.int64), want_cache=False)
        last = np.asarray(logits[-1], dtype=np.float64)
        if mode == "greedy":
            nxt = int(np.argmax(last))
        else:
            z = (last - last.max()) / temperature
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(p.size, p=p))
        seq.append(nxt)
    return np.asarray(seq, dtype=np.int64)


# ---------------------------------------------------------------------------
# persistence

_HEAD_MASK_NAME = "head_mask"


def _config_dict(cfg: ModelConfig) -> dict:
    return {
        "n_layers": cfg.n_layers, "n_heads": cfg.n_heads,
        "d_model": cfg.d_model, "d_ff": cfg.d_ff,
        "vocab_size": cfg.vocab_size, "context_len": cfg.context_len,
    }


def _expected_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.context_len, d)),
    ]
    per_layer = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w_in": (d, f), "w_out": (f, d),
        "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }
    for i in range(cfg.n_layers):
        for attr in _LAYER_TENSOR_NAMES:
            shapes.append((f"layers.{i}.{attr}", per_layer[attr]))
    shapes.append(("ln_f.g", (d,)))
    shapes.append(("ln_f.b", (d,)))
    shapes.append((_HEAD_MASK_NAME, (cfg.n_layers, cfg.n_heads)))
    return shapes


def save_model(model: TinyLM, path) -> None:
    """Write the model to path.

    The file is one JSON header line (config plus an ordered tensor table of
    name, shape, and byte offset into the payload) followed by the raw
    little-endian float32 tensor payloads in table order.  Quantized views
    are materialized dense, so a reloaded model reproduces the quantized
    forward pass without needing the codes.
    """
    entries = [(name, dense_weight(t)) for name, t in param_tensors(model)]
    entries.append((_HEAD_MASK_NAME, model.head_mask))
    table = []
    payloads = []
    offset = 0
    for name, arr in entries:
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        payloads.append(a.tobytes())
        offset += a.nbytes
    header = {"config": _config_dict(model.config), "tensors": table}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("ascii"))
        fh.write(b"\n")
        for p in payloads:
            fh.write(p)


def load_model(path) -> TinyLM:
    """Read a model written by save_model; malformed files raise FormatError."""
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise FormatError("missing header line", offset=0)
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", 0)
        raise FormatError(f"header is not valid JSON: {exc}", offset=pos) from exc
    if not isinstance(header, dict) or "config" not in header or "tensors" not in header:
        raise FormatError("header must carry 'config' and 'tensors'", offset=0)
    try:
        cfg = ModelConfig(**header["config"])
    except (TypeError, DomainError) as exc:
        raise FormatError(f"bad config: {exc}", offset=0) from exc

    expected = _expected_shapes(cfg)
    tensors = header["tensors"]
    if not isinstance(tensors, list) or len(tensors) != len(expected):
        raise FormatError(
            f"expected {len(expected)} tensors for this config, header lists "
            f"{len(tensors) if isinstance(tensors, list) else 'none'}",
            offset=0,
        )
    payload_start = newline + 1
    offset = 0
    parsed = []
    for entry, (want_name, want_shape) in zip(tensors, expected):
        if not isinstance(entry, dict) or set(entry) != {"name", "shape", "offset"}:
            raise FormatError("tensor table entries need name, shape, offset", offset=0)
        if entry["name"] != want_name:
            raise FormatError(
                f"tensor {entry['name']!r} where {want_name!r} was expected",
                offset=payload_start + offset,
            )
        if tuple(entry["shape"]) != want_shape:
            raise FormatError(
                f"{want_name}: shape {tuple(entry['shape'])} does not match "
                f"config shape {want_shape}",
                offset=payload_start + offset,
            )
        if entry["offset"] != offset:
            raise FormatError(
                f"{want_name}: offset {entry['offset']} is not contiguous "
                f"(expected {offset})",
                offset=payload_start + offset,
            )
        size = int(np.prod(want_shape)) * 4
        parsed.append((want_name, want_shape, offset, size))
        offset += size

    payload = data[payload_start:]
    if len(payload) < offset:
        raise FormatError("payload truncated", offset=payload_start + len(payload))
    if len(payload) > offset:
        raise FormatError("trailing bytes after last tensor", offset=payload_start + offset)

    arrays = {}
    for name, shape, off, size in parsed:
        arrays[name] = np.frombuffer(payload[off:off + size], dtype="<f4").reshape(shape).copy()

    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerWeights(**{
            attr: arrays[f"layers.{i}.{attr}"] for attr in _LAYER_TENSOR_NAMES
        }))
    weights = Weights(arrays["tok_emb"], arrays["pos_emb"], layers,
                      arrays["ln_f.g"], arrays["ln_f.b"])
    return TinyLM(cfg, weights, arrays[_HEAD_MASK_NAME])
