"""Minimal decoder-only transformer inference engine.

Architecture: pre-norm blocks, learned absolute positions, multi-head causal
attention, plain two-matrix MLP (up-projection, GELU, down-projection), no
biases on any projection, untied unembedding. The down-projection of layer
``i`` is the tensor ``layers.{i}.mlp.w_down`` with shape (d_model, d_mlp):
it maps the post-GELU activation (the "key") to the MLP block output (the
"value"), so installing a new (key, value) pair is a rank-one change to
this one matrix.

The forward pass is instrumented three ways:
  * taps — read out intermediate activations (post-GELU key, MLP output,
    or the concatenated q/k/v projections) at chosen (layer, position);
  * value override — replace the MLP block output at one (layer, position)
    with a caller-supplied vector before the residual addition;
  * prefix cache — reuse attention K/V states for a fixed token prefix so
    repeated forwards only recompute suffix positions.

All accumulation happens in float64 regardless of storage precision;
weights are stored float32 (or int8 + scale when quantized, see quant.py).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from . import telemetry
from .errors import (
    CacheInvalidError,
    ConfigurationError,
    InputError,
    NumericError,
)

LAST_SUBJECT_TOKEN = "last-subject-token"

TAP_SITES = ("mlp_post_activation", "mlp_output", "attention_qkv")


# ---------------------------------------------------------------------------
# configuration and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_mlp: int
    n_heads: int
    vocab_size: int
    max_seq_len: int
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_mlp", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not (self.norm_epsilon > 0):
            raise ConfigurationError("norm_epsilon must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "d_mlp": self.d_mlp,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "norm_epsilon": self.norm_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def tensor_shapes(config: ModelConfig) -> dict:
    """Names and shapes of every tensor in a bundle, in canonical order."""
    d, dm = config.d_model, config.d_mlp
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.weight"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.attn.w_q"] = (d, d)
        shapes[f"{p}.attn.w_k"] = (d, d)
        shapes[f"{p}.attn.w_v"] = (d, d)
        shapes[f"{p}.attn.w_o"] = (d, d)
        shapes[f"{p}.ln2.weight"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.mlp.w_up"] = (dm, d)
        shapes[f"{p}.mlp.w_down"] = (d, dm)
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["unembed"] = (config.vocab_size, d)
    return shapes


def activation_sites(config: ModelConfig) -> list:
    """Activation-quantization site names, at block boundaries."""
    sites = []
    for i in range(config.n_layers):
        sites += [
            f"layer{i}.ln1_out",
            f"layer{i}.attn_out",
            f"layer{i}.ln2_out",
            f"layer{i}.mlp_out",
        ]
    sites.append("final_norm_out")
    return sites


def init_weights(config: ModelConfig, seed: int, init_std: float = 0.02) -> dict:
    """Random GPT-2 style initialization (float32)."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_f.weight":
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            weights[name] = rng.normal(0.0, init_std, size=shape).astype(np.float32)
    return weights


@dataclass
class ModelBundle:
    """Weights + config (+ optional quantization state). Immutable by contract:
    editing returns a new bundle sharing untouched tensors (copy-on-write)."""

    config: ModelConfig
    weights: dict
    precision_state: str = "full"  # or "mixed-quantized"
    quant: Optional[object] = None  # quant.QuantizedWeights when mixed-quantized
    _f64: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.weights:
                raise ConfigurationError(f"missing tensor {name!r}")
            got = self.weights[name].shape
            if tuple(got) != tuple(shape):
                raise ConfigurationError(f"tensor {name!r} has shape {got}, expected {shape}")
        if self.precision_state not in ("full", "mixed-quantized"):
            raise ConfigurationError(f"unknown precision_state {self.precision_state!r}")
        if self.precision_state == "mixed-quantized" and self.quant is None:
            raise ConfigurationError("mixed-quantized bundle requires quant state")

    def w64(self, name: str) -> np.ndarray:
        """Dequantized float64 view of a tensor, cached per bundle."""
        arr = self._f64.get(name)
        if arr is None:
            raw = self.weights[name]
            if raw.dtype == np.int8:
                scale = self.quant.spec.weight_scales[name]
                arr = raw.astype(np.float64) * scale
            else:
                arr = raw.astype(np.float64)
            self._f64[name] = arr
        return arr

    def int64f(self, name: str) -> np.ndarray:
        """Integer codes of a quantized tensor as float64 (exact ints)."""
        key = "int64f:" + name
        arr = self._f64.get(key)
        if arr is None:
            raw = self.weights[name]
            if raw.dtype != np.int8:
                raise ConfigurationError(f"tensor {name!r} is not quantized")
            arr = raw.astype(np.float64)
            self._f64[key] = arr
        return arr

    def is_quantized_tensor(self, name: str) -> bool:
        return self.weights[name].dtype == np.int8

    def with_tensors(self, replacements: dict) -> "ModelBundle":
        new = dict(self.weights)
        new.update(replacements)
        return ModelBundle(self.config, new, self.precision_state, self.quant)

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in tensor_shapes(self.config).values())


def replace_downproj(model: ModelBundle, layer: int, new_matrix: np.ndarray) -> ModelBundle:
    """Return a bundle identical to `model` except the down-projection of
    `layer` is `new_matrix`. The input bundle is left untouched."""
    name = f"layers.{layer}.mlp.w_down"
    if not (0 <= layer < model.config.n_layers):
        raise ConfigurationError(f"layer {layer} out of range")
    old = model.weights[name]
    if tuple(new_matrix.shape) != tuple(old.shape):
        raise ConfigurationError(
            f"down-projection shape {new_matrix.shape} != expected {old.shape}"
        )
    if old.dtype == np.int8:
        raise ConfigurationError(
            f"{name} is stored int8; quantized bundles only support editing the "
            "floating-point island (check the mixed-precision policy's edit layer)"
        )
    return model.with_tensors({name: np.asarray(new_matrix, dtype=old.dtype).copy()})


# ---------------------------------------------------------------------------
# instrumentation requests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TapRequest:
    """Read an intermediate activation at (layer, site, position).

    position is a token index, the string "last-subject-token" (requires
    subject_span=(start, end) within the token sequence), or "all" for the
    full (positions, dim) matrix of computed positions.
    """

    layer: int
    site: str
    position: Union[int, str]
    subject_span: Optional[tuple] = None

    def resolve_position(self, n_tokens: int):
        if self.position == LAST_SUBJECT_TOKEN:
            if self.subject_span is None:
                raise InputError("last-subject-token tap requires subject_span")
            start, end = self.subject_span
            if not (0 <= start < end <= n_tokens):
                raise InputError(f"subject_span {self.subject_span} invalid for length {n_tokens}")
            return end - 1
        if self.position == "all":
            return "all"
        pos = int(self.position)
        if not (0 <= pos < n_tokens):
            raise InputError(f"tap position {pos} out of range for length {n_tokens}")
        return pos


@dataclass(frozen=True)
class ValueOverride:
    """Replace the MLP block output at (layer, position) with `vector`
    before the residual addition. The vector is used exactly as given —
    it is never re-quantized, whatever the bundle's precision state."""

    layer: int
    position: int
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))


@dataclass
class PrefixCache:
    """Per-layer attention K/V states for token positions [0, boundary)."""

    boundary: int
    prefix_tokens: np.ndarray
    keys: list  # per layer: (n_heads, boundary, head_dim)
    values: list
    build_step: int = 0
    valid: bool = True


@dataclass
class ForwardResult:
    logits: np.ndarray  # (n_computed, vocab), float64
    start: int  # absolute position of logits[0]
    taps: dict  # TapRequest -> np.ndarray
    kv_keys: Optional[list] = None  # populated when collect_kv=True
    kv_values: Optional[list] = None

    def logits_at(self, pos: int) -> np.ndarray:
        if pos < self.start:
            raise InputError(f"position {pos} was served from the prefix cache; no logits")
        return self.logits[pos - self.start]


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_prob(logits: np.ndarray, token: int) -> float:
    """Log-probability of `token` under softmax(logits). Always <= 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise InputError("log_prob expects logits for a single position")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits passed to log_prob")
    if not (0 <= token < logits.shape[0]):
        raise InputError(f"token {token} out of vocab ({logits.shape[0]})")
    return float(log_softmax(logits)[token])


def kl_divergence(logits_p: np.ndarray, logits_q: np.ndarray) -> float:
    """KL(softmax(p) || softmax(q)); >= 0, and 0 iff the distributions match."""
    logits_p = np.asarray(logits_p, dtype=np.float64)
    logits_q = np.asarray(logits_q, dtype=np.float64)
    if logits_p.shape != logits_q.shape:
        raise InputError(f"vocab mismatch: {logits_p.shape} vs {logits_q.shape}")
    if not (np.isfinite(logits_p).all() and np.isfinite(logits_q).all()):
        raise NumericError("non-finite logits passed to kl_divergence")
    lp = log_softmax(logits_p)
    lq = log_softmax(logits_q)
    return float(max(0.0, np.sum(np.exp(lp) * (lp - lq))))


# ---------------------------------------------------------------------------
# quantized-execution helper
# ---------------------------------------------------------------------------


class _Exec:
    """Execution strategy for one forward pass.

    Full precision: straight float64 matmuls. Mixed-quantized: activations
    are snapped to their int16 grid at block-boundary sites (except sites on
    the floating-point island), and matmuls whose input sits on a known grid
    run as exact integer products rescaled afterwards. Matmuls fed by
    non-boundary activations (attention context into w_o, the GELU output
    into a non-island w_down) use the dequantized int8 weights directly.
    """

    def __init__(self, model: ModelBundle):
        self.model = model
        self.quantized = model.precision_state == "mixed-quantized"
        if self.quantized:
            self.spec = model.quant.spec
            self.policy = model.quant.policy
            self.act_qmax = float(2 ** (self.spec.activation_bits - 1) - 1)

    def site(self, x: np.ndarray, name: str) -> np.ndarray:
        """Snap activation to its calibrated int16 grid (skip fp sites)."""
        if not self.quantized or name in self.policy.fp_sites:
            return x
        scale = self.spec.activation_scales.get(name)
        if scale is None:
            raise ConfigurationError(f"no activation scale for site {name!r}")
        q = np.clip(np.rint(x / scale), -self.act_qmax, self.act_qmax)
        return q * scale

    def site_scale(self, name: str):
        if not self.quantized or name in self.policy.fp_sites:
            return None
        return self.spec.activation_scales.get(name)

    def matmul(self, x: np.ndarray, wname: str, in_site: Optional[str] = None) -> np.ndarray:
        """x @ W.T for weight tensor `wname`; counts FLOPs."""
        m = int(np.prod(x.shape[:-1]))
        w = self.model.weights[wname]
        telemetry.add_matmul_flops(m, x.shape[-1], w.shape[0])
        if self.quantized and self.model.is_quantized_tensor(wname):
            s_w = self.spec.weight_scales[wname]
            s_a = self.site_scale(in_site) if in_site else None
            iw = self.model.int64f(wname)
            if s_a is not None:
                # exact integer product: |int16 * int8 * k| stays below 2^53
                ia = np.rint(x / s_a)
                return (ia @ iw.T) * (s_a * s_w)
            return x @ (iw.T * s_w)
        return x @ self.model.w64(wname).T


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _check_finite(x: np.ndarray, layer, what: str):
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite {what} at layer {layer}", layer=layer)


def forward(
    model: ModelBundle,
    tokens: Sequence[int],
    taps: Sequence[TapRequest] = (),
    override: Optional[ValueOverride] = None,
    cache: Optional[PrefixCache] = None,
    collect_kv: bool = False,
) -> ForwardResult:
    """Run the model over `tokens`, honoring taps, override, and cache.

    Returns logits for every computed position (all of them, or only
    positions >= cache.boundary when a cache is supplied). Deterministic:
    identical inputs produce identical outputs.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    T = int(tokens.shape[0])
    if T > cfg.max_seq_len:
        raise InputError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError("token id out of vocabulary")

    start = 0
    if cache is not None:
        if not cache.valid:
            raise CacheInvalidError("prefix cache marked invalid")
        if cache.boundary >= T:
            raise InputError(
                f"cache boundary {cache.boundary} leaves no positions to compute (T={T})"
            )
        if not np.array_equal(tokens[: cache.boundary], cache.prefix_tokens):
            raise CacheInvalidError("tokens do not match the cached prefix")
        start = cache.boundary

    if override is not None:
        if not (0 <= override.layer < cfg.n_layers):
            raise ConfigurationError(f"override layer {override.layer} out of range")
        if not (0 <= override.position < T):
            raise ConfigurationError(f"override position {override.position} out of range")
        if override.vector.shape != (cfg.d_model,):
            raise ConfigurationError(
                f"override vector has shape {override.vector.shape}, expected ({cfg.d_model},)"
            )
        if not np.isfinite(override.vector).all():
            raise NumericError("override vector is not finite")
        if override.position < start:
            raise InputError("override position falls inside the cached prefix")

    # resolve taps up front; group them by layer
    taps_by_layer = {}
    for tap in taps:
        if tap.site not in TAP_SITES:
            raise InputError(f"unknown tap site {tap.site!r}")
        if not (0 <= tap.layer < cfg.n_layers):
            raise InputError(f"tap layer {tap.layer} out of range")
        pos = tap.resolve_position(T)
        if pos != "all" and pos < start:
            raise InputError(f"tap position {pos} falls inside the cached prefix")
        taps_by_layer.setdefault(tap.layer, []).append((tap, pos))

    ex = _Exec(model)
    H, hd = cfg.n_heads, cfg.head_dim
    n_new = T - start

    x = model.w64("tok_emb")[tokens[start:]] + model.w64("pos_emb")[start:T]
    tapped = {}
    new_keys, new_values = [], []

    for i in range(cfg.n_layers):
        p = f"layers.{i}"

        h1 = layer_norm(x, model.w64(f"{p}.ln1.weight"), model.w64(f"{p}.ln1.bias"), cfg.norm_epsilon)
        h1 = ex.site(h1, f"layer{i}.ln1_out")
        q = ex.matmul(h1, f"{p}.attn.w_q", in_site=f"layer{i}.ln1_out")
        k = ex.matmul(h1, f"{p}.attn.w_k", in_site=f"layer{i}.ln1_out")
        v = ex.matmul(h1, f"{p}.attn.w_v", in_site=f"layer{i}.ln1_out")

        for tap, pos in taps_by_layer.get(i, ()):
            if tap.site == "attention_qkv":
                if pos == "all":
                    tapped[tap] = np.concatenate([q, k, v], axis=-1).copy()
                else:
                    tapped[tap] = np.concatenate([q[pos - start], k[pos - start], v[pos - start]])

        qh = q.reshape(n_new, H, hd).transpose(1, 0, 2)
        kh = k.reshape(n_new, H, hd).transpose(1, 0, 2)
        vh = v.reshape(n_new, H, hd).transpose(1, 0, 2)
        if cache is not None:
            k_all = np.concatenate([cache.keys[i], kh], axis=1)
            v_all = np.concatenate([cache.values[i], vh], axis=1)
        else:
            k_all, v_all = kh, vh
        if collect_kv:
            new_keys.append(k_all)
            new_values.append(v_all)

        scores = qh @ k_all.transpose(0, 2, 1) / math.sqrt(hd)
        telemetry.add_matmul_flops(H * n_new, hd, T)
        # causal mask over absolute positions
        q_pos = np.arange(start, T)[:, None]
        k_pos = np.arange(T)[None, :]
        scores = np.where(k_pos > q_pos, -np.inf, scores)
        probs = softmax(scores)
        ctx = probs @ v_all
        telemetry.add_matmul_flops(H * n_new, T, hd)
        ctx = ctx.transpose(1, 0, 2).reshape(n_new, cfg.d_model)

        attn_out = ex.matmul(ctx, f"{p}.attn.w_o")
        attn_out = ex.site(attn_out, f"layer{i}.attn_out")
        x = x + attn_out

        h2 = layer_norm(x, model.w64(f"{p}.ln2.weight"), model.w64(f"{p}.ln2.bias"), cfg.norm_epsilon)
        h2 = ex.site(h2, f"layer{i}.ln2_out")
        pre = ex.matmul(h2, f"{p}.mlp.w_up", in_site=f"layer{i}.ln2_out")
        k_act = gelu(pre)

        for tap, pos in taps_by_layer.get(i, ()):
            if tap.site == "mlp_post_activation":
                tapped[tap] = k_act.copy() if pos == "all" else k_act[pos - start].copy()

        mlp_out = ex.matmul(k_act, f"{p}.mlp.w_down")

        ovr_row = None
        if override is not None and override.layer == i:
            ovr_row = override.position - start
            mlp_out[ovr_row] = override.vector

        for tap, pos in taps_by_layer.get(i, ()):
            if tap.site == "mlp_output":
                tapped[tap] = mlp_out.copy() if pos == "all" else mlp_out[pos - start].copy()

        quantized_out = ex.site(mlp_out, f"layer{i}.mlp_out")
        if ovr_row is not None and quantized_out is not mlp_out:
            quantized_out[ovr_row] = override.vector  # the override path stays exact
        x = x + quantized_out
        _check_finite(x, i, "residual stream")

    h = layer_norm(x, model.w64("ln_f.weight"), model.w64("ln_f.bias"), cfg.norm_epsilon)
    h = ex.site(h, "final_norm_out")
    logits = ex.matmul(h, "unembed", in_site="final_norm_out")
    _check_finite(logits, cfg.n_layers - 1, "logits")

    telemetry.COUNTERS.forward_calls += 1
    return ForwardResult(
        logits=logits,
        start=start,
        taps=tapped,
        kv_keys=new_keys if collect_kv else None,
        kv_values=new_values if collect_kv else None,
    )


def build_prefix_cache(model: ModelBundle, prefix_tokens: Sequence[int]) -> PrefixCache:
    """Run the prefix once and keep its attention K/V states for reuse."""
    prefix_tokens = np.asarray(prefix_tokens, dtype=np.int64)
    if prefix_tokens.ndim != 1 or prefix_tokens.shape[0] == 0:
        raise InputError("prefix must be non-empty")
    if prefix_tokens.shape[0] > model.config.max_seq_len:
        raise InputError("prefix exceeds max_seq_len")
    res = forward(model, prefix_tokens, collect_kv=True)
    return PrefixCache(
        boundary=int(prefix_tokens.shape[0]),
        prefix_tokens=prefix_tokens.copy(),
        keys=res.kv_keys,
        values=res.kv_values,
    )


def greedy_decode(
    model: ModelBundle,
    tokens: Sequence[int],
    n_new: int,
    override: Optional[ValueOverride] = None,
) -> list:
    """Greedy continuation of `tokens` by `n_new` tokens (argmax ties break
    toward the lowest token id)."""
    out = list(tokens)
    for _ in range(n_new):
        res = forward(model, out, override=override)
        out.append(int(np.argmax(res.logits[-1])))
    return out[len(tokens):]


def decode_matches(
    model: ModelBundle,
    prompt: Sequence[int],
    target: Sequence[int],
    override: Optional[ValueOverride] = None,
) -> tuple:
    """Teacher-forced check that greedy decoding of `prompt` yields `target`.

    Equivalent to rolling out len(target) greedy steps (the argmax chain is
    identical) but needs a single forward. Returns (matches, joint_logprob).
    """
    target = list(target)
    if not target:
        raise InputError("empty target")
    seq = list(prompt) + target[:-1]
    res = forward(model, seq, override=override)
    base = len(prompt) - 1
    ok = True
    joint = 0.0
    for i, tok in enumerate(target):
        row = res.logits_at(base + i)
        if int(np.argmax(row)) != tok:
            ok = False
        joint += log_prob(row, tok)
    return ok, joint
