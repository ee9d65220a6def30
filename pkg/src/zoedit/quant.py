"""Static post-training quantization with a mixed-precision editing island.

Weights: symmetric linear per-tensor int8 (no zero point), scale chosen so
max|W| maps to 127. Activations: symmetric int16 snapped at block-boundary
sites (post-norm, post-attention, post-MLP), with scales calibrated from
per-site max-abs over a representative corpus. Scales are frozen after
calibration — nothing adapts during editing.

The mixed-precision policy keeps the editing island in float32: the edit
layer's down-projection, the same layer's up-projection (its preceding
linear layer), and the activation sites on the value/override path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .model import ModelBundle, ModelConfig, activation_sites, forward, tensor_shapes


@dataclass(frozen=True)
class QuantSpec:
    """Frozen quantization parameters: bit widths and per-tensor/site scales."""

    weight_scales: dict
    activation_scales: dict
    weight_bits: int = 8
    activation_bits: int = 16

    def __post_init__(self):
        for name, s in list(self.weight_scales.items()) + list(self.activation_scales.items()):
            if not (s > 0 and np.isfinite(s)):
                raise ConfigurationError(f"scale for {name!r} must be positive and finite")

    def fingerprint(self) -> str:
        """Stable hash of the full scale map; used to assert scale staticity."""
        blob = json.dumps(
            {
                "w": {k: self.weight_scales[k].hex() for k in sorted(self.weight_scales)},
                "a": {k: self.activation_scales[k].hex() for k in sorted(self.activation_scales)},
                "wb": self.weight_bits,
                "ab": self.activation_bits,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class MixedPrecisionPolicy:
    edit_layer: int
    fp_tensors: frozenset
    fp_sites: frozenset

    @classmethod
    def default(cls, config: ModelConfig, edit_layer: int) -> "MixedPrecisionPolicy":
        """Editing island: edit layer's down-projection + up-projection stay
        float, along with the MLP input/output sites of that layer."""
        if not (0 <= edit_layer < config.n_layers):
            raise ConfigurationError(f"edit_layer {edit_layer} out of range")
        return cls(
            edit_layer=edit_layer,
            fp_tensors=frozenset(
                {f"layers.{edit_layer}.mlp.w_up", f"layers.{edit_layer}.mlp.w_down"}
            ),
            fp_sites=frozenset(
                {f"layer{edit_layer}.ln2_out", f"layer{edit_layer}.mlp_out"}
            ),
        )

    @classmethod
    def all_fp(cls, config: ModelConfig) -> "MixedPrecisionPolicy":
        """Degenerate policy: nothing is quantized (useful as a no-op check)."""
        return cls(
            edit_layer=0,
            fp_tensors=frozenset(tensor_shapes(config)),
            fp_sites=frozenset(activation_sites(config)),
        )

    def to_dict(self) -> dict:
        return {
            "edit_layer": self.edit_layer,
            "fp_tensors": sorted(self.fp_tensors),
            "fp_sites": sorted(self.fp_sites),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedPrecisionPolicy":
        return cls(
            edit_layer=d["edit_layer"],
            fp_tensors=frozenset(d["fp_tensors"]),
            fp_sites=frozenset(d["fp_sites"]),
        )


@dataclass
class QuantizedWeights:
    """Quantization state attached to a mixed-quantized ModelBundle."""

    spec: QuantSpec
    policy: MixedPrecisionPolicy

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.spec.weight_bits,
            "activation_bits": self.spec.activation_bits,
            # float.hex() round-trips exactly through JSON
            "weight_scales": {k: v.hex() for k, v in self.spec.weight_scales.items()},
            "activation_scales": {k: v.hex() for k, v in self.spec.activation_scales.items()},
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedWeights":
        spec = QuantSpec(
            weight_scales={k: float.fromhex(v) for k, v in d["weight_scales"].items()},
            activation_scales={k: float.fromhex(v) for k, v in d["activation_scales"].items()},
            weight_bits=d["weight_bits"],
            activation_bits=d["activation_bits"],
        )
        return cls(spec=spec, policy=MixedPrecisionPolicy.from_dict(d["policy"]))


@dataclass
class CalibrationStats:
    """Running per-site max-abs over a calibration corpus."""

    site_max_abs: dict
    sample_count: int = 0

    def update(self, site: str, values: np.ndarray) -> None:
        m = float(np.abs(values).max()) if values.size else 0.0
        self.site_max_abs[site] = max(self.site_max_abs.get(site, 0.0), m)


def calibrate(model: ModelBundle, corpus: Sequence[Sequence[int]]) -> CalibrationStats:
    """Run full-precision forwards over `corpus`, recording max-abs at every
    activation site. Deterministic for a fixed corpus order."""
    if len(corpus) == 0:
        raise InputError("calibration corpus is empty")
    if model.precision_state != "full":
        raise ConfigurationError("calibrate expects a full-precision model")
    stats = CalibrationStats(site_max_abs={s: 0.0 for s in activation_sites(model.config)})
    for seq in corpus:
        _forward_with_site_hook(model, seq, stats.update)
        stats.sample_count += 1
    return stats


def _forward_with_site_hook(model: ModelBundle, tokens, hook) -> None:
    # Re-runs the full-precision forward, mirroring model.forward's site
    # boundaries. Kept in quant.py so the engine's hot path stays hook-free.
    from . import model as M

    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    x = model.w64("tok_emb")[tokens] + model.w64("pos_emb")[: len(tokens)]
    H, hd = cfg.n_heads, cfg.head_dim
    T = len(tokens)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h1 = M.layer_norm(x, model.w64(f"{p}.ln1.weight"), model.w64(f"{p}.ln1.bias"), cfg.norm_epsilon)
        hook(f"layer{i}.ln1_out", h1)
        q = h1 @ model.w64(f"{p}.attn.w_q").T
        k = h1 @ model.w64(f"{p}.attn.w_k").T
        v = h1 @ model.w64(f"{p}.attn.w_v").T
        qh = q.reshape(T, H, hd).transpose(1, 0, 2)
        kh = k.reshape(T, H, hd).transpose(1, 0, 2)
        vh = v.reshape(T, H, hd).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(hd)
        mask = np.arange(T)[None, :] > np.arange(T)[:, None]
        scores = np.where(mask, -np.inf, scores)
        probs = M.softmax(scores)
        ctx = (probs @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
        attn_out = ctx @ model.w64(f"{p}.attn.w_o").T
        hook(f"layer{i}.attn_out", attn_out)
        x = x + attn_out
        h2 = M.layer_norm(x, model.w64(f"{p}.ln2.weight"), model.w64(f"{p}.ln2.bias"), cfg.norm_epsilon)
        hook(f"layer{i}.ln2_out", h2)
        mlp_out = M.gelu(h2 @ model.w64(f"{p}.mlp.w_up").T) @ model.w64(f"{p}.mlp.w_down").T
        hook(f"layer{i}.mlp_out", mlp_out)
        x = x + mlp_out
    h = M.layer_norm(x, model.w64("ln_f.weight"), model.w64("ln_f.bias"), cfg.norm_epsilon)
    hook("final_norm_out", h)


def quantize_tensor(arr: np.ndarray, bits: int = 8) -> tuple:
    """Symmetric per-tensor quantization. Returns (int codes, scale)."""
    qmax = 2 ** (bits - 1) - 1
    max_abs = float(np.abs(arr).max())
    scale = max(max_abs, 1e-12) / qmax
    q = np.clip(np.rint(arr / scale), -qmax, qmax)
    return q.astype(np.int8 if bits == 8 else np.int16), float(scale)


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


def quantize_model(
    model: ModelBundle,
    stats: CalibrationStats,
    policy: MixedPrecisionPolicy,
) -> ModelBundle:
    """Produce a mixed-quantized bundle: int8 weights + int16 activation
    scales everywhere except the policy's floating-point island."""
    if model.precision_state != "full":
        raise ConfigurationError("quantize_model expects a full-precision model")
    if stats.sample_count < 1:
        raise ConfigurationError("calibration stats are empty (sample_count == 0)")

    act_qmax = 2 ** (16 - 1) - 1
    activation_scales = {}
    for site in activation_sites(model.config):
        if site in policy.fp_sites:
            continue
        if site not in stats.site_max_abs:
            raise ConfigurationError(f"calibration stats missing site {site!r}")
        activation_scales[site] = max(stats.site_max_abs[site], 1e-12) / act_qmax

    weights = {}
    weight_scales = {}
    for name, arr in model.weights.items():
        if name in policy.fp_tensors:
            weights[name] = arr.copy()
        else:
            q, scale = quantize_tensor(arr, bits=8)
            weights[name] = q
            weight_scales[name] = scale

    spec = QuantSpec(weight_scales=weight_scales, activation_scales=activation_scales)
    return ModelBundle(
        config=model.config,
        weights=weights,
        precision_state="mixed-quantized",
        quant=QuantizedWeights(spec=spec, policy=policy),
    )


def fp_flop_fraction(config: ModelConfig, policy: MixedPrecisionPolicy, seq_len: int = 128) -> float:
    """Analytic fraction of matmul FLOPs executed in floating point under a
    policy, for one forward over `seq_len` tokens. Attention score/context
    products always run in float (softmax stays floating point)."""
    T = seq_len
    d, dm, V = config.d_model, config.d_mlp, config.vocab_size

    def weight_flops(name, out_dim, in_dim):
        return 2 * T * in_dim * out_dim

    total = 0
    fp = 0
    # scores + context products, dense accounting (matches the engine's counter)
    attn_mix = 2 * 2 * config.n_heads * T * T * config.head_dim
    for i in range(config.n_layers):
        p = f"layers.{i}"
        attn_names = [f"{p}.attn.w_q", f"{p}.attn.w_k", f"{p}.attn.w_v", f"{p}.attn.w_o"]
        for name, out_dim, in_dim in [
            (attn_names[0], d, d),
            (attn_names[1], d, d),
            (attn_names[2], d, d),
            (attn_names[3], d, d),
            (f"{p}.mlp.w_up", dm, d),
            (f"{p}.mlp.w_down", d, dm),
        ]:
            f = weight_flops(name, out_dim, in_dim)
            total += f
            if name in policy.fp_tensors:
                fp += f
        total += attn_mix
        # attention mixing counts toward the island only when the layer's
        # whole attention block is floating point (e.g. the all-fp policy)
        if all(n in policy.fp_tensors for n in attn_names):
            fp += attn_mix
    unembed = weight_flops("unembed", V, d)
    total += unembed
    if "unembed" in policy.fp_tensors:
        fp += unembed
    return fp / total
