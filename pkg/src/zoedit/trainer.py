"""Reference trainer for bootstrap models.

A hand-written forward + reverse-mode pass over the exact architecture the
inference engine runs (see model.py), with Adam. This is the only code in
the package that computes gradients by backpropagation; it exists so the
toy model demonstrably knows its facts before they are edited, and as the
memory-accounting baseline. The editing path never calls into it — the
global backward counter is asserted unchanged across every edit.

The tape (activations retained for the backward pass) is measured in bytes
after each forward; that number is what the activation-share report in
`cmd_memstat` uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from . import telemetry
from .bootstrap import Tokenizer, token_stream
from .errors import InputError, TrainingFailure
from .model import ModelBundle, ModelConfig, decode_matches, init_weights

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _layer_norm_fwd(x, w, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * istd
    return xhat * w + b, xhat, istd


def _layer_norm_bwd(dy, xhat, istd, w):
    dxhat = dy * w
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * istd
    dw = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dw, db


class ToyTrainer:
    """Adam trainer over a concatenated token stream (GPT-style windows)."""

    def __init__(
        self,
        config: ModelConfig,
        stream: np.ndarray,
        batch_size: int = 12,
        block_size: int = 32,
        lr: float = 1e-3,
        seed: int = 0,
        dtype=np.float32,
    ):
        if block_size + 1 > len(stream):
            raise InputError("token stream shorter than one training window")
        if block_size > config.max_seq_len:
            raise InputError("block_size exceeds max_seq_len")
        self.config = config
        self.stream = np.asarray(stream, dtype=np.int64)
        self.batch_size = batch_size
        self.block_size = block_size
        self.lr = lr
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        self.weights = {
            k: v.astype(dtype) for k, v in init_weights(config, seed=seed).items()
        }
        self._adam_m = {k: np.zeros_like(v) for k, v in self.weights.items()}
        self._adam_v = {k: np.zeros_like(v) for k, v in self.weights.items()}
        self._adam_t = 0
        self.last_tape_bytes = 0

    # -- forward + tape -------------------------------------------------------

    def _forward(self, tokens: np.ndarray):
        cfg = self.config
        W = self.weights
        B, T = tokens.shape
        H, hd = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)
        mask = np.arange(T)[None, :] > np.arange(T)[:, None]

        tape = {"tokens": tokens, "layers": []}
        x = W["tok_emb"][tokens] + W["pos_emb"][:T]
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            t = {"x_in": x}
            h1, t["xhat1"], t["istd1"] = _layer_norm_fwd(
                x, W[f"{p}.ln1.weight"], W[f"{p}.ln1.bias"], cfg.norm_epsilon
            )
            t["h1"] = h1
            q = h1 @ W[f"{p}.attn.w_q"].T
            k = h1 @ W[f"{p}.attn.w_k"].T
            v = h1 @ W[f"{p}.attn.w_v"].T
            qh = q.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            kh = k.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            vh = v.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            scores = qh @ kh.transpose(0, 1, 3, 2) * scale
            scores = np.where(mask, -np.inf, scores)
            smax = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - smax)
            probs = e / e.sum(axis=-1, keepdims=True)
            ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            attn = ctx @ W[f"{p}.attn.w_o"].T
            t.update(qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx)
            x = x + attn
            t["x_mid"] = x
            h2, t["xhat2"], t["istd2"] = _layer_norm_fwd(
                x, W[f"{p}.ln2.weight"], W[f"{p}.ln2.bias"], cfg.norm_epsilon
            )
            t["h2"] = h2
            pre = h2 @ W[f"{p}.mlp.w_up"].T
            kact = _gelu(pre)
            t["pre"] = pre
            t["kact"] = kact
            x = x + kact @ W[f"{p}.mlp.w_down"].T
            tape["layers"].append(t)

        hf, tape["xhat_f"], tape["istd_f"] = _layer_norm_fwd(
            x, W["ln_f.weight"], W["ln_f.bias"], cfg.norm_epsilon
        )
        tape["hf"] = hf
        logits = hf @ W["unembed"].T
        tape["logits"] = logits
        telemetry.COUNTERS.forward_calls += 1
        telemetry.add_matmul_flops(B * T, cfg.d_model, cfg.vocab_size)
        self.last_tape_bytes = _tape_bytes(tape)
        return logits, tape

    # -- backward --------------------------------------------------------------

    def _backward(self, tape, targets: np.ndarray):
        cfg = self.config
        W = self.weights
        B, T = targets.shape
        H, hd = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)
        grads = {}

        logits = tape["logits"].astype(np.float64)
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        probs_v = z / z.sum(axis=-1, keepdims=True)
        n = B * T
        loss = float(
            -np.log(probs_v.reshape(n, -1)[np.arange(n), targets.reshape(n)] + 1e-30).mean()
        )
        dlogits = probs_v
        dlogits.reshape(n, -1)[np.arange(n), targets.reshape(n)] -= 1.0
        dlogits = (dlogits / n).astype(self.dtype)

        hf = tape["hf"]
        grads["unembed"] = dlogits.reshape(n, -1).T @ hf.reshape(n, -1)
        dhf = dlogits @ W["unembed"]
        dx, grads["ln_f.weight"], grads["ln_f.bias"] = _layer_norm_bwd(
            dhf, tape["xhat_f"], tape["istd_f"], W["ln_f.weight"]
        )

        for i in reversed(range(cfg.n_layers)):
            p = f"layers.{i}"
            t = tape["layers"][i]

            dmlp = dx  # gradient of the MLP block output (residual branch)
            dkact = dmlp @ W[f"{p}.mlp.w_down"]
            grads[f"{p}.mlp.w_down"] = dmlp.reshape(-1, cfg.d_model).T @ t["kact"].reshape(
                -1, cfg.d_mlp
            )
            dpre = dkact * _gelu_grad(t["pre"])
            dh2 = dpre @ W[f"{p}.mlp.w_up"]
            grads[f"{p}.mlp.w_up"] = dpre.reshape(-1, cfg.d_mlp).T @ t["h2"].reshape(
                -1, cfg.d_model
            )
            dx_mid, grads[f"{p}.ln2.weight"], grads[f"{p}.ln2.bias"] = _layer_norm_bwd(
                dh2, t["xhat2"], t["istd2"], W[f"{p}.ln2.weight"]
            )
            dx = dx + dx_mid

            dattn = dx
            dctx = dattn @ W[f"{p}.attn.w_o"]
            grads[f"{p}.attn.w_o"] = dattn.reshape(-1, cfg.d_model).T @ t["ctx"].reshape(
                -1, cfg.d_model
            )
            dctx_h = dctx.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            dprobs = dctx_h @ t["vh"].transpose(0, 1, 3, 2)
            dvh = t["probs"].transpose(0, 1, 3, 2) @ dctx_h
            dscores = t["probs"] * (dprobs - (dprobs * t["probs"]).sum(axis=-1, keepdims=True))
            dqh = dscores @ t["kh"] * scale
            dkh = dscores.transpose(0, 1, 3, 2) @ t["qh"] * scale
            dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            h1f = t["h1"].reshape(-1, cfg.d_model)
            grads[f"{p}.attn.w_q"] = dq.reshape(-1, cfg.d_model).T @ h1f
            grads[f"{p}.attn.w_k"] = dk.reshape(-1, cfg.d_model).T @ h1f
            grads[f"{p}.attn.w_v"] = dv.reshape(-1, cfg.d_model).T @ h1f
            dh1 = dq @ W[f"{p}.attn.w_q"] + dk @ W[f"{p}.attn.w_k"] + dv @ W[f"{p}.attn.w_v"]
            dx_in, grads[f"{p}.ln1.weight"], grads[f"{p}.ln1.bias"] = _layer_norm_bwd(
                dh1, t["xhat1"], t["istd1"], W[f"{p}.ln1.weight"]
            )
            dx = dx + dx_in

        tokens = tape["tokens"]
        grads["tok_emb"] = np.zeros_like(W["tok_emb"])
        np.add.at(grads["tok_emb"], tokens, dx)
        grads["pos_emb"] = np.zeros_like(W["pos_emb"])
        grads["pos_emb"][:T] = dx.sum(axis=0)

        telemetry.COUNTERS.backward_calls += 1
        return loss, grads

    # -- optimization -----------------------------------------------------------

    def _adam(self, grads, beta1=0.9, beta2=0.999, eps=1e-8):
        self._adam_t += 1
        b1t = 1.0 - beta1 ** self._adam_t
        b2t = 1.0 - beta2 ** self._adam_t
        for k, g in grads.items():
            m = self._adam_m[k]
            v = self._adam_v[k]
            m += (1.0 - beta1) * (g - m)
            v += (1.0 - beta2) * (g * g - v)
            self.weights[k] -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + eps)).astype(self.dtype)

    def sample_batch(self):
        hi = len(self.stream) - self.block_size - 1
        starts = self.rng.integers(0, hi, size=self.batch_size)
        tokens = np.stack([self.stream[s : s + self.block_size] for s in starts])
        targets = np.stack([self.stream[s + 1 : s + self.block_size + 1] for s in starts])
        return tokens, targets

    def step(self) -> float:
        """One forward + backward + Adam update; returns the batch loss."""
        tokens, targets = self.sample_batch()
        _, tape = self._forward(tokens)
        loss, grads = self._backward(tape, targets)
        self._adam(grads)
        return loss

    def forward_only(self, tokens: np.ndarray) -> np.ndarray:
        logits, _ = self._forward(np.atleast_2d(np.asarray(tokens, dtype=np.int64)))
        return logits

    def bundle(self) -> ModelBundle:
        """Snapshot the current weights as an immutable engine bundle."""
        return ModelBundle(
            self.config, {k: v.astype(np.float32).copy() for k, v in self.weights.items()}
        )


def _tape_bytes(tape) -> int:
    total = 0
    for t in tape["layers"]:
        total += sum(a.nbytes for a in t.values())
    for k in ("xhat_f", "istd_f", "hf", "logits"):
        total += tape[k].nbytes
    return total


@dataclass
class TrainReport:
    steps_run: int
    loss_first: float
    loss_last: float
    losses: list
    recall_history: list = field(default_factory=list)
    final_recall: Optional[float] = None
    tape_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "steps_run": self.steps_run,
            "loss_first": self.loss_first,
            "loss_last": self.loss_last,
            "losses": self.losses,
            "recall_history": self.recall_history,
            "final_recall": self.final_recall,
            "tape_bytes": self.tape_bytes,
        }


def fact_recall(bundle: ModelBundle, facts, tokenizer: Tokenizer) -> float:
    """Fraction of facts whose canonical prompt greedily decodes to the
    true object (uses the inference engine, not the trainer)."""
    hits = 0
    for fact in facts:
        prompt = tokenizer.encode(fact.prompt(0))
        target = tokenizer.encode(fact.obj)
        ok, _ = decode_matches(bundle, prompt, target)
        hits += ok
    return hits / len(facts)


def train_toy(
    config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    steps: int,
    facts=None,
    tokenizer: Optional[Tokenizer] = None,
    batch_size: int = 12,
    block_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    eval_every: int = 200,
    stop_recall: Optional[float] = 1.0,
) -> tuple:
    """Train a toy model on the corpus until the step budget runs out or
    fact recall reaches stop_recall. Returns (ModelBundle, TrainReport).

    steps=0 returns the freshly initialized bundle unchanged. Raises
    TrainingFailure when the loss fails to decrease over the full budget.
    """
    stream = token_stream(corpus, eos_id=tokenizer.eos_id if tokenizer else 0)
    trainer = ToyTrainer(config, stream, batch_size=batch_size, block_size=block_size,
                         lr=lr, seed=seed)
    report = TrainReport(steps_run=0, loss_first=float("nan"), loss_last=float("nan"), losses=[])
    if steps == 0:
        return trainer.bundle(), report

    can_recall = facts is not None and tokenizer is not None
    losses = []
    for step in range(1, steps + 1):
        losses.append(trainer.step())
        report.steps_run = step
        if step % 25 == 0 or step == 1:
            report.losses.append((step, losses[-1]))
        if can_recall and (step % eval_every == 0 or step == steps):
            recall = fact_recall(trainer.bundle(), facts, tokenizer)
            report.recall_history.append((step, recall))
            report.final_recall = recall
            if stop_recall is not None and recall >= stop_recall:
                break

    head = float(np.mean(losses[: min(20, len(losses))]))
    tail = float(np.mean(losses[-min(20, len(losses)) :]))
    report.loss_first = head
    report.loss_last = tail
    report.tape_bytes = trainer.last_tape_bytes
    bundle = trainer.bundle()
    if can_recall and report.final_recall is None:
        report.final_recall = fact_recall(bundle, facts, tokenizer)
    if tail >= head:
        raise TrainingFailure(
            f"loss did not decrease over the budget ({head:.4f} -> {tail:.4f})",
            report=report,
        )
    return bundle, report
