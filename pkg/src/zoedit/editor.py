"""Forward-only locate-and-edit pipeline.

Stages, given a fact (subject, prompt, new target) and an edit layer:

1. key extraction — average the edit layer's post-GELU activation at the
   subject's final token across a set of random prefix contexts;
2. value optimization — treat the MLP block output at that site as a free
   vector v, and minimize  mean_j[ -log P(target | prefix_j + prompt)
   + kl_weight * KL(P(. | prefix_j + preservation) || base model) ]
   with centered-difference gradient estimates (forward passes only),
   cosine or static learning rate, periodic success checks for early
   stopping, and prefix caches reused across steps;
3. rank-one injection — closed-form update of the down-projection W so the
   optimized value is produced whenever the key reappears:
       W_hat = W + lambda_vec (C^-1 k)^T,
       lambda_vec = (v - W k) / ((C^-1 k)^T k),
   with C the key second-moment matrix estimated over a corpus.

Because the perturbation target is the override vector v at the final
subject token, and prefix tokens strictly precede it under causal masking,
cached prefix activations are mathematically exact at every step. The
staleness rule (rebuild when the loss stalls by < loss_delta over `window`
steps) is retained anyway and instrumented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import telemetry
from .errors import (
    DegenerateKeyError,
    DivergenceError,
    EditFailure,
    InputError,
    SingularCovarianceError,
)
from .model import (
    ModelBundle,
    PrefixCache,
    TapRequest,
    ValueOverride,
    build_prefix_cache,
    decode_matches,
    forward,
    kl_divergence,
    log_prob,
    replace_downproj,
)
from .zo import CosineLR, Schedule, StaticLR, sample_direction, zo_gradient

# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


def find_subspan(haystack: Sequence[int], needle: Sequence[int]) -> Optional[tuple]:
    """Last occurrence of `needle` in `haystack` as (start, end), or None."""
    n, m = len(haystack), len(needle)
    if m == 0 or m > n:
        return None
    for start in range(n - m, -1, -1):
        if tuple(haystack[start : start + m]) == tuple(needle):
            return (start, start + m)
    return None


@dataclass(frozen=True)
class EditRequest:
    """One fact to inject: subject tokens, the prompt that should produce the
    new target, and a preservation prompt whose next-token distribution the
    edit should not disturb."""

    subject: tuple
    fact_prompt: tuple
    target: tuple
    preservation_prompt: tuple
    edit_layer: int

    def __post_init__(self):
        object.__setattr__(self, "subject", tuple(int(t) for t in self.subject))
        object.__setattr__(self, "fact_prompt", tuple(int(t) for t in self.fact_prompt))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        object.__setattr__(
            self, "preservation_prompt", tuple(int(t) for t in self.preservation_prompt)
        )
        if len(self.target) == 0:
            raise InputError("target must be non-empty")
        if len(self.subject) == 0:
            raise InputError("subject must be non-empty")
        if find_subspan(self.fact_prompt, self.subject) is None:
            raise InputError("subject does not occur in fact_prompt")
        if self.edit_layer < 0:
            raise InputError("edit_layer must be >= 0")

    @property
    def subject_span(self) -> tuple:
        return find_subspan(self.fact_prompt, self.subject)

    def to_dict(self) -> dict:
        return {
            "subject": list(self.subject),
            "prompt": list(self.fact_prompt),
            "target": list(self.target),
            "preservation_prompt": list(self.preservation_prompt),
            "layer": self.edit_layer,
        }


@dataclass(frozen=True)
class PrefixSet:
    prefixes: tuple  # tuple of token tuples; may include the empty prefix
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "prefixes", tuple(tuple(int(t) for t in p) for p in self.prefixes)
        )
        if len(self.prefixes) < 1:
            raise InputError("need at least one prefix")

    @property
    def count(self) -> int:
        return len(self.prefixes)


@dataclass
class KeyVector:
    k_star: np.ndarray  # (d_mlp,)
    layer: int
    samples_used: int


@dataclass
class ValueState:
    v: np.ndarray  # (d_model,)
    step: int
    loss_trace: list  # [(step, nll_term, kl_term), ...] strictly increasing in step
    stop_reason: str  # success | max_steps | plateau
    n_checks: int = 0
    n_cache_rebuilds: int = 0
    confidence: float = 0.0


@dataclass(frozen=True)
class ZOConfig:
    """All knobs of the zeroth-order value optimizer."""

    mu: float = 1e-3
    mu_relative: bool = True  # scale mu by ||v_init|| once per edit
    n_directions: int = 5
    lr_schedule: Schedule = CosineLR(lr_max=0.5, lr_min=0.02)
    max_steps: int = 150
    check_period: int = 20
    success_threshold: float = 0.5
    kl_weight: float = 1.0
    cache_loss_delta: float = 0.001  # rebuild cache when loss stalls by less...
    cache_window: int = 3  # ...than this over so many steps
    use_early_stop: bool = True
    use_prefix_cache: bool = True
    plateau_window: int = 0  # 0 disables the plateau stop
    plateau_delta: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.mu > 0):
            raise InputError("mu must be positive")
        if self.n_directions < 1:
            raise InputError("n_directions must be >= 1")
        if not (0.0 < self.success_threshold < 1.0):
            raise InputError("success_threshold must be in (0, 1)")
        if self.check_period < 1:
            raise InputError("check_period must be >= 1")
        if self.kl_weight < 0:
            raise InputError("kl_weight must be >= 0")


@dataclass
class CovarianceEstimate:
    """Second-moment matrix of keys, C = mean(k k^T), plus a ridge for
    inversion. C + ridge*I is symmetric positive definite."""

    C: np.ndarray  # (d_mlp, d_mlp)
    sample_count: int
    ridge_lambda: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        a = self.C + self.ridge_lambda * np.eye(self.C.shape[0])
        return np.linalg.solve(a, rhs)


@dataclass
class RankOneResult:
    lambda_vec: np.ndarray  # (d_model,)
    w_hat: np.ndarray  # (d_model, d_mlp)
    residual_norm: float  # ||W_hat k - v||


@dataclass
class EditReport:
    """Everything an edit run produced besides the weights."""

    stop_reason: str
    steps_used: int
    success: bool
    confidence: float
    loss_trace: list
    forward_calls: int
    backward_calls: int
    matmul_flops: int
    n_checks: int
    n_cache_rebuilds: int
    n_prefixes: int
    wall_time_s: float = 0.0
    peak_memory_bytes: Optional[int] = None
    error: Optional[str] = None

    def to_dict(self, include_volatile: bool = True) -> dict:
        d = {
            "stop_reason": self.stop_reason,
            "steps_used": self.steps_used,
            "success": self.success,
            "confidence": self.confidence,
            "loss_trace": [[s, nll, kl] for (s, nll, kl) in self.loss_trace],
            "forward_calls": self.forward_calls,
            "backward_calls": self.backward_calls,
            "matmul_flops": self.matmul_flops,
            "n_checks": self.n_checks,
            "n_cache_rebuilds": self.n_cache_rebuilds,
            "n_prefixes": self.n_prefixes,
            "error": self.error,
        }
        if include_volatile:
            d["wall_time_s"] = self.wall_time_s
            d["peak_memory_bytes"] = self.peak_memory_bytes
        return d


# ---------------------------------------------------------------------------
# prefix sampling and key extraction
# ---------------------------------------------------------------------------


def sample_prefixes(
    count: int,
    length_range: tuple,
    rng_seed: int,
    corpus: Optional[Sequence[Sequence[int]]] = None,
    vocab_size: Optional[int] = None,
    include_empty: bool = False,
) -> PrefixSet:
    """Deterministically sample prefix token sequences.

    Corpus mode draws sentences with replacement (truncated to the range
    maximum); otherwise tokens are uniform over [0, vocab_size) with lengths
    uniform in length_range. With include_empty the first prefix is the
    empty sequence, so the bare prompt participates in key averaging.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    lo, hi = length_range
    if lo < 0 or hi < lo:
        raise InputError(f"bad length_range {length_range}")
    rng = np.random.default_rng(rng_seed)
    prefixes = []
    if include_empty:
        prefixes.append(())
    n_sampled = count - len(prefixes)
    if corpus is not None:
        if len(corpus) == 0:
            raise InputError("corpus mode selected but corpus is empty")
        for _ in range(n_sampled):
            sent = corpus[int(rng.integers(len(corpus)))]
            prefixes.append(tuple(sent[:hi]))
    else:
        if vocab_size is None:
            raise InputError("vocab_size required when no corpus is given")
        for _ in range(n_sampled):
            length = int(rng.integers(lo, hi + 1))
            prefixes.append(tuple(int(t) for t in rng.integers(0, vocab_size, size=length)))
    return PrefixSet(prefixes=tuple(prefixes), rng_seed=rng_seed)


def compute_key(model: ModelBundle, request: EditRequest, prefixes: PrefixSet) -> KeyVector:
    """Average the post-activation key at the subject's final token over all
    prefix contexts. The subject is read within its prompt context, which
    reduces to prefix+subject for subject-initial prompts."""
    span = request.subject_span
    context = request.fact_prompt[: span[1]]  # tokens up to and including the subject
    acc = None
    for pref in prefixes.prefixes:
        tokens = pref + context
        tap = TapRequest(layer=request.edit_layer, site="mlp_post_activation",
                         position=len(tokens) - 1)
        res = forward(model, tokens, taps=[tap])
        vec = res.taps[tap]
        acc = vec if acc is None else acc + vec
    k_star = acc / prefixes.count
    return KeyVector(k_star=k_star, layer=request.edit_layer, samples_used=prefixes.count)


# ---------------------------------------------------------------------------
# edit loss
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    total: float
    nll: float
    kl: float


class EditLossEvaluator:
    """Callable v -> loss with per-part bookkeeping and cache reuse.

    The KL reference logits (base model, no override) are computed once per
    evaluator: the unmodified model never changes during value optimization.
    """

    def __init__(
        self,
        model: ModelBundle,
        request: EditRequest,
        prefixes: PrefixSet,
        kl_weight: float,
        use_cache: bool = True,
    ):
        self.model = model
        self.request = request
        self.prefixes = prefixes
        self.kl_weight = kl_weight
        self.use_cache = use_cache
        self.last_parts: Optional[LossParts] = None
        self.probe_log: list = []  # LossParts of every evaluation since last reset

        span = request.subject_span
        self._fact_tokens = []
        self._fact_override_pos = []
        self._fact_score_base = []
        pres_span = find_subspan(request.preservation_prompt, request.subject)
        self._pres_tokens = []
        self._pres_override_pos = []  # None when the subject is absent from p'
        for pref in prefixes.prefixes:
            seq = pref + request.fact_prompt + request.target
            self._fact_tokens.append(np.asarray(seq, dtype=np.int64))
            self._fact_override_pos.append(len(pref) + span[1] - 1)
            self._fact_score_base.append(len(pref) + len(request.fact_prompt) - 1)
            if kl_weight > 0:
                pseq = pref + request.preservation_prompt
                self._pres_tokens.append(np.asarray(pseq, dtype=np.int64))
                self._pres_override_pos.append(
                    len(pref) + pres_span[1] - 1 if pres_span else None
                )

        self._caches: list = [None] * prefixes.count
        self._caches_built = False
        self._ref_logits: Optional[list] = None
        self.n_cache_rebuilds = 0

    # -- cache management ---------------------------------------------------

    def build_caches(self) -> None:
        if not self.use_cache or self._caches_built:
            return
        for j, pref in enumerate(self.prefixes.prefixes):
            if len(pref) > 0:
                self._caches[j] = build_prefix_cache(self.model, pref)
        self._caches_built = True

    def rebuild_caches(self, step: int) -> None:
        if not self.use_cache:
            return
        for j, pref in enumerate(self.prefixes.prefixes):
            if len(pref) > 0:
                cache = build_prefix_cache(self.model, pref)
                cache.build_step = step
                self._caches[j] = cache
        self.n_cache_rebuilds += 1

    def _ensure_refs(self) -> None:
        if self.kl_weight <= 0 or self._ref_logits is not None:
            return
        refs = []
        for j, ptoks in enumerate(self._pres_tokens):
            res = forward(self.model, ptoks, cache=self._caches[j])
            refs.append(res.logits[-1].copy())
        self._ref_logits = refs

    # -- evaluation ----------------------------------------------------------

    def __call__(self, v: np.ndarray) -> float:
        self.build_caches()
        self._ensure_refs()
        n = self.prefixes.count
        nll = 0.0
        kl = 0.0
        for j in range(n):
            ovr = ValueOverride(
                layer=self.request.edit_layer,
                position=self._fact_override_pos[j],
                vector=v,
            )
            res = forward(self.model, self._fact_tokens[j], override=ovr, cache=self._caches[j])
            base = self._fact_score_base[j]
            for i, tok in enumerate(self.request.target):
                nll -= log_prob(res.logits_at(base + i), tok)
            if self.kl_weight > 0:
                pos = self._pres_override_pos[j]
                povr = (
                    ValueOverride(layer=self.request.edit_layer, position=pos, vector=v)
                    if pos is not None
                    else None
                )
                pres = forward(
                    self.model, self._pres_tokens[j], override=povr, cache=self._caches[j]
                )
                kl += kl_divergence(pres.logits[-1], self._ref_logits[j])
        nll /= n
        kl /= n
        parts = LossParts(total=nll + self.kl_weight * kl, nll=nll, kl=kl)
        self.last_parts = parts
        self.probe_log.append(parts)
        return parts.total


def edit_loss(
    model: ModelBundle,
    v: np.ndarray,
    request: EditRequest,
    prefixes: PrefixSet,
    kl_weight: float = 1.0,
) -> tuple:
    """One-shot edit loss at v. Returns (total, nll_term, kl_term)."""
    ev = EditLossEvaluator(model, request, prefixes, kl_weight, use_cache=False)
    total = ev(np.asarray(v, dtype=np.float64))
    return total, ev.last_parts.nll, ev.last_parts.kl


# ---------------------------------------------------------------------------
# success check
# ---------------------------------------------------------------------------


def success_check(
    model: ModelBundle,
    v: np.ndarray,
    request: EditRequest,
    threshold: float = 0.5,
) -> tuple:
    """Does the bare fact prompt greedily decode to the target under the
    override? Success needs every target token to be the argmax AND joint
    target probability >= threshold. One forward pass."""
    span = request.subject_span
    ovr = ValueOverride(
        layer=request.edit_layer, position=span[1] - 1, vector=np.asarray(v, dtype=np.float64)
    )
    ok, joint_lp = decode_matches(model, request.fact_prompt, request.target, override=ovr)
    confidence = math.exp(joint_lp)
    return (ok and confidence >= threshold), confidence


# ---------------------------------------------------------------------------
# value optimization
# ---------------------------------------------------------------------------


def optimize_value(
    model: ModelBundle,
    request: EditRequest,
    prefixes: PrefixSet,
    config: ZOConfig,
    key: Optional[KeyVector] = None,
) -> ValueState:
    """Iterate zeroth-order updates on the override vector v.

    v starts at the model's own value for the key (W_down @ k*, i.e. the
    prefix-averaged MLP output at the edit site), so the initial KL drift is
    zero. Every check_period steps the target is greedily re-decoded and
    optimization stops on success. Raises DivergenceError when the loss
    exceeds 10x its initial value for 10 consecutive steps.
    """
    if not (0 <= request.edit_layer < model.config.n_layers):
        raise InputError(f"edit_layer {request.edit_layer} out of range")
    if model.quant is not None:
        scale_fp = model.quant.spec.fingerprint()

    if key is None:
        key = compute_key(model, request, prefixes)
    w_down = model.w64(f"layers.{request.edit_layer}.mlp.w_down")
    v = w_down @ key.k_star
    mu = config.mu * float(np.linalg.norm(v)) if config.mu_relative else config.mu

    evaluator = EditLossEvaluator(
        model, request, prefixes, config.kl_weight, use_cache=config.use_prefix_cache
    )
    evaluator.build_caches()

    trace = []
    totals = []
    stop_reason = "max_steps"
    confidence = 0.0
    n_checks = 0
    steps_done = 0
    diverged_streak = 0
    staleness_anchor = 0  # step index after which the staleness window restarts

    for step in range(1, config.max_steps + 1):
        lr = config.lr_schedule.at(step, config.max_steps)
        evaluator.probe_log.clear()
        grad = zo_gradient(
            evaluator, v, mu, config.n_directions, rng_seed=_step_seed(config.rng_seed, step)
        )
        v = v - lr * grad
        steps_done = step

        # probe-averaged loss parts: L(v) to O(mu^2), with no extra forwards
        nll = float(np.mean([p.nll for p in evaluator.probe_log]))
        kl = float(np.mean([p.kl for p in evaluator.probe_log]))
        total = nll + config.kl_weight * kl
        trace.append((step, nll, kl))
        totals.append(total)

        if totals[0] > 0 and total > 10.0 * totals[0]:
            diverged_streak += 1
            if diverged_streak >= 10:
                raise DivergenceError(
                    f"loss {total:.4g} exceeded 10x initial {totals[0]:.4g} "
                    f"for 10 consecutive steps",
                    trace=trace,
                )
        else:
            diverged_streak = 0

        # staleness rule: rebuild the prefix cache when the loss has not
        # dropped by cache_loss_delta over the last cache_window steps
        if (
            config.use_prefix_cache
            and step > config.cache_window
            and step - staleness_anchor >= config.cache_window
        ):
            then = totals[step - config.cache_window - 1]
            if (then - total) < config.cache_loss_delta:
                evaluator.rebuild_caches(step)
                staleness_anchor = step

        if config.use_early_stop and step % config.check_period == 0:
            n_checks += 1
            ok, confidence = success_check(model, v, request, config.success_threshold)
            if ok:
                stop_reason = "success"
                break

        if (
            config.plateau_window > 0
            and len(totals) >= config.plateau_window
            and max(totals[-config.plateau_window :]) - min(totals[-config.plateau_window :])
            < config.plateau_delta
        ):
            stop_reason = "plateau"
            break

    if model.quant is not None and model.quant.spec.fingerprint() != scale_fp:
        raise RuntimeError("quantization scales changed during an edit run")

    return ValueState(
        v=v,
        step=steps_done,
        loss_trace=trace,
        stop_reason=stop_reason,
        n_checks=n_checks,
        n_cache_rebuilds=evaluator.n_cache_rebuilds,
        confidence=confidence,
    )


def _step_seed(seed: int, step: int) -> int:
    # distinct, deterministic direction stream per optimization step
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def predict_forward_calls(
    *,
    steps: int,
    n_directions: int,
    n_prefixes: int,
    n_nonempty_prefixes: int,
    use_kl: bool,
    use_cache: bool,
    n_checks: int,
    n_cache_rebuilds: int,
    include_key: bool = True,
) -> int:
    """Exact number of model forwards an optimize_value/edit run performs.

    Per step: 2N probe evaluations, each touching every prefix once for the
    fact prompt and once more for the preservation prompt when KL is on.
    One-off costs: key extraction, cache builds (non-empty prefixes only),
    KL reference logits, and one forward per periodic success check.
    """
    per_eval = n_prefixes * (2 if use_kl else 1)
    calls = steps * 2 * n_directions * per_eval
    calls += n_checks
    if steps > 0:
        if use_cache:
            calls += n_nonempty_prefixes  # initial builds
            calls += n_cache_rebuilds * n_nonempty_prefixes
        if use_kl:
            calls += n_prefixes  # reference logits, computed once
    if include_key:
        calls += n_prefixes
    return calls


# ---------------------------------------------------------------------------
# covariance and the rank-one update
# ---------------------------------------------------------------------------


def covariance_from_keys(keys: np.ndarray) -> np.ndarray:
    """C = (1/n) sum_i k_i k_i^T for rows k_i."""
    keys = np.asarray(keys, dtype=np.float64)
    return keys.T @ keys / keys.shape[0]


def estimate_covariance(
    model: ModelBundle,
    layer: int,
    corpus: Sequence[Sequence[int]],
    ridge_lambda: Optional[float] = None,
) -> CovarianceEstimate:
    """Second moment of post-activation keys over every token position of
    `corpus`. ridge_lambda=None picks 1e-4 * trace(C)/d_mlp; passing 0
    requires at least d_mlp samples (else the matrix is singular)."""
    if len(corpus) == 0:
        raise InputError("covariance corpus is empty")
    d_mlp = model.config.d_mlp
    acc = np.zeros((d_mlp, d_mlp))
    n = 0
    for seq in corpus:
        tap = TapRequest(layer=layer, site="mlp_post_activation", position="all")
        res = forward(model, seq, taps=[tap])
        keys = res.taps[tap]
        acc += keys.T @ keys
        n += keys.shape[0]
    C = acc / n
    if ridge_lambda is None:
        ridge_lambda = 1e-4 * float(np.trace(C)) / d_mlp
    if ridge_lambda == 0 and n < d_mlp:
        raise SingularCovarianceError(
            f"{n} key samples < d_mlp={d_mlp} and no ridge requested"
        )
    return CovarianceEstimate(C=C, sample_count=n, ridge_lambda=float(ridge_lambda))


def rank_one_update(
    W: np.ndarray,
    k_star: np.ndarray,
    v_star: np.ndarray,
    cov: CovarianceEstimate,
) -> RankOneResult:
    """Closed-form injection of (k_star -> v_star) into W.

    W_hat k_star = v_star holds as an algebraic identity; the update is the
    outer product lambda_vec (C^-1 k_star)^T, rank one by construction, and
    the covariance steers it away from frequently used key directions.
    """
    W = np.asarray(W, dtype=np.float64)
    k_star = np.asarray(k_star, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    cinv_k = cov.solve(k_star)
    denom = float(cinv_k @ k_star)
    k_sq = float(k_star @ k_star)
    if abs(denom) < 1e-12 * k_sq or k_sq == 0.0:
        raise DegenerateKeyError(
            f"(C^-1 k)^T k = {denom:.3e} is degenerate relative to ||k||^2 = {k_sq:.3e}"
        )
    lambda_vec = (v_star - W @ k_star) / denom
    w_hat = W + np.outer(lambda_vec, cinv_k)
    residual = float(np.linalg.norm(w_hat @ k_star - v_star))
    return RankOneResult(lambda_vec=lambda_vec, w_hat=w_hat, residual_norm=residual)


# ---------------------------------------------------------------------------
# end-to-end edit
# ---------------------------------------------------------------------------


def edit(
    model: ModelBundle,
    request: EditRequest,
    config: ZOConfig,
    cov: CovarianceEstimate,
    prefixes: Optional[PrefixSet] = None,
    prefix_corpus: Optional[Sequence[Sequence[int]]] = None,
    n_prefixes: int = 4,
    track_memory: bool = False,
) -> tuple:
    """Run the full pipeline; returns (edited ModelBundle, EditReport).

    The returned bundle shares every tensor with the input except the edit
    layer's down-projection. Guaranteed forward-only: the reverse-mode
    counter is asserted unchanged. On stage failure an EditFailure is
    raised carrying the partial report.
    """
    if prefixes is None:
        prefixes = sample_prefixes(
            n_prefixes,
            (2, 8),
            rng_seed=config.rng_seed,
            corpus=prefix_corpus,
            vocab_size=model.config.vocab_size,
            include_empty=True,
        )

    mem = telemetry.MemoryTracker() if track_memory else None
    timer = telemetry.Timer()
    delta = telemetry.CounterDelta()
    state = None
    try:
        with timer, delta:
            if mem is not None:
                mem.__enter__()
            try:
                key = compute_key(model, request, prefixes)
                state = optimize_value(model, request, prefixes, config, key=key)
                if state.step == 0:
                    edited = model  # zero budget: nothing optimized, nothing installed
                else:
                    w_name = f"layers.{request.edit_layer}.mlp.w_down"
                    result = rank_one_update(model.w64(w_name), key.k_star, state.v, cov)
                    edited = replace_downproj(model, request.edit_layer, result.w_hat)
            finally:
                if mem is not None:
                    mem.__exit__(None, None, None)
    except Exception as e:
        report = _build_report(
            state, prefixes, delta, timer, mem, error=f"{type(e).__name__}: {e}"
        )
        raise EditFailure(str(e), report=report) from e

    if delta.backward_calls != 0:
        raise RuntimeError(
            f"editing performed {delta.backward_calls} reverse-mode passes; "
            "the editing path must be forward-only"
        )
    report = _build_report(state, prefixes, delta, timer, mem)
    return edited, report


def _build_report(state, prefixes, delta, timer, mem, error=None) -> EditReport:
    return EditReport(
        stop_reason=state.stop_reason if state else "error",
        steps_used=state.step if state else 0,
        success=(state.stop_reason == "success") if state else False,
        confidence=state.confidence if state else 0.0,
        loss_trace=state.loss_trace if state else [],
        forward_calls=delta.forward_calls,
        backward_calls=delta.backward_calls,
        matmul_flops=delta.matmul_flops,
        n_checks=state.n_checks if state else 0,
        n_cache_rebuilds=state.n_cache_rebuilds if state else 0,
        n_prefixes=prefixes.count,
        wall_time_s=getattr(timer, "elapsed_s", 0.0),
        peak_memory_bytes=getattr(mem, "peak_bytes", None) if mem else None,
        error=error,
    )
