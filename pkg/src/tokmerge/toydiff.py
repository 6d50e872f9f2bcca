"""Desk-scale conditional diffusion sampler wired to the token-merge engine.

A small attention denoiser (2 transformer blocks, seeded untrained weights)
runs a standard ancestral reverse loop with guidance.  At every self-attention
layer the scheduler picks a plan -- grid pruning in the early steps, the
configured strategy afterwards, driven by the guidance map cached from the
previous step -- and the layer computes attention on the reduced token set.

The denoiser is untrained on purpose: fidelity is always measured as
deviation from the unmerged baseline under matched seeds, which is well
defined regardless of training, and an untrained net exercises every merge
mechanism.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np

from .core import (
    STRATEGY_GRID,
    STRATEGY_NONE,
    STRATEGY_POOL,
    STRATEGY_TOPK,
    ImportanceMap,
    MergeConfig,
    MergePlan,
    TokenMatrix,
    apply_merge,
    apply_prune,
    apply_unmerge,
    identity_plan,
)
from .importance import guidance_magnitude, resample_importance
from .rng import Rng
from .strategy import plan_importance_pool, plan_tome_grid, plan_topk_dst

logger = logging.getLogger(__name__)

# Stream ids reserved for noise draws; attention layers use 0..n_blocks-1.
INIT_NOISE_LAYER = 1 << 20
STEP_NOISE_LAYER = (1 << 20) + 1

MODE_MERGE = "merge"
MODE_PRUNE = "prune"


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variances: betas[t-1] is the variance added at step t."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, timesteps: int = 50, start: float = 1e-4, end: float = 2e-2):
        if timesteps < 2:
            raise ValueError("need at least 2 timesteps")
        return cls(np.linspace(start, end, timesteps))

    @property
    def T(self) -> int:
        return self.betas.size

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


@dataclass
class SamplerState:
    """Trajectory state: current latent, timestep, guidance setup, cached map."""

    x_t: TokenMatrix
    t: int
    w: float
    y: int | None
    prev_guidance: ImportanceMap | None = None


def forward_noise(
    x0: TokenMatrix, t: int, schedule: NoiseSchedule, rng: Rng
) -> TokenMatrix:
    """Noise a clean sample to timestep t in closed form.

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps with eps standard normal.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bars[t - 1]
    dtype = x0.data.dtype
    gen = rng.generator()
    if dtype == np.float32:
        eps = gen.standard_normal(x0.data.shape, dtype=np.float32)
    else:
        eps = gen.standard_normal(x0.data.shape)
    xt = x0.data * dtype.type(math.sqrt(ab)) + eps * dtype.type(math.sqrt(1.0 - ab))
    return TokenMatrix(xt, grid=x0.grid)


def combine_guidance(
    eps_cond: TokenMatrix, eps_uncond: TokenMatrix, w: float
) -> TokenMatrix:
    """Steer the noise prediction: eps_uncond + w * (eps_cond - eps_uncond).

    w = 0 and w = 1 short-circuit to the respective inputs so the endpoint
    identities hold bit-exactly.
    """
    if eps_cond.data.shape != eps_uncond.data.shape:
        raise ValueError(
            f"shape mismatch: {eps_cond.data.shape} vs {eps_uncond.data.shape}"
        )
    if w == 0.0:
        return eps_uncond
    if w == 1.0:
        return eps_cond
    dtype = eps_uncond.data.dtype
    guided = eps_uncond.data + dtype.type(w) * (eps_cond.data - eps_uncond.data)
    return TokenMatrix(guided, grid=eps_uncond.grid)


class ScheduledPlan(NamedTuple):
    plan: MergePlan
    mode: str
    grid_fallback: bool = False
    importance: ImportanceMap | None = None


def scheduled_plan(
    state: SamplerState,
    step_index: int,
    layer_tokens: TokenMatrix,
    config: MergeConfig,
    rng: Rng,
) -> ScheduledPlan:
    """Pick the plan and reduction mode for one layer at one sampling step.

    Early steps (``step_index < prune_steps``) prune with grid selection;
    later steps merge with the configured strategy.  Importance-driven
    strategies fall back to grid selection -- with a logged diagnostic, never
    an exception -- when no previous-step guidance map is available yet.
    """
    if config.strategy == STRATEGY_NONE:
        return ScheduledPlan(identity_plan(layer_tokens.n_tokens), MODE_MERGE)
    if step_index < config.prune_steps:
        return ScheduledPlan(plan_tome_grid(layer_tokens, config, rng), MODE_PRUNE)
    if config.strategy == STRATEGY_GRID:
        return ScheduledPlan(plan_tome_grid(layer_tokens, config, rng), MODE_MERGE)

    imp = state.prev_guidance
    if imp is not None and layer_tokens.grid is not None and state.x_t.grid is not None:
        try:
            imp = resample_importance(imp, state.x_t.grid, layer_tokens.grid)
        except ValueError as exc:
            logger.warning("cannot adapt guidance map to layer grid: %s", exc)
            imp = None
    elif imp is not None and len(imp) != layer_tokens.n_tokens:
        imp = None
    if imp is None:
        logger.debug(
            "no usable guidance at step %d (t=%d); using grid selection",
            step_index,
            state.t,
        )
        return ScheduledPlan(
            plan_tome_grid(layer_tokens, config, rng), MODE_MERGE, grid_fallback=True
        )
    if config.strategy == STRATEGY_POOL:
        plan = plan_importance_pool(layer_tokens, imp, config, rng)
    else:
        assert config.strategy == STRATEGY_TOPK
        plan = plan_topk_dst(layer_tokens, imp, config)
    return ScheduledPlan(plan, MODE_MERGE, importance=imp)


@dataclass(frozen=True)
class LayerEvent:
    """What one attention layer saw and decided during a forward pass."""

    step_index: int
    timestep: int
    layer: int
    pass_id: str  # "cond" | "uncond"
    tokens: TokenMatrix
    importance: ImportanceMap | None
    plan: MergePlan
    mode: str
    grid_fallback: bool


@dataclass
class MergeRuntime:
    """Everything the denoiser needs to run its layers through the engine."""

    config: MergeConfig
    rng: Rng
    state: SamplerState
    step_index: int
    hook: Callable[[LayerEvent], None] | None = None
    pass_id: str = "cond"


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + x.dtype.type(1e-5)) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    return x.dtype.type(0.5) * x * (1.0 + np.tanh(c * (x + x.dtype.type(0.044715) * x**3)))


def attention(
    h: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
) -> np.ndarray:
    """Single-head scaled dot-product self-attention over token rows."""
    q = h @ wq
    k = h @ wk
    v = h @ wv
    s = (q @ k.T) * h.dtype.type(1.0 / math.sqrt(h.shape[1]))
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return (s @ v) @ wo


@dataclass
class _Block:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


class ToyDenoiser:
    """A 2-block attention noise predictor with seeded, untrained weights.

    Forward passes are deterministic given (weights, inputs), the output
    token shape equals the input shape, and the final class-table row serves
    as the unconditional embedding.
    """

    def __init__(
        self,
        n_channels: int,
        n_classes: int = 8,
        n_blocks: int = 2,
        hidden_mult: int = 4,
        seed: int = 0,
    ):
        if n_channels < 4 or n_channels % 2:
            raise ValueError("n_channels must be even and >= 4")
        if n_classes < 1 or n_blocks < 1:
            raise ValueError("need n_classes >= 1 and n_blocks >= 1")
        self.n_channels = n_channels
        self.n_classes = n_classes
        self.n_hidden = hidden_mult * n_channels
        gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed & ((1 << 64) - 1)))
        )

        def w(*shape):
            return (gen.standard_normal(shape, dtype=np.float32) * np.float32(0.02))

        c, hid = n_channels, self.n_hidden
        self.class_table = w(n_classes + 1, c)
        self.w_time = w(c, c)
        self.b_time = np.zeros(c, dtype=np.float32)
        self.blocks = [
            _Block(
                ln1_g=np.ones(c, dtype=np.float32),
                ln1_b=np.zeros(c, dtype=np.float32),
                wq=w(c, c),
                wk=w(c, c),
                wv=w(c, c),
                wo=w(c, c),
                ln2_g=np.ones(c, dtype=np.float32),
                ln2_b=np.zeros(c, dtype=np.float32),
                w1=w(c, hid),
                b1=np.zeros(hid, dtype=np.float32),
                w2=w(hid, c),
                b2=np.zeros(c, dtype=np.float32),
            )
            for _ in range(n_blocks)
        ]
        self.ln_out_g = np.ones(c, dtype=np.float32)
        self.ln_out_b = np.zeros(c, dtype=np.float32)
        self.w_out = w(c, c)
        self.b_out = np.zeros(c, dtype=np.float32)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def _time_embedding(self, t: int) -> np.ndarray:
        half = self.n_channels // 2
        freqs = np.exp(
            -math.log(10000.0) * np.arange(half, dtype=np.float32) / np.float32(half)
        )
        angles = np.float32(t) * freqs
        sincos = np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)
        return sincos @ self.w_time + self.b_time

    def _class_embedding(self, y: int | None) -> np.ndarray:
        if y is None:
            return self.class_table[self.n_classes]
        if not 0 <= y < self.n_classes:
            raise ValueError(f"condition {y} outside [0, {self.n_classes})")
        return self.class_table[y]

    def _attended(
        self,
        h: np.ndarray,
        blk: _Block,
        layer: int,
        t: int,
        grid: tuple[int, int] | None,
        merge: MergeRuntime | None,
    ) -> np.ndarray:
        hn = _layer_norm(h, blk.ln1_g, blk.ln1_b)
        if merge is None:
            return attention(hn, blk.wq, blk.wk, blk.wv, blk.wo)

        # Plans are computed on the raw layer input; the reduction is applied
        # to the normalized operand that attention actually consumes.
        layer_tokens = TokenMatrix(h, grid=grid)
        sp = scheduled_plan(
            merge.state, merge.step_index, layer_tokens, merge.config,
            merge.rng.at(t, layer),
        )
        if merge.hook is not None:
            merge.hook(
                LayerEvent(
                    step_index=merge.step_index,
                    timestep=t,
                    layer=layer,
                    pass_id=merge.pass_id,
                    tokens=layer_tokens,
                    importance=sp.importance
                    if sp.importance is not None
                    else merge.state.prev_guidance,
                    plan=sp.plan,
                    mode=sp.mode,
                    grid_fallback=sp.grid_fallback,
                )
            )
        if sp.plan.n_merged == 0:
            # Nothing to reduce: run attention unpermuted so the engine is
            # bit-transparent (reductions are not permutation-bit-stable).
            return attention(hn, blk.wq, blk.wk, blk.wv, blk.wo)
        reduce = apply_prune if sp.mode == MODE_PRUNE else apply_merge
        reduced = reduce(TokenMatrix(hn), sp.plan)
        a = attention(reduced.data, blk.wq, blk.wk, blk.wv, blk.wo)
        return apply_unmerge(TokenMatrix(a), sp.plan).data

    def forward(
        self,
        tokens: TokenMatrix,
        t: int,
        y: int | None,
        merge: MergeRuntime | None = None,
    ) -> TokenMatrix:
        """Predict noise for ``tokens`` at timestep ``t`` under condition ``y``."""
        x = tokens.data.astype(np.float32, copy=False)
        h = x + self._time_embedding(t)[None, :] + self._class_embedding(y)[None, :]
        for layer, blk in enumerate(self.blocks):
            h = h + self._attended(h, blk, layer, t, tokens.grid, merge)
            h = h + _gelu(_layer_norm(h, blk.ln2_g, blk.ln2_b) @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
        out = _layer_norm(h, self.ln_out_g, self.ln_out_b) @ self.w_out + self.b_out
        return TokenMatrix(out, grid=tokens.grid)


def cfg_predict(
    state: SamplerState,
    model: ToyDenoiser,
    config: MergeConfig | None = None,
    rng: Rng | None = None,
    step_index: int = 0,
    hook: Callable[[LayerEvent], None] | None = None,
) -> tuple[TokenMatrix, ImportanceMap]:
    """Guided noise prediction plus the guidance-magnitude map.

    The map is returned so the caller can cache it for the NEXT step's merge
    planning.  When ``config`` and ``rng`` are given, both forward passes run
    through the merge engine.
    """
    def runtime(pass_id: str) -> MergeRuntime | None:
        if config is None or rng is None:
            return None
        return MergeRuntime(config, rng, state, step_index, hook, pass_id)

    eps_cond = model.forward(state.x_t, state.t, state.y, runtime("cond"))
    eps_uncond = model.forward(state.x_t, state.t, None, runtime("uncond"))
    guided = combine_guidance(eps_cond, eps_uncond, state.w)
    guidance = guidance_magnitude(eps_cond, eps_uncond, source_timestep=state.t)
    return guided, guidance


def sample(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    config: MergeConfig,
    w: float,
    y: int | None,
    rng: Rng,
    grid: tuple[int, int],
    hook: Callable[[LayerEvent], None] | None = None,
) -> TokenMatrix:
    """Run the full ancestral reverse loop and return the clean-sample estimate.

    Deterministic given seeds: initial noise, per-step noise, and per-layer
    plan draws all come from disjoint (timestep, layer) streams of ``rng``,
    so matched-seed runs across strategies share every noise draw.
    """
    h, w_grid = grid
    n = h * w_grid
    x = rng.at(schedule.T, INIT_NOISE_LAYER).generator().standard_normal(
        (n, model.n_channels), dtype=np.float32
    )
    state = SamplerState(x_t=TokenMatrix(x, grid=grid), t=schedule.T, w=w, y=y)
    for step_index, t in enumerate(range(schedule.T, 0, -1)):
        state.t = t
        state.x_t = TokenMatrix(x, grid=grid)
        eps, guidance = cfg_predict(state, model, config, rng, step_index, hook)

        alpha = np.float32(schedule.alphas[t - 1])
        coef = np.float32(
            (1.0 - schedule.alphas[t - 1]) / math.sqrt(1.0 - schedule.alpha_bars[t - 1])
        )
        mean = (x - coef * eps.data) / np.sqrt(alpha)
        if t > 1:
            z = rng.at(t, STEP_NOISE_LAYER).generator().standard_normal(
                x.shape, dtype=np.float32
            )
            x = mean + np.float32(math.sqrt(schedule.betas[t - 1])) * z
        else:
            x = mean
        state.prev_guidance = guidance
    return TokenMatrix(x, grid=grid)
