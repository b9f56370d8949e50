"""B-LoRA training on the toy network, gradient checking and the pair grid."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..adapter import LoraAdapter, LoraPair
from ..errors import InvariantError, NonFiniteLossError
from ..tensor import Rng, Tensor
from ..topology import BlockId, block_of_key, stem_for
from . import autodiff as ad
from .autodiff import Var
from .data import SyntheticSample, center_crop, noise_latent, noised_input
from .model import LoraParams, PromptRouting, ToyConfig, ToyModel, encode_prompt, forward, run_blocks

log = logging.getLogger(__name__)

# Full-scale SDXL training settings; only the rank is shrunk for the toy width.
DEFAULT_STEPS = 1000
DEFAULT_LEARNING_RATE = 5e-5
SDXL_RANK = 64
TOY_RANK = 4
TRAIN_PROMPT = "A [v]"
B_LORA_BLOCKS = frozenset({BlockId.W4, BlockId.W5})


@dataclass(frozen=True)
class TrainSpec:
    steps: int = DEFAULT_STEPS
    learning_rate: float = DEFAULT_LEARNING_RATE
    rank: int = TOY_RANK
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    blocks_to_train: frozenset = B_LORA_BLOCKS
    prompt: str = TRAIN_PROMPT
    noise_level: float = 1.0
    noise_seed: int = 0
    init_seed: int = 0
    center_crop: int | None = None
    loss_window: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks_to_train", frozenset(BlockId(b) for b in self.blocks_to_train))
        if self.steps < 1:
            raise InvariantError(f"steps must be >= 1, got {self.steps}", code="precondition")
        if not self.blocks_to_train:
            raise InvariantError("blocks_to_train must not be empty", code="precondition")
        if self.rank < 1 or not self.learning_rate > 0:
            raise InvariantError("rank must be >= 1 and learning_rate > 0", code="precondition")


@dataclass
class TrainResult:
    adapter: LoraAdapter
    losses: list[float] = field(repr=False)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


@dataclass
class Problem:
    """Everything fixed during one optimisation: model, input, target, prompt."""

    model: ToyModel
    latent: np.ndarray
    target: np.ndarray
    routing: PromptRouting

    @classmethod
    def from_sample(cls, config: ToyConfig, sample: SyntheticSample, spec: TrainSpec,
                    model: ToyModel | None = None) -> "Problem":
        model = model or ToyModel.build(config)
        target = sample.target
        if target.shape[1] != config.token_dim:
            raise InvariantError(f"sample width {target.shape[1]} != token_dim {config.token_dim}")
        noise = noise_latent(target.shape[0], config.token_dim, spec.noise_seed)
        latent = noised_input(target, noise, spec.noise_level)
        if spec.center_crop is not None:
            latent, target = center_crop(latent, spec.center_crop), center_crop(target, spec.center_crop)
        routing = PromptRouting(encode_prompt(spec.prompt, config.prompt_dim, config.vocab_seed))
        return cls(model, latent, target, routing)

    def loss(self, params: dict[str, LoraParams], *, start_block: int = 0, entry: np.ndarray | None = None,
             weights: dict[str, Var] | None = None) -> Var:
        x = Var(self.latent if entry is None else entry)
        out = run_blocks(self.model, x, self.routing, params=params, start_block=start_block, weights=weights)
        return ad.mse(ad.sub(out, Var(self.latent)), self.target)


def init_lora(config: ToyConfig, blocks, rank: int, seed: int, *, up_std: float = 0.0) -> dict[str, LoraParams]:
    """Down factors ~ N(0, 1/rank), up factors zero unless ``up_std`` is set."""
    params = {}
    for addr in config.addresses():
        if addr.block not in blocks:
            continue
        stem = stem_for(addr)
        out_dim, in_dim = config.weight_shape(addr)
        rng = Rng.from_label(stem, seed)
        down = rng.normal((rank, in_dim), 1.0 / math.sqrt(rank))
        up = rng.normal((out_dim, rank), up_std) if up_std else np.zeros((out_dim, rank))
        params[stem] = LoraParams(Var(down, requires_grad=True), Var(up, requires_grad=True))
    return params


def _to_adapter(params: dict[str, LoraParams]) -> LoraAdapter:
    return LoraAdapter({stem: LoraPair(Tensor(p.up.value), Tensor(p.down.value)) for stem, p in params.items()})


def train_blora(config: ToyConfig, sample: SyntheticSample, spec: TrainSpec,
                model: ToyModel | None = None) -> TrainResult:
    """Adam on the LoRA factors of ``spec.blocks_to_train`` only.

    ``losses[t]`` is the loss before update ``t``; the last entry is the loss
    after the final update, so the list has ``steps + 1`` values.
    """
    problem = Problem.from_sample(config, sample, spec, model)
    params = init_lora(config, spec.blocks_to_train, spec.rank, spec.init_seed)
    first = min(spec.blocks_to_train)
    # blocks before the first trained one never change: run them once
    entry = run_blocks(problem.model, Var(problem.latent), problem.routing, stop_block=first).value

    leaves = [v for p in params.values() for v in (p.down, p.up)]
    m = [np.zeros_like(v.value) for v in leaves]
    s = [np.zeros_like(v.value) for v in leaves]
    losses: list[float] = []
    for step in range(spec.steps + 1):
        for v in leaves:
            v.grad = None
        with np.errstate(over="ignore", invalid="ignore"):
            loss = problem.loss(params, start_block=first, entry=entry)
        value = float(loss.value)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss became {value} at step {step}")
        losses.append(value)
        if step == spec.steps:
            break
        loss.backward()
        t = step + 1
        for i, v in enumerate(leaves):
            g = v.grad
            m[i] = spec.beta1 * m[i] + (1 - spec.beta1) * g
            s[i] = spec.beta2 * s[i] + (1 - spec.beta2) * g * g
            m_hat = m[i] / (1 - spec.beta1 ** t)
            s_hat = s[i] / (1 - spec.beta2 ** t)
            v.value = v.value - spec.learning_rate * m_hat / (np.sqrt(s_hat) + spec.eps)

    window = min(spec.loss_window, spec.steps)
    if losses[-1] > losses[-1 - window]:
        log.warning("loss rose over the last %d steps (%.6g -> %.6g)", window, losses[-1 - window], losses[-1])
    return TrainResult(_to_adapter(params), losses)


def reconstruction_mse(config: ToyConfig, model: ToyModel, adapter: LoraAdapter | None,
                       target: np.ndarray, spec: TrainSpec, alpha: float = 1.0) -> float:
    """MSE of the adapted model's output against ``target``, with the training input and prompt.

    With the default noise level of 1 the input is pure seeded noise, so a
    target the adapter never saw is scored from the same starting point.
    """
    noise = noise_latent(target.shape[0], config.token_dim, spec.noise_seed)
    latent = noised_input(target, noise, spec.noise_level)
    routing = PromptRouting(encode_prompt(spec.prompt, config.prompt_dim, config.vocab_seed))
    adapted = model if adapter is None else model.attach(adapter, alpha)
    return float(np.mean((forward(adapted, latent, routing) - target) ** 2))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    # largest |grad| seen on frozen leaves (base weights, untrained adapters)
    frozen_max_abs_grad: float


def rel_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(config: ToyConfig, sample: SyntheticSample, blocks, *, samples: int = 128,
               h: float = 1e-3, seed: int = 0, spec: TrainSpec | None = None,
               up_std: float = 0.05) -> GradCheckReport:
    """Compare autodiff gradients of the training loss with central differences.

    Adapters are attached to every block at a generic point (non-zero up
    factors), but only those in ``blocks`` require grad. Base weights enter as
    frozen leaves.
    """
    blocks = frozenset(BlockId(b) for b in blocks)
    spec = spec or TrainSpec(steps=1, blocks_to_train=blocks)
    problem = Problem.from_sample(config, sample, spec)
    params = init_lora(config, set(BlockId), spec.rank, seed, up_std=up_std)
    for stem, p in params.items():
        trainable = block_of_key(stem) in blocks
        p.down.requires_grad = p.up.requires_grad = trainable

    base_leaves = {stem: Var(w) for stem, w in problem.model.weights.items()}
    loss = problem.loss(params, weights=base_leaves)
    loss.backward()

    frozen = [p.down for p in params.values() if not p.down.requires_grad]
    frozen += [p.up for p in params.values() if not p.up.requires_grad]
    frozen += list(base_leaves.values())
    frozen_max = max((float(np.abs(v.grad).max()) for v in frozen if v.grad is not None), default=0.0)

    candidates = [(v, idx) for p in params.values() if p.down.requires_grad
                  for v in (p.down, p.up) for idx in np.ndindex(v.shape)]
    rng = Rng(seed).child(7)
    picks = rng.permutation(len(candidates))[:samples]
    worst = 0.0
    for k in picks:
        v, idx = candidates[k]
        analytic = float(v.grad[idx])
        numeric = central_difference(problem, params, v, idx, h)
        worst = max(worst, rel_error(analytic, numeric))
    return GradCheckReport(worst, len(picks), frozen_max)


def central_difference(problem: Problem, params, leaf: Var, idx, h: float) -> float:
    orig = leaf.value[idx]
    vals = []
    for sign in (1.0, -1.0):
        leaf.value = leaf.value.copy()
        leaf.value[idx] = orig + sign * h
        vals.append(float(problem.loss(params).value))
    leaf.value = leaf.value.copy()
    leaf.value[idx] = orig
    return (vals[0] - vals[1]) / (2.0 * h)


def cell_seed(seed: int, i: int, j: int) -> int:
    return int(Rng(seed, (i, j)).integers(0, 2**31 - 1))


def pair_grid(config: ToyConfig, sample: SyntheticSample, spec: TrainSpec) -> np.ndarray:
    """Final reconstruction loss for every unordered block pair.

    Cell ``(i, i)`` trains block ``i`` alone; the table is mirrored, so it is
    symmetric by construction.
    """
    model = ToyModel.build(config)
    n = len(BlockId)
    table = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            cell = dataclasses.replace(spec, blocks_to_train=frozenset({BlockId(i), BlockId(j)}),
                                       init_seed=cell_seed(spec.init_seed, i, j))
            table[i, j] = table[j, i] = train_blora(config, sample, cell, model).final_loss
    return table
