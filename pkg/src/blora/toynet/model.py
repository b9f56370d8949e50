"""A frozen miniature of the SDXL block layout.

Eight blocks in forward order, each a stack of attention layers; a layer is
a self-attention followed by a cross-attention over the prompt context, both
residual. Projection weights are keyed by the same stems as real SDXL
adapters, so trained toy adapters go through the regular adapter tooling
unchanged.

The network output is the residual update ``x_final - latent``: the fixed
input latent is not echoed to the output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..adapter import LoraAdapter
from ..checkpoint import TensorFile
from ..errors import FormatError, InvariantError, ShapeError
from ..tensor import Rng, Tensor
from ..topology import ATTENTION_KINDS, PROJECTIONS, BlockId, LayerAddress, layer_count, stem_for
from . import autodiff as ad
from .autodiff import Var

DEFAULT_LAYER_COUNTS = (1, 2, 2, 2, 2, 2, 2, 1)
STOPWORDS = frozenset({"a", "an", "the", "photo", "of", "in", "style"})
CONFIG_KEY = "blora.toy_config"
START_TOKEN_KEY = "toy.start_token"


@dataclass(frozen=True)
class ToyConfig:
    token_dim: int = 16
    head_count: int = 2
    layer_counts: tuple[int, ...] = DEFAULT_LAYER_COUNTS
    prompt_dim: int = 16
    seed: int = 0
    # seed of the word-vector table used by encode_prompt
    vocab_seed: int = 0
    init_gain: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_counts", tuple(int(n) for n in self.layer_counts))
        if self.token_dim < 1 or self.head_count < 1 or self.prompt_dim < 1:
            raise InvariantError("dimensions and head count must be >= 1")
        if self.token_dim % self.head_count:
            raise InvariantError(f"token_dim {self.token_dim} is not divisible by head_count {self.head_count}")
        if len(self.layer_counts) != len(BlockId):
            raise InvariantError(f"need {len(BlockId)} layer counts, got {len(self.layer_counts)}")
        for b, n in zip(BlockId, self.layer_counts):
            if not 1 <= n <= layer_count(b):
                raise InvariantError(f"{b} takes 1..{layer_count(b)} layers, got {n}")

    def to_json(self) -> dict:
        return {"token_dim": self.token_dim, "head_count": self.head_count,
                "layer_counts": list(self.layer_counts), "prompt_dim": self.prompt_dim,
                "seed": self.seed, "vocab_seed": self.vocab_seed, "init_gain": self.init_gain}

    @classmethod
    def from_json(cls, doc: dict) -> "ToyConfig":
        return cls(**doc)

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.head_count

    def addresses(self, block: BlockId | int | None = None) -> list[LayerAddress]:
        blocks = list(BlockId) if block is None else [BlockId(block)]
        return [LayerAddress(b, i, kind, proj)
                for b in blocks
                for i in range(self.layer_counts[b])
                for kind in ATTENTION_KINDS
                for proj in PROJECTIONS]

    def stems(self, block: BlockId | int | None = None) -> list[str]:
        return [stem_for(a) for a in self.addresses(block)]

    def weight_shape(self, addr: LayerAddress) -> tuple[int, int]:
        """(out, in); cross-attention K and V read the prompt context."""
        if addr.attention_kind == "cross" and addr.projection in ("K", "V"):
            return self.token_dim, self.prompt_dim
        return self.token_dim, self.token_dim


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ToyModel:
    """Frozen base projections plus the effective weights after attachments.

    ``base`` never changes. ``weights`` starts equal to ``base`` and picks up
    ``W0 + alpha * delta`` for every attached adapter stem.
    """

    config: ToyConfig
    base: Mapping[str, np.ndarray]
    start_token: np.ndarray
    weights: Mapping[str, np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        if self.weights is None:
            object.__setattr__(self, "weights", dict(self.base))

    @classmethod
    def build(cls, config: ToyConfig) -> "ToyModel":
        rng = Rng(config.seed)
        base = {}
        for addr in config.addresses():
            out_dim, in_dim = config.weight_shape(addr)
            w = rng.normal((out_dim, in_dim), config.init_gain / math.sqrt(in_dim))
            # kept float32-representable so exported base weights are lossless
            base[stem_for(addr)] = _frozen(w.astype(np.float32))
        start = _frozen(rng.normal((1, config.prompt_dim)).astype(np.float32))
        return cls(config, base, start)

    def with_base(self, overrides: Mapping[str, np.ndarray], start_token: np.ndarray | None = None) -> "ToyModel":
        """Replace some base weights (used to hand-wire fixtures)."""
        base = dict(self.base)
        for stem, w in overrides.items():
            if stem not in base or np.shape(w) != base[stem].shape:
                raise ShapeError(f"cannot override {stem!r} with shape {np.shape(w)}")
            base[stem] = _frozen(w)
        start = self.start_token if start_token is None else _frozen(np.reshape(start_token, (1, -1)))
        return ToyModel(self.config, base, start)

    def attach(self, adapter: LoraAdapter, alpha: float = 1.0) -> "ToyModel":
        """New model with ``W = W + alpha * scale * delta`` for each adapter stem."""
        weights = dict(self.weights)
        for stem, pair in adapter.pairs.items():
            if stem not in weights:
                raise InvariantError(f"toy model has no projection {stem!r}", code="missing-base-weight")
            up = pair.up.numpy().astype(np.float64)
            down = pair.down.numpy().astype(np.float64)
            if (up.shape[0], down.shape[1]) != weights[stem].shape:
                raise ShapeError(f"{stem!r}: update {(up.shape[0], down.shape[1])} vs weight {weights[stem].shape}")
            coef = alpha * pair.scale * pair.network_scale
            if coef != 0:
                weights[stem] = _frozen(weights[stem] + coef * (up @ down))
        return ToyModel(self.config, self.base, self.start_token, weights)

    def base_tensors(self) -> dict:
        """Base weights as F32 tensors under ``<stem>.weight`` keys."""
        return {f"{stem}.weight": Tensor(w) for stem, w in self.base.items()}

    def to_file(self) -> TensorFile:
        """Base weights, start token and config in one container."""
        tensors = self.base_tensors()
        tensors[START_TOKEN_KEY] = Tensor(self.start_token)
        return TensorFile.from_tensors(tensors, {CONFIG_KEY: json.dumps(self.config.to_json(), sort_keys=True)})

    @classmethod
    def from_file(cls, tf: TensorFile) -> "ToyModel":
        try:
            config = ToyConfig.from_json(json.loads(tf.metadata[CONFIG_KEY]))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"not a toy base file: {exc}") from None
        model = cls.build(config)
        overrides = {}
        for stem in config.stems():
            key = f"{stem}.weight"
            if key not in tf.entries:
                raise FormatError(f"toy base file lacks {key!r}", code="missing-tensor")
            overrides[stem] = tf.tensor(key).numpy().astype(np.float64)
        if START_TOKEN_KEY not in tf.entries:
            raise FormatError(f"toy base file lacks {START_TOKEN_KEY!r}", code="missing-tensor")
        return model.with_base(overrides, tf.tensor(START_TOKEN_KEY).numpy().astype(np.float64))


# --- prompts ---------------------------------------------------------------

def concept_vector(word: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit vector derived from a hash of ``word``."""
    v = Rng.from_label(word, seed).normal(dim)
    return v / np.linalg.norm(v)


def prompt_words(text: str) -> list[str]:
    words = [w for w in text.lower().split() if w not in STOPWORDS]
    return words or [text.lower()]


def encode_prompt(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Context matrix for a prompt: one row per content word, entries ~ N(0, 1)."""
    return np.stack([concept_vector(w, dim, seed) * math.sqrt(dim) for w in prompt_words(text)])


@dataclass(frozen=True)
class PromptRouting:
    """Which prompt context each block's cross-attention sees."""

    default: np.ndarray
    overrides: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "default", np.atleast_2d(np.asarray(self.default, dtype=np.float64)))
        object.__setattr__(self, "overrides", {int(BlockId(b)): np.atleast_2d(np.asarray(e, dtype=np.float64))
                                               for b, e in self.overrides.items()})

    def resolve(self, block: BlockId | int) -> np.ndarray:
        return self.overrides.get(int(block), self.default)

    @classmethod
    def from_text(cls, default: str, overrides: Mapping[int, str] | None = None, *, dim: int, seed: int = 0):
        return cls(encode_prompt(default, dim, seed),
                   {b: encode_prompt(t, dim, seed) for b, t in (overrides or {}).items()})


# The five prompt-injection ablations: (default prompt, {block: prompt}).
ABLATION_SCHEMES: dict[int, tuple[str, dict[int, str]]] = {
    1: ("A [c] in [s] style", {}),
    2: ("A [s]", {BlockId.W4: "A [c]"}),
    3: ("A [c]", {BlockId.W5: "A [s]"}),
    4: ("A [c] in [s] style", {BlockId.W4: "A [c]"}),
    5: ("A [c] in [s] style", {BlockId.W5: "A [s]"}),
}


def ablation_routing(scheme: int, *, dim: int, seed: int = 0,
                     content_token: str = "[c]", style_token: str = "[s]") -> PromptRouting:
    try:
        default, overrides = ABLATION_SCHEMES[scheme]
    except KeyError:
        raise InvariantError(f"ablation scheme must be 1..5, got {scheme}") from None

    def fill(t: str) -> str:
        return t.replace("[c]", content_token).replace("[s]", style_token)
    return PromptRouting.from_text(fill(default), {b: fill(t) for b, t in overrides.items()},
                                   dim=dim, seed=seed)


# --- attention -------------------------------------------------------------

def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int = 1) -> np.ndarray:
    """Multi-head ``softmax(q k^T / sqrt(d)) v`` with ``d`` the per-head width."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.shape[1] != k.shape[1] or k.shape != v.shape or q.shape[1] % heads:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} with {heads} heads")
    dh = q.shape[1] // heads
    out = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out.append((e / e.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.concatenate(out, axis=1)


def _mha(q: Var, k: Var, v: Var, heads: int) -> Var:
    t, d = q.shape
    s, dh = k.shape[0], d // heads
    qh = ad.transpose(ad.reshape(q, (t, heads, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(k, (s, heads, dh)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(v, (s, heads, dh)), (1, 0, 2))
    p = ad.softmax(ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dh)))
    return ad.reshape(ad.transpose(ad.matmul(p, vh), (1, 0, 2)), (t, d))


@dataclass
class LoraParams:
    """Trainable (or probe-only) factors for one projection, as autodiff leaves."""

    down: Var
    up: Var
    coef: float = 1.0


def context_digest(context: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(context, dtype=np.float64).tobytes()).hexdigest()[:16]


def run_blocks(model: ToyModel, x: Var, routing: PromptRouting, *,
               params: Mapping[str, LoraParams] | None = None,
               start_block: int = 0, stop_block: int = len(BlockId),
               record: dict | None = None, weights: Mapping[str, Var] | None = None) -> Var:
    """Push the residual stream ``x`` through blocks ``start_block..stop_block-1``.

    ``params`` adds ``coef * (x A^T) B^T`` on top of the effective weight of a
    projection. ``weights`` optionally supplies the (frozen) weight leaves
    instead of constants built from ``model.weights``. ``record``, when given, collects per-block outputs and the
    context digest each cross-attention layer saw.
    """
    cfg = model.config
    params = params or {}
    if x.shape[1] != cfg.token_dim:
        raise ShapeError(f"latent width {x.shape[1]} != token_dim {cfg.token_dim}")

    def proj(inp: Var, addr: LayerAddress) -> Var:
        stem = stem_for(addr)
        w = weights[stem] if weights is not None else Var(model.weights[stem])
        y = ad.matmul(inp, ad.transpose(w))
        p = params.get(stem)
        if p is not None:
            low = ad.matmul(ad.matmul(inp, ad.transpose(p.down)), ad.transpose(p.up))
            y = ad.add(y, ad.scale(low, p.coef))
        return y

    for b in list(BlockId)[start_block:stop_block]:
        context = routing.resolve(b)
        if context.shape[1] != cfg.prompt_dim:
            raise ShapeError(f"prompt width {context.shape[1]} != prompt_dim {cfg.prompt_dim}")
        ctx = Var(np.vstack([model.start_token, context]))
        for i in range(cfg.layer_counts[b]):
            def a(kind, p, _b=b, _i=i):
                return LayerAddress(_b, _i, kind, p)
            h = _mha(proj(x, a("self", "Q")), proj(x, a("self", "K")), proj(x, a("self", "V")), cfg.head_count)
            x = ad.add(x, proj(h, a("self", "out")))
            h = _mha(proj(x, a("cross", "Q")), proj(ctx, a("cross", "K")), proj(ctx, a("cross", "V")),
                     cfg.head_count)
            x = ad.add(x, proj(h, a("cross", "out")))
            if record is not None:
                record.setdefault("cross_contexts", []).append((int(b), i, context_digest(context)))
        if record is not None:
            record.setdefault("block_outputs", {})[int(b)] = x.value.copy()
    return x


def forward(model: ToyModel, latent: np.ndarray, routing: PromptRouting, *, record: dict | None = None) -> np.ndarray:
    """Run every block and return the residual update (token grid)."""
    x0 = np.asarray(latent, dtype=np.float64)
    out = run_blocks(model, Var(x0), routing, record=record)
    return out.value - x0
