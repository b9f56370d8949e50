"""LoRA adapter algebra.

An adapter is a map from key stems to low-rank factor pairs. The weight
update of one projection is ``delta = (network_alpha / rank) * up @ down``
and the merged weight is ``W = W0 + alpha * delta``. A B-LoRA is an adapter
whose stems all live in one block, tagged with the role it plays (content or
style). Every operation here returns new values; inputs are never modified.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import checkpoint
from .checkpoint import TensorFile
from .errors import (
    EmptyBlockError,
    FormatError,
    InvariantError,
    OrphanFactorError,
    OverlapError,
    RankMismatchError,
    ShapeError,
)
from .tensor import Tensor, axpy_scale, matmul
from .topology import BlockId, address_of, block_of_key, canonical_stem

log = logging.getLogger(__name__)

ROLES = ("content", "style")
META_BLOCK = "blora.block"
META_ROLE = "blora.role"
META_ALPHA = "blora.alpha"
META_PROMPT = "blora.prompt"
COMBINED_PROMPT = "A [c] in [s] style"

# (up suffix, down suffix) per accepted naming convention; the first is what we write
_FACTOR_SUFFIXES = (
    (".lora.up.weight", ".lora.down.weight"),
    (".lora_up.weight", ".lora_down.weight"),
    (".lora_B.weight", ".lora_A.weight"),
)
_ALPHA_SUFFIX = ".alpha"


@dataclass(frozen=True)
class LoraPair:
    """Factors ``up`` (m x r) and ``down`` (r x n) of one projection update.

    ``scale`` is the user-facing merge strength folded in by
    :func:`scale_adapter`; it multiplies whatever ``alpha`` a merge uses.
    """

    up: Tensor
    down: Tensor
    network_alpha: float | None = None
    scale: float = 1.0

    def __post_init__(self) -> None:
        if len(self.up.shape) != 2 or len(self.down.shape) != 2:
            raise ShapeError(f"LoRA factors must be matrices, got {list(self.up.shape)} and {list(self.down.shape)}")
        m, r = self.up.shape
        r2, n = self.down.shape
        if r != r2:
            raise RankMismatchError(f"up has rank {r} but down has rank {r2}")
        if r > min(m, n):
            raise InvariantError(f"rank {r} exceeds min({m}, {n})", code="rank")
        if self.network_alpha is not None:
            na = float(np.float32(self.network_alpha))
            if not math.isfinite(na):
                raise InvariantError("network_alpha must be finite")
            object.__setattr__(self, "network_alpha", na)
        if not math.isfinite(self.scale):
            raise InvariantError("scale must be finite")
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.up.shape[0], self.down.shape[1]

    @property
    def network_scale(self) -> float:
        return 1.0 if self.network_alpha is None else self.network_alpha / self.rank


def lora_delta(pair: LoraPair) -> Tensor:
    delta = matmul(pair.up.promote(), pair.down.promote())
    if pair.network_alpha is None or pair.network_scale == 1.0:
        return delta
    return Tensor(delta.numpy() * np.float32(pair.network_scale))


def effective_delta(pair: LoraPair) -> Tensor:
    """The update a merge at ``alpha=1`` applies, ``scale`` included."""
    delta = lora_delta(pair)
    return delta if pair.scale == 1.0 else Tensor(delta.numpy() * np.float32(pair.scale))


def merge(base: Tensor, pair: LoraPair, alpha: float = 1.0) -> Tensor:
    """``base + alpha * scale * delta``; returns ``base`` itself when that coefficient is 0."""
    if tuple(base.shape) != pair.shape:
        raise ShapeError(f"base weight {list(base.shape)} does not match adapter update {list(pair.shape)}")
    coef = alpha * pair.scale
    if coef == 0:
        return base
    return axpy_scale(base.promote(), lora_delta(pair), coef)


@dataclass(frozen=True)
class LoraAdapter:
    pairs: Mapping[str, LoraPair] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        canon: dict[str, LoraPair] = {}
        for stem in sorted(self.pairs):
            key = canonical_stem(stem)
            if key in canon:
                raise OverlapError(f"stems {stem!r} and {key!r} name the same projection")
            canon[key] = self.pairs[stem]
        object.__setattr__(self, "pairs", canon)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def tensor_count(self) -> int:
        """Factor tensors (two per stem); network-alpha scalars are not counted."""
        return 2 * len(self.pairs)

    def by_block(self) -> dict[BlockId, list[str]]:
        out: dict[BlockId, list[str]] = {}
        for stem in self.pairs:
            addr = address_of(stem)
            if addr is not None:
                out.setdefault(addr.block, []).append(stem)
        return dict(sorted(out.items()))

    def out_of_topology(self) -> list[str]:
        return [s for s in self.pairs if address_of(s) is None]

    def layer_count(self) -> int:
        """Distinct attention layers touched by this adapter."""
        return len({(a.block, a.layer) for a in map(address_of, self.pairs) if a is not None})

    def deltas(self) -> dict[str, Tensor]:
        return {stem: effective_delta(p) for stem, p in self.pairs.items()}


@dataclass(frozen=True)
class BLora(LoraAdapter):
    """Adapter confined to a single block, tagged content or style."""

    block: BlockId = BlockId.W4
    role: str = "content"

    def __post_init__(self) -> None:
        super().__post_init__()
        object.__setattr__(self, "block", BlockId(self.block))
        if self.role not in ROLES:
            raise InvariantError(f"role must be one of {ROLES}, got {self.role!r}", code="role")
        if not self.pairs:
            raise EmptyBlockError(f"a B-LoRA for {self.block} needs at least one stem")
        for stem in self.pairs:
            if address_of(stem) is None or block_of_key(stem) != self.block:
                raise InvariantError(f"stem {stem!r} is not in block {self.block}", code="block-purity")
        meta = dict(self.metadata)
        meta[META_BLOCK] = str(self.block)
        meta[META_ROLE] = self.role
        object.__setattr__(self, "metadata", meta)


def as_blora(adapter: LoraAdapter) -> BLora | None:
    """Reinterpret a loaded adapter as a B-LoRA if its metadata says it is one."""
    if isinstance(adapter, BLora):
        return adapter
    block, role = adapter.metadata.get(META_BLOCK), adapter.metadata.get(META_ROLE)
    if block is None or role not in ROLES or "," in block:
        return None
    return BLora(adapter.pairs, adapter.metadata, block=BlockId[block], role=role)


def _subset(adapter: LoraAdapter, blocks: set[BlockId]) -> dict[str, LoraPair]:
    return {s: p for s, p in adapter.pairs.items()
            if (a := address_of(s)) is not None and a.block in blocks}


def extract_blora(adapter: LoraAdapter, block: BlockId | int, role: str) -> BLora:
    block = BlockId(block)
    pairs = _subset(adapter, {block})
    if not pairs:
        raise EmptyBlockError(f"adapter has no stems in block {block}")
    return BLora(pairs, {}, block=block, role=role)


def extract_blocks(adapter: LoraAdapter, blocks: Iterable[BlockId | int]) -> LoraAdapter:
    """Restrict an adapter to several blocks (e.g. the W4+W5 training product)."""
    blocks = sorted({BlockId(b) for b in blocks})
    pairs = _subset(adapter, set(blocks))
    missing = [str(b) for b in blocks if not any(block_of_key(s) == b for s in pairs)]
    if missing:
        raise EmptyBlockError(f"adapter has no stems in block(s) {', '.join(missing)}")
    return LoraAdapter(pairs, {META_BLOCK: ",".join(str(b) for b in blocks)})


def combine_adapters(first: LoraAdapter, second: LoraAdapter) -> LoraAdapter:
    """Key union of two adapters; overlapping stems are refused."""
    overlap = sorted(set(first.pairs) & set(second.pairs))
    if overlap:
        raise OverlapError(f"{len(overlap)} stems appear in both adapters, e.g. {overlap[0]!r}")
    stray = first.out_of_topology() + second.out_of_topology()
    if stray:
        log.warning("preserving %d out-of-topology keys (e.g. %s)", len(stray), stray[0])
    return LoraAdapter({**first.pairs, **second.pairs}, {})


def combine_bloras(content: BLora, style: BLora) -> LoraAdapter:
    """Plug a content B-LoRA and a style B-LoRA into one adapter."""
    if content.block == style.block:
        raise OverlapError(f"both B-LoRAs occupy block {content.block}")
    if content.role != "content" or style.role != "style":
        raise InvariantError(
            f"expected a content and a style B-LoRA, got {content.role} and {style.role}", code="role"
        )
    merged = combine_adapters(content, style)
    meta = {META_ROLE: "combined", META_PROMPT: COMBINED_PROMPT}
    for role, src in (("content", content), ("style", style)):
        meta[f"blora.{role}.block"] = str(src.block)
        meta[f"blora.{role}.digest"] = adapter_digest(src)
        if "blora.manifest" in src.metadata:
            meta[f"blora.{role}.manifest"] = src.metadata["blora.manifest"]
    return LoraAdapter(merged.pairs, meta)


def scale_adapter(adapter: LoraAdapter, alpha: float) -> LoraAdapter:
    if not math.isfinite(alpha):
        raise InvariantError(f"alpha must be finite, got {alpha}")
    pairs = {s: dataclasses.replace(p, scale=p.scale * alpha) for s, p in adapter.pairs.items()}
    return dataclasses.replace(adapter, pairs=pairs)


def _base_key(weights: Mapping[str, Tensor], stem: str) -> str:
    for cand in (f"{stem}.weight", stem.removeprefix("unet.") + ".weight"):
        if cand in weights:
            return cand
    raise InvariantError(f"base weights have no tensor for {stem!r}", code="missing-base-weight")


def merge_adapter(weights: Mapping[str, Tensor], adapter: LoraAdapter, alpha: float = 1.0) -> dict[str, Tensor]:
    """Merge every adapter stem into a dense weight map (``<stem>.weight`` keys)."""
    out = dict(weights)
    for stem, pair in adapter.pairs.items():
        key = _base_key(weights, stem)
        out[key] = merge(weights[key], pair, alpha)
    return out


# --- file mapping ------------------------------------------------------------

def _split_name(name: str) -> tuple[str, str]:
    for up, down in _FACTOR_SUFFIXES:
        if name.endswith(up):
            return name[: -len(up)], "up"
        if name.endswith(down):
            return name[: -len(down)], "down"
    if name.endswith(_ALPHA_SUFFIX):
        return name[: -len(_ALPHA_SUFFIX)], "alpha"
    raise FormatError(f"tensor {name!r} is not a LoRA factor or alpha", code="unrecognized-tensor")


def _parse_scales(text: str | None) -> float | dict[str, float]:
    if text is None:
        return 1.0
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        raise FormatError(f"bad {META_ALPHA} metadata {text!r}") from None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, dict) and all(isinstance(v, (int, float)) for v in value.values()):
        return {canonical_stem(k): float(v) for k, v in value.items()}
    raise FormatError(f"bad {META_ALPHA} metadata {text!r}")


def load_adapter(tf: TensorFile) -> LoraAdapter:
    parts: dict[str, dict[str, Tensor]] = {}
    for name in sorted(tf.entries):
        raw_stem, kind = _split_name(name)
        stem = canonical_stem(raw_stem)
        slot = parts.setdefault(stem, {})
        if kind in slot:
            raise FormatError(f"{stem!r} has more than one {kind} tensor", code="duplicate-name")
        slot[kind] = tf.entries[name].to_tensor()

    meta = dict(tf.metadata)
    scales = _parse_scales(meta.pop(META_ALPHA, None))
    pairs = {}
    for stem, slot in parts.items():
        if "up" not in slot or "down" not in slot:
            have = ", ".join(sorted(slot))
            raise OrphanFactorError(f"{stem!r} has only {have}; both up and down factors are required")
        up, down = slot["up"].promote(), slot["down"].promote()
        if len(up.shape) == 2 and len(down.shape) == 2 and up.shape[1] != down.shape[0]:
            raise RankMismatchError(f"{stem!r}: up rank {up.shape[1]} != down rank {down.shape[0]}")
        na = None
        if "alpha" in slot:
            if slot["alpha"].size != 1:
                raise FormatError(f"{stem!r}.alpha must hold one value")
            na = float(slot["alpha"].numpy().reshape(-1)[0])
        scale = scales.get(stem, 1.0) if isinstance(scales, dict) else scales
        try:
            pairs[stem] = LoraPair(up, down, na, scale)
        except ShapeError as exc:
            raise FormatError(f"{stem!r}: {exc}") from None
    return LoraAdapter(pairs, meta)


def save_adapter(adapter: LoraAdapter, dtype: str = "F32") -> TensorFile:
    tensors: dict[str, Tensor] = {}
    up_sfx, down_sfx = _FACTOR_SUFFIXES[0]
    for stem, pair in adapter.pairs.items():
        tensors[stem + up_sfx] = pair.up.to(dtype)
        tensors[stem + down_sfx] = pair.down.to(dtype)
        if pair.network_alpha is not None:
            tensors[stem + _ALPHA_SUFFIX] = Tensor([pair.network_alpha])
    meta = dict(adapter.metadata)
    scales = {s: p.scale for s, p in adapter.pairs.items()}
    distinct = set(scales.values())
    if distinct and distinct != {1.0}:
        if len(distinct) == 1:
            meta[META_ALPHA] = repr(distinct.pop())
        else:
            meta[META_ALPHA] = json.dumps({s: v for s, v in sorted(scales.items()) if v != 1.0},
                                          separators=(",", ":"))
    return TensorFile.from_tensors(tensors, meta)


def adapter_digest(adapter: LoraAdapter) -> str:
    """sha256 of the canonical serialization; equal adapters share a digest."""
    return hashlib.sha256(checkpoint.serialize(save_adapter(adapter))).hexdigest()
