"""Prompt-injection attribution and style/content similarity scoring.

The probe generates an image with one prompt routed to a single block and a
different prompt everywhere else, then scores the image against the injected
prompt with a cosine similarity in a joint image/text embedding space. Real
CLIP/DINO vectors can be plugged in through :func:`load_embeddings`; tests use
:class:`StubEmbedder`, whose image and text spaces are aligned by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Protocol, Sequence

import numpy as np

from .checkpoint import TensorFile
from .errors import FormatError, MissingLabelError, ShapeError, ZeroNormError
from .tensor import Rng, cosine_sim
from .topology import BlockId, stem_for
from .toynet.data import noise_latent
from .toynet.model import PromptRouting, ToyModel, concept_vector, encode_prompt, forward, prompt_words

PROBE_BLOCKS = tuple(range(1, 7))
# planted-signal detection threshold for stub tests
SIGNAL_THRESHOLD = 0.5

# Reported DINO ViT-B/8 cosine scores for the method (mean, std). Shown next to
# our numbers for orientation only: without real images and a real DINO model
# they cannot be reproduced here.
PUBLISHED_DINO_SCORES = {
    "style": {"mean": 0.881, "std": 0.05},
    "content": {"mean": 0.790, "std": 0.05},
    "reproducible": False,
}


class Embedder(Protocol):
    def embed_image(self, image) -> np.ndarray: ...

    def embed_text(self, label: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ZeroNormError("cannot normalise a zero vector")
    return v / n


@dataclass(frozen=True)
class StubEmbedder:
    """Deterministic stand-in for CLIP with aligned image and text spaces.

    A text embedding is the normalised sum of the hashed word vectors of the
    prompt (template words dropped). An image embedding is the normalised
    mean token, projected to ``dim`` when the token width differs. An image
    composed under a label therefore points at that label's text embedding.
    """

    seed: int = 0
    dim: int = 16

    def embed_text(self, label: str) -> np.ndarray:
        return _unit(sum(concept_vector(w, self.dim, self.seed) for w in prompt_words(label)))

    def _projection(self, width: int) -> np.ndarray:
        if width == self.dim:
            return np.eye(self.dim)
        return Rng(self.seed).child(11, width).normal((self.dim, width), 1.0 / np.sqrt(width))

    def embed_image(self, image) -> np.ndarray:
        grid = np.atleast_2d(np.asarray(image, dtype=np.float64))
        return _unit(self._projection(grid.shape[1]) @ grid.mean(axis=0))

    def compose(self, label: str, tokens: int, width: int | None = None, *,
                noise: float = 0.1, seed: int = 0) -> np.ndarray:
        """A planted-signal grid: every token carries the label's direction plus noise."""
        width = self.dim if width is None else width
        direction = np.linalg.pinv(self._projection(width)) @ self.embed_text(label)
        direction *= np.sqrt(width) / np.linalg.norm(direction)
        return direction + Rng(seed).child(12).normal((tokens, width), noise)


@dataclass(frozen=True)
class LookupEmbedder:
    """Embeddings exported elsewhere, keyed by label; images are looked up by key too."""

    vectors: Mapping[str, np.ndarray]

    def embed_text(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise MissingLabelError(f"no embedding for label {label!r}") from None

    def embed_image(self, image) -> np.ndarray:
        if isinstance(image, str):
            return self.embed_text(image)
        return _unit(image)


def load_embeddings(tf: TensorFile) -> LookupEmbedder:
    vectors = {}
    dim = None
    for name in tf.names():
        v = tf.tensor(name).numpy().astype(np.float64).reshape(-1)
        if dim is None:
            dim = v.size
        elif v.size != dim:
            raise FormatError(f"embedding {name!r} has dimension {v.size}, expected {dim}", code="ragged-dimension")
        try:
            vectors[name] = _unit(v)
        except ZeroNormError:
            raise FormatError(f"embedding {name!r} is a zero vector", code="zero-vector") from None
    return LookupEmbedder(vectors)


def clip_score(image_embedding, text_embedding) -> float:
    """Cosine similarity of an image embedding and a prompt embedding."""
    a, b = np.asarray(image_embedding).reshape(-1), np.asarray(text_embedding).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"embedding dimensions differ: {a.size} vs {b.size}")
    return cosine_sim(a, b)


# --- probe -----------------------------------------------------------------

def load_labels() -> dict[str, list[str]]:
    text = resources.files("blora").joinpath("data/labels.json").read_text(encoding="utf-8")
    return json.loads(text)


def prompt_pairs(n: int, family: str, seed: int = 0) -> list[tuple[str, str]]:
    """``n`` (p, p_hat) pairs with ``p != p_hat``.

    Content pairs swap the object; style pairs keep the object and swap the
    colour, so the style family varies only that channel.
    """
    labels = load_labels()
    objects, colors = labels["objects"], labels["styles"]
    rng = Rng(seed).child(21 if family == "content" else 22)
    pairs = []
    for _ in range(n):
        if family == "content":
            i, j = rng.permutation(len(objects))[:2]
            pairs.append((f"A photo of a {objects[i]}", f"A photo of a {objects[j]}"))
        elif family == "style":
            o = objects[int(rng.integers(0, len(objects)))]
            i, j = rng.permutation(len(colors))[:2]
            pairs.append((f"A photo of a {colors[i]} {o}", f"A photo of a {colors[j]} {o}"))
        else:
            raise ValueError(f"family must be 'content' or 'style', got {family!r}")
    return pairs


@dataclass(frozen=True)
class FamilyScores:
    mean: list[float]
    std: list[float]
    baseline: float  # mean score of p_hat against images made wholly under p
    argmax: int

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "baseline": self.baseline, "argmax": self.argmax}


@dataclass(frozen=True)
class ProbeReport:
    blocks: list[int]
    pair_count: int
    families: dict[str, FamilyScores] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "command": "probe",
            "blocks": self.blocks,
            "pair_count": self.pair_count,
            "families": {k: v.to_json() for k, v in self.families.items()},
        }


def _score_family(model: ToyModel, pairs, embedder: Embedder, blocks, latent, seed: int,
                  require_distinct: bool) -> FamilyScores:
    dim = model.config.prompt_dim
    scores = np.zeros((len(blocks), len(pairs)))
    base_scores = []
    for k, (p, p_hat) in enumerate(pairs):
        if require_distinct and p == p_hat:
            raise ValueError(f"probe pairs need p != p_hat, got {p!r} twice")
        c_p, c_hat = encode_prompt(p, dim, seed), encode_prompt(p_hat, dim, seed)
        target = embedder.embed_text(p_hat)
        plain = forward(model, latent, PromptRouting(c_p))
        base_scores.append(clip_score(embedder.embed_image(plain), target))
        for n, b in enumerate(blocks):
            img = forward(model, latent, PromptRouting(c_p, {b: c_hat}))
            scores[n, k] = clip_score(embedder.embed_image(img), target)
    mean = scores.mean(axis=1)
    return FamilyScores([float(x) for x in mean], [float(x) for x in scores.std(axis=1)],
                        float(np.mean(base_scores)), int(blocks[int(np.argmax(mean))]))


def probe_blocks(model: ToyModel, content_pairs: Sequence[tuple[str, str]],
                 style_pairs: Sequence[tuple[str, str]], embedder: Embedder, *,
                 blocks: Sequence[int] = PROBE_BLOCKS, latent: np.ndarray | None = None,
                 tokens: int = 16, require_distinct: bool = True) -> ProbeReport:
    """Average injection score per block, for each prompt family."""
    cfg = model.config
    if latent is None:
        latent = noise_latent(tokens, cfg.token_dim, cfg.seed)
    blocks = [int(BlockId(b)) for b in blocks]
    families = {}
    for name, pairs in (("content", content_pairs), ("style", style_pairs)):
        if pairs:
            families[name] = _score_family(model, pairs, embedder, blocks, latent, cfg.vocab_seed, require_distinct)
    count = max(len(content_pairs), len(style_pairs))
    return ProbeReport(blocks, count, families)


def copy_block_fixture(model: ToyModel, block: int) -> ToyModel:
    """Hand-wire ``model`` so only ``block`` writes to the output.

    In that block every cross-attention layer attends uniformly (zero keys)
    and copies the prompt tokens through identity value/out projections; all
    other out projections are zeroed and the start token is cleared.
    """
    cfg = model.config
    if cfg.prompt_dim != cfg.token_dim:
        raise ShapeError("the copy fixture needs prompt_dim == token_dim")
    eye = np.eye(cfg.token_dim)
    zero = np.zeros((cfg.token_dim, cfg.token_dim))
    overrides = {}
    for addr in cfg.addresses():
        stem = stem_for(addr)
        mine = addr.block == block and addr.attention_kind == "cross"
        if addr.projection == "out":
            overrides[stem] = eye if mine else zero
        elif mine and addr.projection == "V":
            overrides[stem] = eye
        elif mine and addr.projection == "K":
            overrides[stem] = zero
    return model.with_base(overrides, start_token=np.zeros(cfg.prompt_dim))


# --- evaluation ------------------------------------------------------------

@dataclass(frozen=True)
class EvalEntry:
    style_score: float
    content_score: float


def eval_similarity(output_embedding, style_ref_embedding, content_ref_embedding) -> EvalEntry:
    return EvalEntry(clip_score(output_embedding, style_ref_embedding),
                     clip_score(output_embedding, content_ref_embedding))


@dataclass(frozen=True)
class EvalReport:
    style_mean: float
    style_std: float
    content_mean: float
    content_std: float
    count: int

    @classmethod
    def from_entries(cls, entries: Sequence[EvalEntry]) -> "EvalReport":
        if not entries:
            raise ValueError("no evaluation entries")
        s = np.array([e.style_score for e in entries])
        c = np.array([e.content_score for e in entries])
        return cls(float(s.mean()), float(s.std()), float(c.mean()), float(c.std()), len(entries))

    def to_json(self) -> dict:
        return {
            "command": "eval",
            "count": self.count,
            "style_score": {"mean": self.style_mean, "std": self.style_std},
            "content_score": {"mean": self.content_mean, "std": self.content_std},
            "reference": PUBLISHED_DINO_SCORES,
        }
