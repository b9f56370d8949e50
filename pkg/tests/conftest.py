from __future__ import annotations

import math

import numpy as np
import hypothesis.strategies as st
from hypothesis import HealthCheck, settings

from blora.adapter import LoraAdapter, LoraPair
from blora.checkpoint import TensorFile, TensorFileEntry
from blora.tensor import ITEMSIZE, Tensor
from blora.topology import BlockId, keys_of_block

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple loop, float32 accumulation in ascending k."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def base_weights_for(adapter: LoraAdapter, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {f"{s}.weight": Tensor(rng.standard_normal(p.shape)) for s, p in adapter.pairs.items()}


names = st.text(min_size=1, max_size=24).filter(lambda s: s != "__metadata__")
shapes = st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple)


@st.composite
def entries(draw):
    dtype = draw(st.sampled_from(["F32", "F16", "BF16"]))
    shape = draw(shapes)
    data = draw(st.binary(min_size=math.prod(shape) * ITEMSIZE[dtype], max_size=math.prod(shape) * ITEMSIZE[dtype]))
    return TensorFileEntry(dtype, shape, data)


@st.composite
def tensor_files(draw, max_entries: int = 5):
    ents = draw(st.dictionaries(names, entries(), max_size=max_entries))
    meta = draw(st.dictionaries(st.text(max_size=12), st.text(max_size=12), max_size=3))
    return TensorFile(ents, meta)


def random_pair(rng: np.random.Generator, m: int, n: int, r: int, *, network_alpha=None, scale=1.0) -> LoraPair:
    up = Tensor(rng.standard_normal((m, r)))
    down = Tensor(rng.standard_normal((r, n)))
    return LoraPair(up, down, network_alpha, scale)


@st.composite
def adapters(draw, blocks=tuple(BlockId), min_stems: int = 1, max_stems: int = 6):
    """Small random adapters over real SDXL stems (toy-sized matrices)."""
    pool = [k for b in blocks for k in keys_of_block(b)]
    stems = draw(st.lists(st.sampled_from(pool), min_size=min_stems, max_size=max_stems, unique=True))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    pairs = {}
    for stem in stems:
        m, n = draw(st.integers(1, 6)), draw(st.integers(1, 6))
        r = draw(st.integers(1, min(m, n)))
        na = draw(st.one_of(st.none(), st.sampled_from([1.0, 2.0, 8.0])))
        pairs[stem] = random_pair(rng, m, n, r, network_alpha=na)
    return LoraAdapter(pairs, {})


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
