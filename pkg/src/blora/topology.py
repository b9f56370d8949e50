"""SDXL attention-layer layout and the adapter-key <-> block mapping.

The 70 attention layers of the SDXL UNet are grouped into eight blocks
``W0..W7`` in forward-pass order::

    W0  down_blocks.1.attentions.{0,1}    2 x 2 layers
    W1  down_blocks.2.attentions.0        10 layers
    W2  down_blocks.2.attentions.1        10 layers
    W3  mid_block.attentions.0            10 layers
    W4  up_blocks.0.attentions.0          10 layers
    W5  up_blocks.0.attentions.1          10 layers
    W6  up_blocks.0.attentions.2          10 layers
    W7  up_blocks.1.attentions.{0,1,2}    3 x 2 layers

Each layer holds a self-attention (``attn1``) and a cross-attention
(``attn2``) with four adapted projections each. The table is data; if an
upstream revision renumbers modules, only ``BLOCK_MODULES`` changes.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .errors import UnrecognizedKeyError, UsageError


class BlockId(enum.IntEnum):
    W0 = 0
    W1 = 1
    W2 = 2
    W3 = 3
    W4 = 4
    W5 = 5
    W6 = 6
    W7 = 7

    def __str__(self) -> str:
        return self.name


# (module path, transformer blocks inside it), per block, forward order
BLOCK_MODULES: dict[BlockId, tuple[tuple[str, int], ...]] = {
    BlockId.W0: (("down_blocks.1.attentions.0", 2), ("down_blocks.1.attentions.1", 2)),
    BlockId.W1: (("down_blocks.2.attentions.0", 10),),
    BlockId.W2: (("down_blocks.2.attentions.1", 10),),
    BlockId.W3: (("mid_block.attentions.0", 10),),
    BlockId.W4: (("up_blocks.0.attentions.0", 10),),
    BlockId.W5: (("up_blocks.0.attentions.1", 10),),
    BlockId.W6: (("up_blocks.0.attentions.2", 10),),
    BlockId.W7: (("up_blocks.1.attentions.0", 2), ("up_blocks.1.attentions.1", 2),
                 ("up_blocks.1.attentions.2", 2)),
}

ATTENTION_KINDS = ("self", "cross")
PROJECTIONS = ("Q", "K", "V", "out")

_ATTN_NAME = {"self": "attn1", "cross": "attn2"}
_PROJ_NAME = {"Q": "to_q", "K": "to_k", "V": "to_v", "out": "to_out.0"}
_ATTN_KIND = {v: k for k, v in _ATTN_NAME.items()}
_PROJ_KIND = {v: k for k, v in _PROJ_NAME.items()}

SCHEMES = ("diffusers", "kohya")
DIFFUSERS_PREFIX = "unet."
KOHYA_PREFIX = "lora_unet_"

_DOT_RE = re.compile(
    r"^(?:unet\.)?(?P<module>(?:down_blocks|up_blocks)\.\d+\.attentions\.\d+|mid_block\.attentions\.\d+)"
    r"\.transformer_blocks\.(?P<tb>\d+)\.(?P<attn>attn[12])\.(?P<proj>to_q|to_k|to_v|to_out\.0)$"
)
_KOHYA_RE = re.compile(
    r"^lora_unet_(?P<module>(?:down_blocks|up_blocks)_\d+_attentions_\d+|mid_block_attentions_\d+)"
    r"_transformer_blocks_(?P<tb>\d+)_(?P<attn>attn[12])_(?P<proj>to_q|to_k|to_v|to_out_0)$"
)

# (module, transformer block) -> (block, layer index within block)
_LAYER_INDEX: dict[tuple[str, int], tuple[BlockId, int]] = {}
for _block, _mods in BLOCK_MODULES.items():
    _i = 0
    for _mod, _n in _mods:
        for _tb in range(_n):
            _LAYER_INDEX[(_mod, _tb)] = (_block, _i)
            _i += 1
_LAYER_SLOTS = {b: [k for k, v in sorted(_LAYER_INDEX.items(), key=lambda kv: kv[1][1]) if v[0] == b]
                for b in BlockId}


@dataclass(frozen=True, order=True)
class LayerAddress:
    block: BlockId
    layer: int
    attention_kind: str
    projection: str

    def __post_init__(self) -> None:
        if not 0 <= self.layer < layer_count(self.block):
            raise ValueError(f"{self.block} has {layer_count(self.block)} layers, not {self.layer + 1}")
        if self.attention_kind not in ATTENTION_KINDS or self.projection not in PROJECTIONS:
            raise ValueError(f"bad attention kind/projection: {self.attention_kind}/{self.projection}")


def layer_count(block: BlockId | int) -> int:
    return sum(n for _, n in BLOCK_MODULES[BlockId(block)])


def stem_for(addr: LayerAddress, scheme: str = "diffusers") -> str:
    module, tb = _LAYER_SLOTS[addr.block][addr.layer]
    dot = (f"{module}.transformer_blocks.{tb}."
           f"{_ATTN_NAME[addr.attention_kind]}.{_PROJ_NAME[addr.projection]}")
    if scheme == "diffusers":
        return DIFFUSERS_PREFIX + dot
    if scheme == "kohya":
        return KOHYA_PREFIX + dot.replace(".", "_")
    raise UsageError(f"unknown naming scheme {scheme!r}; expected one of {SCHEMES}")


def _match(key: str):
    m = _DOT_RE.match(key)
    if m:
        return m["module"], int(m["tb"]), m["attn"], m["proj"]
    m = _KOHYA_RE.match(key)
    if m:
        module = m["module"].replace("_blocks_", "_blocks.").replace("_attentions_", ".attentions.")
        return module, int(m["tb"]), m["attn"], m["proj"].replace("to_out_0", "to_out.0")
    return None


def address_of(key: str) -> LayerAddress | None:
    """Resolve an adapter key stem to its layer address.

    Returns ``None`` for keys outside the attention topology (text encoders,
    convolutions, ...). A key that has the shape of an SDXL attention key but
    names a module or layer the table does not contain is an error.
    """
    parts = _match(key)
    if parts is None:
        return None
    module, tb, attn, proj = parts
    try:
        block, layer = _LAYER_INDEX[(module, tb)]
    except KeyError:
        raise UnrecognizedKeyError(key) from None
    return LayerAddress(block, layer, _ATTN_KIND[attn], _PROJ_KIND[proj])


def block_of_key(key: str) -> BlockId:
    addr = address_of(key)
    if addr is None:
        raise UnrecognizedKeyError(key)
    return addr.block


def canonical_stem(key: str) -> str:
    """Dot-separated form of an in-topology stem; other keys pass through."""
    addr = address_of(key)
    return key if addr is None else stem_for(addr)


def addresses_of_block(block: BlockId | int) -> list[LayerAddress]:
    block = BlockId(block)
    return [LayerAddress(block, i, kind, proj)
            for i in range(layer_count(block))
            for kind in ATTENTION_KINDS
            for proj in PROJECTIONS]


def keys_of_block(block: BlockId | int, scheme: str = "diffusers") -> list[str]:
    return sorted(stem_for(a, scheme) for a in addresses_of_block(block))


def all_keys(scheme: str = "diffusers") -> list[str]:
    return [k for b in BlockId for k in keys_of_block(b, scheme)]


def parse_block(text: str | int) -> BlockId:
    """Accept ``W4``/``w4``/``4`` or a diffusers module path prefix."""
    if isinstance(text, int):
        return BlockId(text)
    s = text.strip()
    m = re.fullmatch(r"[Ww]?([0-7])", s)
    if m:
        return BlockId(int(m.group(1)))
    if s.startswith(DIFFUSERS_PREFIX):
        s = s[len(DIFFUSERS_PREFIX):]
    s = s.rstrip(".")
    owners = {b for b, mods in BLOCK_MODULES.items()
              for mod, _ in mods if mod == s or mod.startswith(s + ".")}
    if len(owners) == 1:
        return owners.pop()
    if not owners:
        raise UsageError(f"{text!r} names no block; use W0..W7 or a module path such as up_blocks.0.attentions.0")
    raise UsageError(f"{text!r} spans blocks {sorted(str(b) for b in owners)}; be more specific")


def keymap_document() -> dict:
    """The mapping table as a JSON-ready document (``blora keymap``)."""
    blocks = []
    for b in BlockId:
        layers = []
        for i, (module, tb) in enumerate(_LAYER_SLOTS[b]):
            layers.append({"layer": i, "module": module, "transformer_block": tb})
        blocks.append({
            "block": str(b),
            "index": int(b),
            "layer_count": layer_count(b),
            "modules": [m for m, _ in BLOCK_MODULES[b]],
            "layers": layers,
            "stem_count": len(addresses_of_block(b)),
        })
    return {
        "command": "keymap",
        "topology": "sdxl",
        "total_layers": sum(layer_count(b) for b in BlockId),
        "total_stems": sum(len(addresses_of_block(b)) for b in BlockId),
        "projections": {kind: [_ATTN_NAME[kind] + "." + _PROJ_NAME[p] for p in PROJECTIONS]
                        for kind in ATTENTION_KINDS},
        "blocks": blocks,
    }
