"""``blora`` command line.

Exit codes: 0 success, 1 usage error, 2 unreadable or malformed input,
3 invariant violation. Failures print one line ``error: <code>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .adapter import (
    ROLES,
    LoraAdapter,
    adapter_digest,
    as_blora,
    combine_adapters,
    combine_bloras,
    extract_blocks,
    extract_blora,
    load_adapter,
    merge_adapter,
    save_adapter,
    scale_adapter,
)
from .analysis import (
    PROBE_BLOCKS,
    EvalReport,
    StubEmbedder,
    copy_block_fixture,
    eval_similarity,
    load_embeddings,
    probe_blocks,
    prompt_pairs,
)
from .checkpoint import TensorFile, read_file, serialize, write_file
from .errors import BLoraError, FormatError, InvariantError, UsageError
from .topology import BlockId, address_of, keymap_document, parse_block
from .toynet import SyntheticSample, ToyConfig, ToyModel, TrainSpec, make_sample, pair_grid, train_blora
from .toynet.train import DEFAULT_LEARNING_RATE, DEFAULT_STEPS, TOY_RANK

MANIFEST_KEY = "blora.manifest"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    # given once on the top-level parser and once per subcommand, so the flags
    # work before or after the command name
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for every random stream (default 0)")
    p.add_argument("--json", action="store_true", default=d(False), help="print a JSON document")
    p.add_argument("--out", default=d(None), help="output file")


def _blocks_arg(text: str) -> list[BlockId]:
    blocks = [parse_block(t) for t in text.split(",") if t.strip()]
    if not blocks:
        raise UsageError("no block given")
    if len(set(blocks)) != len(blocks):
        raise UsageError(f"repeated block in {text!r}")
    return sorted(blocks)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blora", description="Block-wise LoRA tooling for the SDXL UNet layout.")
    parser.add_argument("--version", action="version", version=f"blora {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        _global_flags(p, suppress=True)
        return p

    p = cmd("inspect", "per-block tensor counts, ranks, dtypes and metadata of a file")
    p.add_argument("file")

    cmd("keymap", "the block to module mapping table")

    p = cmd("extract", "keep only the given blocks of an adapter")
    p.add_argument("file")
    p.add_argument("--block", required=True, help="W0..W7, a module path, or a comma list such as W4,W5")
    p.add_argument("--role", choices=ROLES, help="tag a single-block extract as a content or style B-LoRA")

    p = cmd("combine", "union of a content and a style adapter; overlapping stems are refused")
    p.add_argument("content")
    p.add_argument("style")

    p = cmd("scale", "multiply an adapter's strength")
    p.add_argument("file")
    p.add_argument("--alpha", type=float, required=True)

    p = cmd("merge", "fold an adapter into dense base weights")
    p.add_argument("base")
    p.add_argument("adapter")
    p.add_argument("--alpha", type=float, default=1.0)

    def training_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
        p.add_argument("--lr", type=float, default=DEFAULT_LEARNING_RATE)
        p.add_argument("--rank", type=int, default=TOY_RANK)
        p.add_argument("--sample-seed", type=int, default=0)
        p.add_argument("--content-label", type=int, default=0)
        p.add_argument("--style-label", type=int, default=0)

    p = cmd("train-toy", "train an adapter on the toy network from one synthetic sample")
    p.add_argument("--blocks", default="W4,W5")
    training_flags(p)
    p.add_argument("--save-base", help="also write the toy base weights here")

    p = cmd("probe", "prompt-injection attribution over blocks W1..W6")
    p.add_argument("--pairs", type=int, default=400, help="prompt pairs per family (default 400)")
    p.add_argument("--base", help="toy base file written by train-toy --save-base")
    p.add_argument("--fixture-block", type=int, choices=PROBE_BLOCKS,
                   help="hand-wire the model so this block alone writes the output")

    p = cmd("eval", "style/content cosine scores from an embedding file")
    p.add_argument("embeddings", help="vectors named <id>/output, <id>/style, <id>/content")

    p = cmd("pair-grid", "final training loss for every pair of blocks")
    training_flags(p)
    return parser


# --- helpers -------------------------------------------------------------------

def _read(path: str) -> TensorFile:
    return read_file(path)


def _file_digest(tf: TensorFile) -> str:
    return hashlib.sha256(serialize(tf)).hexdigest()


def _manifest(command: str, args: argparse.Namespace, inputs: dict[str, str], flags: Sequence[str]) -> str:
    doc = {
        "tool": "blora",
        "version": __version__,
        "command": command,
        "seed": args.seed,
        "flags": {f: getattr(args, f) for f in flags},
        "inputs": inputs,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _with_manifest(adapter: LoraAdapter, manifest: str) -> LoraAdapter:
    return LoraAdapter(adapter.pairs, {**adapter.metadata, MANIFEST_KEY: manifest})


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} writes a file: pass --out PATH")
    return Path(args.out)


def _write(args, tf: TensorFile) -> dict:
    path = _require_out(args)
    data = serialize(tf)
    write_file(path, tf)
    return {"command": args.command, "out": str(path), "tensor_count": len(tf.entries),
            "sha256": hashlib.sha256(data).hexdigest(), "metadata": dict(tf.metadata)}


def _emit(args, doc: dict, text: str | None = None, *, to_file: bool = False) -> None:
    body = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if to_file and args.out:
        Path(args.out).write_text(body, encoding="utf-8")
        return
    sys.stdout.write(body if args.json or text is None else text)


def _load_adapter_file(path: str) -> tuple[LoraAdapter, str]:
    adapter = load_adapter(_read(path))
    return adapter, adapter_digest(adapter)


# --- commands --------------------------------------------------------------

def _stem_of(name: str) -> str:
    for suffix in (".lora.up.weight", ".lora.down.weight", ".lora_up.weight", ".lora_down.weight",
                   ".lora_B.weight", ".lora_A.weight", ".alpha", ".weight"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def cmd_inspect(args) -> int:
    tf = _read(args.file)
    try:
        adapter = load_adapter(tf)
    except FormatError:
        adapter = None
    blocks = {str(b): {"tensors": 0, "layers": 0, "ranks": [], "dtypes": []} for b in BlockId}
    layers: dict[str, set] = {str(b): set() for b in BlockId}
    stray = set()
    for name, entry in tf.entries.items():
        addr = address_of(_stem_of(name))
        if addr is None:
            stray.add(name)
            continue
        row = blocks[str(addr.block)]
        row["tensors"] += 1
        layers[str(addr.block)].add(addr.layer)
        if entry.dtype not in row["dtypes"]:
            row["dtypes"].append(entry.dtype)
    if adapter is not None:
        for stem, pair in adapter.pairs.items():
            addr = address_of(stem)
            if addr is not None:
                ranks = blocks[str(addr.block)]["ranks"]
                if pair.rank not in ranks:
                    ranks.append(pair.rank)
    for b, row in blocks.items():
        row["layers"] = len(layers[b])
        row["ranks"].sort()
        row["dtypes"].sort()
    doc = {
        "command": "inspect",
        "kind": "adapter" if adapter is not None else "weights",
        "tensor_count": len(tf.entries),
        "blocks": blocks,
        "out_of_topology": sorted(stray),
        "metadata": dict(tf.metadata),
    }
    lines = [f"{args.file}: {doc['kind']}, {len(tf.entries)} tensors"]
    for b, row in blocks.items():
        if row["tensors"]:
            ranks = ",".join(map(str, row["ranks"])) or "-"
            lines.append(f"  {b}: {row['tensors']} tensors, {row['layers']} layers, "
                         f"rank {ranks}, {','.join(row['dtypes'])}")
    if stray:
        lines.append(f"  out of topology: {len(stray)} tensors (e.g. {min(stray)})")
    for k, v in sorted(tf.metadata.items()):
        lines.append(f"  {k} = {v}")
    _emit(args, doc, "\n".join(lines) + "\n")
    return 0


def cmd_keymap(args) -> int:
    doc = keymap_document()
    lines = []
    for b in doc["blocks"]:
        lines.append(f"{b['block']}  {b['layer_count']:2d} layers  {', '.join(b['modules'])}")
    lines.append(f"total {doc['total_layers']} layers, {doc['total_stems']} projection stems")
    _emit(args, doc, "\n".join(lines) + "\n", to_file=True)
    return 0


def cmd_extract(args) -> int:
    blocks = _blocks_arg(args.block)
    adapter, digest = _load_adapter_file(args.file)
    if len(blocks) == 1 and args.role:
        out = extract_blora(adapter, blocks[0], args.role)
    elif args.role:
        raise UsageError("--role tags a single-block extract; drop it or pass one block")
    else:
        out = extract_blocks(adapter, blocks)
        if not out.pairs:
            raise InvariantError(f"adapter has no stems in {args.block}", code="empty-block")
    manifest = _manifest("extract", args, {"adapter": digest}, ["block", "role"])
    summary = _write(args, save_adapter(_with_manifest(out, manifest)))
    summary["source_tensor_count"] = adapter.tensor_count
    _emit(args, summary, f"wrote {summary['tensor_count']} of {adapter.tensor_count} tensors to {args.out}\n")
    return 0


def cmd_combine(args) -> int:
    content, c_digest = _load_adapter_file(args.content)
    style, s_digest = _load_adapter_file(args.style)
    bc, bs = as_blora(content), as_blora(style)
    if bc is not None and bs is not None:
        out = combine_bloras(bc, bs)
    else:
        out = combine_adapters(content, style)
    manifest = _manifest("combine", args, {"content": c_digest, "style": s_digest}, [])
    summary = _write(args, save_adapter(_with_manifest(out, manifest)))
    _emit(args, summary, f"wrote {summary['tensor_count']} tensors to {args.out}\n")
    return 0


def cmd_scale(args) -> int:
    adapter, digest = _load_adapter_file(args.file)
    out = scale_adapter(adapter, args.alpha)
    manifest = _manifest("scale", args, {"adapter": digest}, ["alpha"])
    summary = _write(args, save_adapter(_with_manifest(out, manifest)))
    _emit(args, summary, f"wrote adapter scaled by {args.alpha} to {args.out}\n")
    return 0


def cmd_merge(args) -> int:
    base_tf = _read(args.base)
    adapter, digest = _load_adapter_file(args.adapter)
    base = base_tf.tensors()
    merged = merge_adapter(base, adapter, args.alpha)
    # merged tensors keep the dtype of the base file
    out = {k: (t if t.dtype == base[k].dtype else t.to(base[k].dtype)) for k, t in merged.items()}
    manifest = _manifest("merge", args, {"base": _file_digest(base_tf), "adapter": digest}, ["alpha"])
    meta = {k: v for k, v in base_tf.metadata.items() if k != MANIFEST_KEY}
    meta[MANIFEST_KEY] = manifest
    summary = _write(args, TensorFile.from_tensors(out, meta))
    summary["merged_count"] = len(adapter.pairs)
    _emit(args, summary, f"merged {len(adapter.pairs)} projections into {args.out}\n")
    return 0


def _toy_setup(args, blocks) -> tuple[ToyConfig, TrainSpec, SyntheticSample]:
    config = ToyConfig(seed=args.seed)
    sample = make_sample(args.content_label, args.style_label, token_dim=config.token_dim, seed=args.sample_seed)
    spec = TrainSpec(steps=args.steps, learning_rate=args.lr, rank=args.rank, blocks_to_train=frozenset(blocks),
                     noise_seed=args.seed, init_seed=args.seed)
    return config, spec, sample


def cmd_train_toy(args) -> int:
    blocks = _blocks_arg(args.blocks)
    out_path = _require_out(args)
    config, spec, sample = _toy_setup(args, blocks)
    model = ToyModel.build(config)
    result = train_blora(config, sample, spec, model)
    flags = ["blocks", "steps", "lr", "rank", "sample_seed", "content_label", "style_label"]
    args.blocks = ",".join(str(b) for b in blocks)
    manifest = _manifest("train-toy", args, {}, flags)
    tf = save_adapter(_with_manifest(result.adapter, manifest))
    summary = _write(args, tf)
    if args.save_base:
        write_file(args.save_base, model.to_file())
    summary.update(initial_loss=result.initial_loss, final_loss=result.final_loss, steps=spec.steps)
    _emit(args, summary, f"loss {result.initial_loss:.6g} -> {result.final_loss:.6g}; wrote {out_path}\n")
    return 0


def cmd_probe(args) -> int:
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    model = ToyModel.from_file(_read(args.base)) if args.base else ToyModel.build(ToyConfig(seed=args.seed))
    if args.fixture_block is not None:
        model = copy_block_fixture(model, args.fixture_block)
    embedder = StubEmbedder(seed=model.config.vocab_seed, dim=model.config.prompt_dim)
    report = probe_blocks(model, prompt_pairs(args.pairs, "content", args.seed),
                          prompt_pairs(args.pairs, "style", args.seed), embedder)
    _emit(args, report.to_json(), to_file=True)
    return 0


def cmd_eval(args) -> int:
    embedder = load_embeddings(_read(args.embeddings))
    ids = sorted({k.rsplit("/", 1)[0] for k in embedder.vectors if "/" in k})
    if not ids:
        raise FormatError("no <id>/output vectors in the embedding file", code="missing-label")
    entries = [eval_similarity(embedder.embed_text(f"{i}/output"), embedder.embed_text(f"{i}/style"),
                               embedder.embed_text(f"{i}/content")) for i in ids]
    _emit(args, EvalReport.from_entries(entries).to_json(), to_file=True)
    return 0


def cmd_pair_grid(args) -> int:
    # the grid sets the trained pair per cell
    config, spec, sample = _toy_setup(args, [BlockId.W0])
    table = pair_grid(config, sample, spec)
    doc = {"command": "pair-grid", "blocks": [str(b) for b in BlockId], "steps": spec.steps,
           "learning_rate": spec.learning_rate, "rank": spec.rank,
           "final_loss": [[float(x) for x in row] for row in table]}
    _emit(args, doc, to_file=True)
    return 0


COMMANDS = {
    "inspect": cmd_inspect, "keymap": cmd_keymap, "extract": cmd_extract, "combine": cmd_combine,
    "scale": cmd_scale, "merge": cmd_merge, "train-toy": cmd_train_toy, "probe": cmd_probe,
    "eval": cmd_eval, "pair-grid": cmd_pair_grid,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return 1
    if isinstance(exc, (FormatError, OSError)):
        return 2
    return 3


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (BLoraError, OSError) as exc:
        code = getattr(exc, "code", None) if isinstance(exc, BLoraError) else "io"
        msg = str(exc).replace("\n", " ")
        print(f"error: {code}: {msg}", file=sys.stderr)
        return exit_code(exc)


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s", stream=sys.stderr)
    sys.exit(run())
