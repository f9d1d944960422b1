"""Generator checkpoints: a text header followed by a little-endian float64 payload.

Header layout (one item per line, terminated by ``END``)::

    SYMDRIFT-CKPT v1
    version 1
    seed <training seed>
    hidden_widths <w1,w2,...>
    embed_dim <d>
    classes <K>
    class <id> <t1,t2,...>          (K lines, table order)
    arrays <M>
    array <name> <d1,d2,...>         (M lines, payload order)
    payload <number of float64 values>
    END
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptCheckpointError
from .generator import GeneratorParams

CHECKPOINT_HEADER = "SYMDRIFT-CKPT v1"
FORMAT_VERSION = 1


def _join(values) -> str:
    return ",".join(str(int(v)) for v in values)


def save_checkpoint(params: GeneratorParams, path) -> None:
    arrays = params.arrays()
    lines = [
        CHECKPOINT_HEADER,
        f"version {FORMAT_VERSION}",
        f"seed {int(params.seed)}",
        f"hidden_widths {_join(params.hidden_widths)}",
        f"embed_dim {int(params.embed_dim)}",
        f"classes {len(params.class_types)}",
    ]
    for cid, types in params.class_types.items():
        lines.append(f"class {cid} {_join(types)}")
    lines.append(f"arrays {len(arrays)}")
    for name, a in arrays:
        lines.append(f"array {name} {_join(a.shape)}")
    total = sum(a.size for _, a in arrays)
    lines.append(f"payload {total}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    Path(path).write_bytes(header + payload)


def _ints(tok: str, what: str) -> tuple[int, ...]:
    if tok == "":
        return ()
    try:
        return tuple(int(t) for t in tok.split(","))
    except ValueError:
        raise CorruptCheckpointError(f"malformed {what}: {tok!r}") from None


class _Header:
    def __init__(self, lines: list[str]):
        self.lines = lines
        self.pos = 0

    def field(self, key: str) -> list[str]:
        if self.pos >= len(self.lines):
            raise CorruptCheckpointError(f"header ends before {key!r}")
        toks = self.lines[self.pos].split(" ")
        self.pos += 1
        if toks[0] != key:
            raise CorruptCheckpointError(f"header line {self.pos}: expected {key!r}, got {toks[0]!r}")
        return toks[1:]

    def one_int(self, key: str) -> int:
        toks = self.field(key)
        if len(toks) != 1:
            raise CorruptCheckpointError(f"header field {key!r} needs one value")
        return _ints(toks[0], key)[0]


def load_checkpoint(
    path,
    expect_hidden_widths: Sequence[int] | None = None,
    expect_embed_dim: int | None = None,
) -> GeneratorParams:
    """Read a checkpoint; optional expectations guard against loading a mismatched architecture."""
    raw = Path(path).read_bytes()
    marker = b"\nEND\n"
    end = raw.find(marker)
    if not raw.startswith(CHECKPOINT_HEADER.encode("ascii") + b"\n") or end < 0:
        raise CorruptCheckpointError(f"{path}: not a {CHECKPOINT_HEADER} file or header unterminated")
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError:
        raise CorruptCheckpointError("header is not ASCII text") from None
    payload = raw[end + len(marker) :]
    hdr = _Header(text.split("\n")[1:])
    version = hdr.one_int("version")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    seed = hdr.one_int("seed")
    toks = hdr.field("hidden_widths")
    hidden = _ints(toks[0] if toks else "", "hidden_widths")
    embed_dim = hdr.one_int("embed_dim")
    n_classes = hdr.one_int("classes")
    class_types: dict[str, tuple[int, ...]] = {}
    for _ in range(n_classes):
        toks = hdr.field("class")
        if len(toks) != 2:
            raise CorruptCheckpointError("class line needs an id and a type list")
        class_types[toks[0]] = _ints(toks[1], "class types")
    n_arrays = hdr.one_int("arrays")
    shapes = []
    for _ in range(n_arrays):
        toks = hdr.field("array")
        if len(toks) != 2:
            raise CorruptCheckpointError("array line needs a name and a shape")
        shapes.append((toks[0], _ints(toks[1], "array shape")))
    total = hdr.one_int("payload")
    if hdr.pos != len(hdr.lines):
        raise CorruptCheckpointError("unexpected lines after the payload declaration")

    if expect_hidden_widths is not None and tuple(int(w) for w in expect_hidden_widths) != hidden:
        raise CorruptCheckpointError(
            f"checkpoint hidden widths {hidden} do not match the configured {tuple(expect_hidden_widths)}"
        )
    if expect_embed_dim is not None and int(expect_embed_dim) != embed_dim:
        raise CorruptCheckpointError(f"checkpoint embed_dim {embed_dim} does not match the configured {expect_embed_dim}")

    declared = sum(int(np.prod(s)) for _, s in shapes)
    if declared != total:
        raise CorruptCheckpointError(f"array shapes declare {declared} values but payload says {total}")
    if len(payload) != 8 * total:
        raise CorruptCheckpointError(f"payload has {len(payload)} bytes, header declares {8 * total}")

    # the expected layout follows from the architecture alone
    template = GeneratorParams(hidden, embed_dim, class_types, {}, {}, seed)
    expected = []
    for n in sorted({len(t) for t in class_types.values()}):
        dims = template.layer_dims(n)
        for li, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            expected.append((f"net{n}.W{li}", (a, b)))
            expected.append((f"net{n}.b{li}", (b,)))
    expected.extend((f"emb.{cid}", (embed_dim,)) for cid in class_types)
    if [(n, tuple(s)) for n, s in shapes] != expected:
        for (got_n, got_s), (exp_n, exp_s) in zip(shapes, expected):
            if (got_n, tuple(got_s)) != (exp_n, exp_s):
                raise CorruptCheckpointError(f"array {got_n} has shape {got_s}; architecture requires {exp_n} {exp_s}")
        raise CorruptCheckpointError(f"checkpoint lists {len(shapes)} arrays; architecture requires {len(expected)}")

    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise CorruptCheckpointError("payload contains non-finite parameters")
    off = 0
    arrays = {}
    for name, shape in shapes:
        size = int(np.prod(shape))
        arrays[name] = values[off : off + size].reshape(shape).copy()
        off += size
    networks = {}
    for n in sorted({len(t) for t in class_types.values()}):
        depth = len(template.layer_dims(n)) - 1
        networks[n] = [(arrays[f"net{n}.W{li}"], arrays[f"net{n}.b{li}"]) for li in range(depth)]
    embeddings = {cid: arrays[f"emb.{cid}"] for cid in class_types}
    return GeneratorParams(hidden, embed_dim, class_types, embeddings, networks, seed)
