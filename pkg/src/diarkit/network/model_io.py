"""Binary model files.

Layout: magic ``XVEC``, u32 format version, a u64-length-prefixed canonical
text block describing the layer graph, then one u64-length-prefixed blob of
little-endian float64 values per parameter (and per batch-norm running
moment), in spec order. Shapes are implied by the graph, so blobs carry no
shape headers; save followed by load is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from .graph import (
    RBN_BUFFERS,
    LayerSpec,
    Network,
    NetworkSpec,
    layer_param_names,
    validate_spec,
)
from .layers import factor_contexts

MODEL_MAGIC = b"XVEC"
MODEL_FORMAT_VERSION = 1


def param_shapes(ls: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Expected array shape for every parameter of a layer, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if ls.kind == "tdnn":
        shapes["W"] = (ls.out_dim, ls.in_dim * len(ls.context))
        shapes["b"] = (ls.out_dim,)
    elif ls.kind == "factorized_tdnn":
        c1, c2 = factor_contexts(ls.context)
        shapes["M"] = (ls.inner_dim, ls.in_dim * len(c1))
        shapes["F"] = (ls.out_dim, ls.inner_dim * len(c2))
        shapes["b"] = (ls.out_dim,)
    elif ls.kind == "dense":
        shapes["W"] = (ls.out_dim, ls.in_dim)
        shapes["b"] = (ls.out_dim,)
    elif ls.kind == "relu_batchnorm":
        shapes["gamma"] = (ls.out_dim,)
        shapes["beta"] = (ls.out_dim,)
    if ls.skip_from and ls.skip_mode == "concat":
        shapes["P"] = (ls.in_dim, 2 * ls.in_dim)
    return shapes


def _csv(items) -> str:
    return ",".join(str(i) for i in items) if items else "-"


def _uncsv(text: str) -> tuple[str, ...]:
    return () if text == "-" else tuple(text.split(","))


def spec_to_text(spec: NetworkSpec) -> str:
    lines = [
        f"embedding {spec.embedding_layer}",
        f"speakers {spec.num_speakers}",
        f"taps {_csv(spec.msa_taps)}",
    ]
    for ls in spec.layers:
        lines.append(
            f"layer {ls.name} {ls.kind} {ls.in_dim} {ls.out_dim} "
            f"{_csv(ls.context)} {ls.inner_dim} {_csv(ls.inputs)} "
            f"{ls.skip_from or '-'} {ls.skip_mode}"
        )
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> NetworkSpec:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 4:
        raise FormatError("model spec block is incomplete")
    header: dict[str, str] = {}
    layers: list[LayerSpec] = []
    for ln in lines:
        fields = ln.split(" ")
        try:
            if fields[0] == "layer":
                if len(fields) != 10:
                    raise ValueError("bad field count")
                layers.append(
                    LayerSpec(
                        name=fields[1],
                        kind=fields[2],
                        in_dim=int(fields[3]),
                        out_dim=int(fields[4]),
                        context=tuple(int(c) for c in _uncsv(fields[5])),
                        inner_dim=int(fields[6]),
                        inputs=_uncsv(fields[7]),
                        skip_from="" if fields[8] == "-" else fields[8],
                        skip_mode=fields[9],
                    )
                )
            elif fields[0] in ("embedding", "speakers", "taps") and len(fields) == 2:
                header[fields[0]] = fields[1]
            else:
                raise ValueError("unknown record")
        except ValueError as exc:
            raise FormatError(f"bad model spec line {ln!r}: {exc}") from None
    try:
        spec = NetworkSpec(
            layers=tuple(layers),
            embedding_layer=header["embedding"],
            num_speakers=int(header["speakers"]),
            msa_taps=_uncsv(header["taps"]),
        )
    except KeyError as exc:
        raise FormatError(f"model spec block is missing the {exc.args[0]} header") from None
    try:
        validate_spec(spec)
    except Exception as exc:
        raise FormatError(f"model spec block is not a valid network: {exc}") from None
    return spec


def _iter_blob_arrays(net: Network):
    """Every stored array in file order: params, then buffers, layer by layer."""
    for ls in net.spec.layers:
        for pname in layer_param_names(ls):
            yield ls.name, pname, net.params[ls.name][pname]
        if ls.kind == "relu_batchnorm":
            for bname in RBN_BUFFERS:
                yield ls.name, bname, net.buffers[ls.name][bname]


def save_network(net: Network, path) -> None:
    text = spec_to_text(net.spec).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for _, _, arr in _iter_blob_arrays(net):
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated model file ({what})")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported model format version {version}")
    (text_len,) = struct.unpack("<Q", take(8, "spec length"))
    try:
        text = take(text_len, "spec block").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: model spec block is not UTF-8") from None
    spec = spec_from_text(text)

    params: dict[str, dict[str, np.ndarray]] = {ls.name: {} for ls in spec.layers}
    buffers: dict[str, dict[str, np.ndarray]] = {}
    for ls in spec.layers:
        shapes = param_shapes(ls)
        targets = [(params[ls.name], n, shapes[n]) for n in layer_param_names(ls)]
        if ls.kind == "relu_batchnorm":
            buffers[ls.name] = {}
            targets += [(buffers[ls.name], n, (ls.out_dim,)) for n in RBN_BUFFERS]
        for store, aname, shape in targets:
            (blob_len,) = struct.unpack("<Q", take(8, f"{ls.name}.{aname} length"))
            expected = int(np.prod(shape)) * 8
            if blob_len != expected:
                raise FormatError(
                    f"{path}: {ls.name}.{aname} holds {blob_len} bytes, expected {expected}"
                )
            blob = take(blob_len, f"{ls.name}.{aname}")
            arr = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{path}: {ls.name}.{aname} contains non-finite values")
            store[aname] = arr
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after the last parameter")
    return Network(spec, params, buffers)
