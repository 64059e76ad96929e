"""Bit-exact file formats for tensors, catalogues, and chains.

Tensor files ("PSVT"):

    bytes 0..3   magic b"PSVT"
    bytes 4..11  header byte count, unsigned 64-bit little-endian
    header       UTF-8 JSON: {"dtype": "f64"|"u32", "shape": [...], "order": "row-major"}
    payload      raw little-endian values, row-major

Catalogues are JSON documents with an embedded model-config block; chains are
a directory of one tensor file per parameter block plus a JSON index.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .types import Catalogue, InvariantError, ModelConfig

MAGIC = b"PSVT"

_DTYPES = {
    "f64": np.dtype("<f8"),
    "u32": np.dtype("<u4"),
}


class StorageError(Exception):
    """Base class for all file-format errors."""


class BadMagicError(StorageError):
    pass


class HeaderError(StorageError):
    pass


class UnknownDtypeError(StorageError):
    pass


class DegenerateShapeError(StorageError):
    pass


class TruncatedPayloadError(StorageError):
    pass


class SchemaError(StorageError):
    pass


class IncompleteChainError(StorageError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _validated_shape(shape) -> tuple[int, ...]:
    try:
        shape = tuple(int(n) for n in shape)
    except (TypeError, ValueError) as exc:
        raise DegenerateShapeError(f"invalid shape {shape!r}") from exc
    if not shape or any(n < 1 for n in shape):
        raise DegenerateShapeError(f"degenerate shape {shape}")
    return shape


def write_tensor(path, values, dtype: str, shape) -> None:
    if dtype not in _DTYPES:
        raise UnknownDtypeError(f"unknown dtype {dtype!r}")
    shape = _validated_shape(shape)
    arr = np.ascontiguousarray(np.asarray(values).reshape(shape), dtype=_DTYPES[dtype])
    header = json.dumps({"dtype": dtype, "shape": list(shape), "order": "row-major"})
    header_bytes = header.encode("utf-8")
    blob = MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + arr.tobytes(order="C")
    atomic_write_bytes(path, blob)


def read_tensor(path) -> tuple[np.ndarray, str, tuple[int, ...]]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad or missing magic")
    (header_len,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + header_len:
        raise TruncatedPayloadError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: unreadable header") from exc
    if not isinstance(header, dict) or set(header) != {"dtype", "shape", "order"}:
        raise HeaderError(f"{path}: malformed header keys")
    if header["order"] != "row-major":
        raise HeaderError(f"{path}: unsupported order {header['order']!r}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype {dtype!r}")
    shape = _validated_shape(header["shape"])
    np_dtype = _DTYPES[dtype]
    expected = np_dtype.itemsize * math.prod(shape)
    payload = data[12 + header_len:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return values, dtype, shape


def write_catalogue(path, catalogue: Catalogue, config: ModelConfig) -> None:
    catalogue.validate(config)
    doc = {
        "dim": config.dim,
        "num_sources": config.num_sources,
        "num_times": config.num_times,
        "positions": catalogue.positions.tolist(),
        "fluorescence": catalogue.fluorescence.tolist(),
        "momenta": catalogue.momenta.tolist(),
        "background": catalogue.background,
        "config": config.to_dict(),
    }
    atomic_write_text(path, json.dumps(doc, indent=2))


def read_catalogue(path) -> tuple[Catalogue, ModelConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: not a JSON catalogue") from exc
    required = {"dim", "num_sources", "num_times", "positions", "fluorescence",
                "momenta", "background", "config"}
    if not isinstance(doc, dict) or not required <= set(doc):
        raise SchemaError(f"{path}: missing catalogue keys")
    try:
        config = ModelConfig.from_dict(doc["config"])
    except (InvariantError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad config block: {exc}") from exc
    if (doc["dim"], doc["num_sources"], doc["num_times"]) != (
            config.dim, config.num_sources, config.num_times):
        raise SchemaError(f"{path}: top-level sizes disagree with config block")
    try:
        catalogue = Catalogue(
            positions=np.asarray(doc["positions"], dtype=float).reshape(
                config.num_sources, config.dim),
            fluorescence=np.asarray(doc["fluorescence"], dtype=float).reshape(
                config.num_sources, config.num_times),
            momenta=np.asarray(doc["momenta"], dtype=float).reshape(
                config.num_sources, config.num_times, config.dim),
            background=float(doc["background"]),
        )
        catalogue.validate(config)
    except (InvariantError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: invalid catalogue: {exc}") from exc
    return catalogue, config


_CHAIN_BLOCKS = ("positions", "fluorescence", "momenta", "background")


def write_chain(path, chain) -> None:
    """Store a chain as one tensor file per parameter block plus a JSON index."""
    from .sampler import Chain  # local import to avoid a module cycle

    assert isinstance(chain, Chain)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    cfg = chain.config
    n = len(chain.draws)
    if n == 0:
        raise InvariantError("refusing to store an empty chain")
    stacks = {
        "positions": np.stack([c.positions for c in chain.draws]),
        "fluorescence": np.stack([c.fluorescence for c in chain.draws]),
        "momenta": np.stack([c.momenta for c in chain.draws]),
        "background": np.array([c.background for c in chain.draws]),
    }
    for name, arr in stacks.items():
        if arr.size == 0:
            continue  # empty blocks (I = 0) are implied by the config
        write_tensor(out / f"{name}.psvt", arr, "f64", arr.shape)
    index = {
        "num_draws": n,
        "config": cfg.to_dict(),
        "seed": chain.seed,
        "divergences": chain.divergences,
        "energies": chain.energies.tolist(),
        "accept_flags": [bool(b) for b in chain.accept_flags],
        "accept_probs": chain.accept_probs.tolist(),
        "step_size_trace": chain.step_size_trace.tolist(),
        "mass_diag": chain.mass_diag.tolist(),
        "warmup_accept_probs": chain.warmup_accept_probs.tolist(),
    }
    atomic_write_text(out / "index.json", json.dumps(index))


def read_chain(path):
    from .sampler import Chain

    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise IncompleteChainError(f"{path}: missing index.json")
    try:
        index = json.loads(index_path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: unreadable chain index") from exc
    try:
        config = ModelConfig.from_dict(index["config"])
        n = int(index["num_draws"])
    except (KeyError, InvariantError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad chain index: {exc}") from exc
    i, t, d = config.num_sources, config.num_times, config.dim
    shapes = {
        "positions": (n, i, d),
        "fluorescence": (n, i, t),
        "momenta": (n, i, t, d),
        "background": (n,),
    }
    arrays = {}
    for name, shape in shapes.items():
        file = root / f"{name}.psvt"
        if math.prod(shape) == 0:
            arrays[name] = np.zeros(shape)
            continue
        if not file.exists():
            raise IncompleteChainError(f"{path}: missing {name}.psvt")
        values, dtype, got_shape = read_tensor(file)
        if got_shape != shape:
            raise SchemaError(f"{path}: {name} has shape {got_shape}, expected {shape}")
        arrays[name] = values
    draws = [
        Catalogue(
            positions=arrays["positions"][k],
            fluorescence=arrays["fluorescence"][k],
            momenta=arrays["momenta"][k],
            background=float(arrays["background"][k]),
        )
        for k in range(n)
    ]
    return Chain(
        config=config,
        draws=draws,
        energies=np.asarray(index["energies"], dtype=float),
        accept_flags=np.asarray(index["accept_flags"], dtype=bool),
        accept_probs=np.asarray(index["accept_probs"], dtype=float),
        step_size_trace=np.asarray(index["step_size_trace"], dtype=float),
        mass_diag=np.asarray(index["mass_diag"], dtype=float),
        seed=int(index["seed"]),
        divergences=int(index["divergences"]),
        warmup_accept_probs=np.asarray(index["warmup_accept_probs"], dtype=float),
    )
