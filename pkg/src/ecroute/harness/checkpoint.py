"""Checkpoint files: a text manifest plus one little-endian float64 blob.

Manifest grammar, one ``key: value`` pair per line, ``#`` starts a comment::

    format: ecroute-checkpoint/1
    blob: step_000100.bin
    dtype: float64-le
    config.<field>: <value>          # zero or more, ModelConfig fields
    tensor: <name> shape=<d0>x<d1>... offset=<bytes> nbytes=<bytes>

Tensor lines appear once per parameter, in blob order.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..dit.model import ModelConfig, param_shapes
from ..tensor import Tensor

FORMAT = "ecroute-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str):
    text = text.strip()
    if text.lower() == "none":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def save_checkpoint(params: dict[str, Tensor], path, cfg: ModelConfig | None = None) -> Path:
    """Write ``path`` (manifest) and its sibling ``.bin`` blob; returns the manifest path."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format: {FORMAT}", f"blob: {blob_path.name}", "dtype: float64-le"]
    if cfg is not None:
        lines += [f"config.{k}: {_fmt_value(v)}" for k, v in cfg.to_dict().items()]
    offset = 0
    chunks = []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        shape = "x".join(str(n) for n in t.shape) or "scalar"
        lines.append(f"tensor: {name} shape={shape} offset={offset} nbytes={len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    tmp = blob_path.with_suffix(".bin.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, blob_path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> tuple[dict[str, str], dict, list[tuple[str, tuple[int, ...], int, int]]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    header, config, tensors = {}, {}, []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise CheckpointError(f"{path}:{lineno}: expected 'key: value'")
        key, value = key.strip(), value.strip()
        if key == "tensor":
            parts = value.split()
            try:
                fields = dict(p.split("=", 1) for p in parts[1:])
                shape = () if fields["shape"] == "scalar" else tuple(int(n) for n in fields["shape"].split("x"))
                tensors.append((parts[0], shape, int(fields["offset"]), int(fields["nbytes"])))
            except (KeyError, ValueError, IndexError):
                raise CheckpointError(f"{path}:{lineno}: malformed tensor entry") from None
        elif key.startswith("config."):
            config[key[len("config."):]] = parse_value(value)
        else:
            header[key] = value
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
    return header, config, tensors


def config_from_manifest(path) -> ModelConfig:
    _, config, _ = read_manifest(path)
    if not config:
        raise CheckpointError(f"{path}: manifest carries no model config")
    try:
        return ModelConfig(**config)
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: invalid stored config: {err}") from None


def validate_shapes(tensors: dict[str, tuple[int, ...]], cfg: ModelConfig) -> list[str]:
    expected = param_shapes(cfg)
    problems = []
    for name, shape in expected.items():
        if name not in tensors:
            problems.append(f"{name}: missing (expected shape {shape})")
        elif tensors[name] != shape:
            problems.append(f"{name}: shape {tensors[name]} but config expects {shape}")
    problems += [f"{name}: not part of the config" for name in tensors if name not in expected]
    return problems


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[dict[str, Tensor], ModelConfig | None]:
    """Read a checkpoint, validating tensor shapes against ``cfg`` (or the stored config)."""
    path = Path(path)
    header, config, entries = read_manifest(path)
    names = [e[0] for e in entries]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise CheckpointError(f"{path}: tensors listed more than once: {', '.join(dupes)}")
    if cfg is None and config:
        cfg = config_from_manifest(path)
    if cfg is not None:
        problems = validate_shapes({n: s for n, s, _, _ in entries}, cfg)
        if problems:
            raise CheckpointError(f"{path}: checkpoint does not match config:\n  " + "\n  ".join(problems))
    blob = (path.parent / header.get("blob", path.with_suffix(".bin").name)).read_bytes()
    params = {}
    for name, shape, offset, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if nbytes != 8 * count or offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {name} has inconsistent size or offset")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params, cfg
