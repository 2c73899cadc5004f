"""Checkpoint file: a text manifest followed by one raw parameter blob.

Layout (single file, written atomically via temp + rename):

    csasr-checkpoint-v1
    config.<field> = <repr>          # every ModelConfig field
    tokens.lang0 = <json list>       # output-head token tables
    tokens.lang1 = <json list>
    meta.<key> = <repr>              # free-form training metadata
    param <path> <shape> <offset> <numel>
    ...
    %%BLOB <total_bytes>
    <raw little-endian float64 values, parameters in sorted path order>

Loading validates every declared shape against the blob and fails on any
missing or truncated entry.
"""

from __future__ import annotations

import ast
import json
import os
from dataclasses import dataclass

import numpy as np

from csasr.autograd import ParamSet, Tensor
from csasr.backbone import ModelConfig

__all__ = ["Checkpoint", "CheckpointFormatError", "save_checkpoint", "load_checkpoint"]

_MAGIC = "csasr-checkpoint-v1"


class CheckpointFormatError(Exception):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    table0: list[str]
    table1: list[str]
    meta: dict


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    return tuple(int(s) for s in text.split("x"))


def save_checkpoint(path: str, config: ModelConfig, params: ParamSet,
                    table0: list[str], table1: list[str],
                    meta: dict | None = None) -> None:
    lines = [_MAGIC]
    for key, value in sorted(config.to_dict().items()):
        lines.append(f"config.{key} = {value!r}")
    lines.append(f"tokens.lang0 = {json.dumps(table0, ensure_ascii=True)}")
    lines.append(f"tokens.lang1 = {json.dumps(table1, ensure_ascii=True)}")
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key} = {value!r}")
    blob_parts = []
    offset = 0
    for p, tensor in params.items():  # sorted path order
        arr = tensor.data
        lines.append(f"param {p} {_shape_str(arr.shape)} {offset} {arr.size}")
        blob_parts.append(arr.astype("<f8").tobytes())
        offset += arr.size * 8
    lines.append(f"%%BLOB {offset}")
    payload = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(blob_parts)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str, trainable: bool = True) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\n%%BLOB "
    cut = raw.find(marker)
    if not raw.startswith(_MAGIC.encode()) or cut < 0:
        raise CheckpointFormatError(f"{path}: not a {_MAGIC} file")
    newline = raw.index(b"\n", cut + 1)
    header = raw[:newline].decode("utf-8").splitlines()
    blob = raw[newline + 1:]
    declared = int(header[-1].split(" ")[1])
    if len(blob) != declared:
        raise CheckpointFormatError(
            f"{path}: blob is {len(blob)} bytes, manifest declares {declared}"
        )

    config_kwargs: dict = {}
    tables: dict[str, list[str]] = {}
    meta: dict = {}
    entries: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in header[1:-1]:
        if line.startswith("config."):
            key, _, value = line.partition(" = ")
            config_kwargs[key[len("config."):]] = ast.literal_eval(value)
        elif line.startswith("tokens."):
            key, _, value = line.partition(" = ")
            tables[key[len("tokens."):]] = json.loads(value)
        elif line.startswith("meta."):
            key, _, value = line.partition(" = ")
            meta[key[len("meta."):]] = ast.literal_eval(value)
        elif line.startswith("param "):
            _, p, shape, offset, numel = line.split(" ")
            entries.append((p, _parse_shape(shape), int(offset), int(numel)))
        else:
            raise CheckpointFormatError(f"{path}: unrecognized manifest line {line!r}")
    if "lang0" not in tables or "lang1" not in tables:
        raise CheckpointFormatError(f"{path}: missing token tables")
    if not entries:
        raise CheckpointFormatError(f"{path}: no parameters declared")

    config = ModelConfig(**config_kwargs)
    params = ParamSet()
    for p, shape, offset, numel in entries:
        expected = int(np.prod(shape)) if shape else 1
        if numel != expected:
            raise CheckpointFormatError(
                f"{path}: parameter {p} declares numel {numel} but shape {shape}"
            )
        if offset + numel * 8 > len(blob):
            raise CheckpointFormatError(f"{path}: parameter {p} overruns the blob")
        arr = np.frombuffer(blob, dtype="<f8", count=numel, offset=offset)
        params.add(p, Tensor(arr.reshape(shape).copy(), requires_grad=trainable))
    return Checkpoint(config, params, tables["lang0"], tables["lang1"], meta)
