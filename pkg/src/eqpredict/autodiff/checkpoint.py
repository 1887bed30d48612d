"""Plain-text checkpoint container.

Layout (one record per line, fields separated by single spaces)::

    eqpredict-checkpoint
    format_version 1
    meta <key> <value>                      # sorted by key; value may contain spaces
    param <path> <shape> <v0> <v1> ...      # sorted by path
    adam_step <path> <int>
    adam_m <path> <shape> <v0> ...
    adam_v <path> <shape> <v0> ...

``<shape>`` is extents joined by ``x`` (``-`` for a 0-d tensor). Values are
written with ``repr(float)``, which round-trips float64 exactly, so
``load(save(x))`` is value-identical and save/load/save is byte-identical.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .optim import AdamState, ParameterStore

MAGIC = "eqpredict-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _shape_str(shape: Tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def _array_fields(arr: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in arr.ravel())


def dumps(store: ParameterStore, meta: Dict[str, str]) -> str:
    lines = [MAGIC, f"format_version {FORMAT_VERSION}"]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or " " in key:
            raise CheckpointError(f"meta entry {key!r} is not single-line")
        lines.append(f"meta {key} {value}")
    for path, t in store.items():
        lines.append(f"param {path} {_shape_str(t.shape)} {_array_fields(t.data)}".rstrip())
    for path in sorted(store.adam):
        st = store.adam[path]
        lines.append(f"adam_step {path} {st.step}")
        lines.append(f"adam_m {path} {_shape_str(st.m.shape)} {_array_fields(st.m)}".rstrip())
        lines.append(f"adam_v {path} {_shape_str(st.v.shape)} {_array_fields(st.v)}".rstrip())
    return "\n".join(lines) + "\n"


def loads(text: str) -> Tuple[Dict[str, np.ndarray], Dict[str, AdamState], Dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if len(lines) < 2 or lines[1] != f"format_version {FORMAT_VERSION}":
        raise CheckpointError(f"unsupported checkpoint version line: {lines[1] if len(lines) > 1 else ''!r}")
    params: Dict[str, np.ndarray] = {}
    moments: Dict[str, Dict[str, object]] = {}
    meta: Dict[str, str] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        kind, _, rest = line.partition(" ")
        try:
            if kind == "meta":
                key, _, value = rest.partition(" ")
                meta[key] = value
            elif kind == "adam_step":
                path, step = rest.split(" ")
                moments.setdefault(path, {})["step"] = int(step)
            elif kind in ("param", "adam_m", "adam_v"):
                fields = rest.split(" ")
                path, shape = fields[0], _parse_shape(fields[1])
                values = np.array([float(v) for v in fields[2:]], dtype=np.float64)
                arr = values.reshape(shape)
                if kind == "param":
                    params[path] = arr
                else:
                    moments.setdefault(path, {})[kind[-1]] = arr
            else:
                raise CheckpointError(f"unknown record {kind!r}")
        except (ValueError, IndexError) as exc:
            raise CheckpointError(f"line {lineno}: {exc}") from exc
    adam = {}
    for path, parts in moments.items():
        if set(parts) != {"step", "m", "v"}:
            raise CheckpointError(f"incomplete optimizer state for {path!r}")
        adam[path] = AdamState(parts["m"], parts["v"], parts["step"])
    return params, adam, meta


def save(path: Union[str, Path], store: ParameterStore, meta: Dict[str, str]) -> None:
    """Write via a temporary file and rename, so a crash never leaves a torn checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(store, meta))
    os.replace(tmp, path)


def load_into(store: ParameterStore, params: Dict[str, np.ndarray], adam: Dict[str, AdamState]) -> None:
    """Copy loaded values into an already-built store with matching layout."""
    missing = set(store.paths()) ^ set(params)
    if missing:
        raise CheckpointError(f"parameter layout mismatch: {sorted(missing)[:5]}")
    for path, t in store.items():
        if params[path].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {path}: {params[path].shape} vs {t.shape}")
        t.data = params[path].copy()
        t.grad = None
    store.adam = {p: AdamState(s.m.copy(), s.v.copy(), s.step) for p, s in adam.items()}


def read(path: Union[str, Path]):
    return loads(Path(path).read_text())
