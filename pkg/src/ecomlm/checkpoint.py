"""Checkpoint directories: a plain-text manifest plus raw little-endian f64 files.

Layout::

    manifest.txt        # sections [config], [params], [state]
    <param>.bin         # value
    <param>.m.bin       # Adam first moment
    <param>.v.bin       # Adam second moment

``[params]`` lines are ``name<TAB>shape<TAB>f64<TAB>file`` with the shape
written as comma-separated sizes (empty for a scalar).  ``[state]`` values
are JSON.
"""

from __future__ import annotations

import json
import os
import re

import numpy as np

from .fileio import DataError, atomic_directory
from .tensorcore import ParamEntry, ParameterSet

MANIFEST = "manifest.txt"
FORMAT_VERSION = "1"


def _fname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_checkpoint(path, params: ParameterSet, config: dict, state: dict | None = None,
                    extra_files: dict[str, str] | None = None):
    state = state or {}
    with atomic_directory(path) as tmp:
        lines = ["# ecomlm checkpoint", f"format = {FORMAT_VERSION}", "[config]"]
        for key, value in config.items():
            lines.append(f"{key} = {value}")
        lines.append("[params]")
        for name, entry in params.items():
            base = _fname(name)
            shape = ",".join(str(s) for s in entry.value.shape)
            for suffix, arr in (("", entry.value), (".m", entry.m), (".v", entry.v)):
                fname = f"{base}{suffix}.bin"
                arr.astype("<f8").tofile(os.path.join(tmp, fname))
                lines.append(f"{name}{suffix}\t{shape}\tf64\t{fname}")
        lines.append("[state]")
        for key, value in state.items():
            lines.append(f"{key} = {json.dumps(value)}")
        with open(os.path.join(tmp, MANIFEST), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        for fname, text in (extra_files or {}).items():
            with open(os.path.join(tmp, fname), "w", encoding="utf-8") as fh:
                fh.write(text)


def load_checkpoint(path):
    """Return ``(params, config, state)``; config values are left as strings."""
    manifest = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest):
        raise DataError(f"not a checkpoint directory (missing {MANIFEST}): {path}")
    config: dict[str, str] = {}
    state: dict = {}
    arrays: dict[str, np.ndarray] = {}
    section = None
    with open(manifest, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                continue
            try:
                if section == "params":
                    name, shape_txt, dtype, fname = line.split("\t")
                    if dtype != "f64":
                        raise ValueError(f"unsupported dtype {dtype}")
                    shape = tuple(int(s) for s in shape_txt.split(",") if s)
                    arr = np.fromfile(os.path.join(path, fname), dtype="<f8")
                    arrays[name] = arr.astype(np.float64).reshape(shape)
                else:
                    key, _, value = line.partition(" = ")
                    if section == "config":
                        config[key] = value
                    elif section == "state":
                        state[key] = json.loads(value)
            except (ValueError, OSError) as exc:
                raise DataError(f"{manifest}:{lineno}: {exc}") from exc
    params = ParameterSet()
    for name, value in arrays.items():
        if name.endswith(".m") or name.endswith(".v"):
            continue
        m = arrays.get(name + ".m", np.zeros_like(value))
        v = arrays.get(name + ".v", np.zeros_like(value))
        params._entries[name] = ParamEntry(value, np.zeros_like(value), m, v)
    return params, config, state
