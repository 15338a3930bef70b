"""Result files: CSV tables, JSON mirrors, and the run manifest.

Numbers are written with repr-exact formatting so identical runs give
byte-identical files.  Every table starts with a ``# manifest <hash>`` line
and every JSON file carries ``manifest_hash``.
"""
from __future__ import annotations

import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def manifest_hash(subcommand: str, config: Mapping, seed: int | None) -> str:
    payload = json.dumps({"subcommand": subcommand, "config": config, "seed": seed, "version": code_version()},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    return repr(x)


def write_csv(path, columns: Mapping[str, Sequence], digest: str) -> Path:
    path = Path(path)
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    n_rows = {len(a) for a in arrays}
    if len(n_rows) > 1:
        raise ValueError(f"columns have different lengths: {sorted(n_rows)}")
    lines = [f"# manifest {digest}", ",".join(names)]
    for row in zip(*arrays):
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> tuple[str, dict[str, np.ndarray]]:
    """Return (manifest hash, columns) of a file written by ``write_csv``."""
    lines = Path(path).read_text().splitlines()
    digest = lines[0].split()[-1]
    names = lines[1].split(",")
    rows = [list(map(float, ln.split(","))) for ln in lines[2:] if ln]
    data = np.array(rows).reshape(len(rows), len(names))
    return digest, {n: data[:, i] for i, n in enumerate(names)}


def _plain(x):
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()] if x.dtype != complex else [[v.real, v.imag] for v in x.ravel()]
    if isinstance(x, (np.floating, float)):
        return None if np.isnan(x) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def write_json(path, data: Mapping, digest: str) -> Path:
    path = Path(path)
    body = {"manifest_hash": digest, **_plain(dict(data))}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out_dir, subcommand: str, config: Mapping, seed: int | None, digest: str,
                   wall_time: float, files: Sequence[str], threads: int) -> Path:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": threads,
        "wall_time_s": round(float(wall_time), 3),
        "files": list(files),
    }
    return write_json(Path(out_dir) / "manifest.json", manifest, digest)
