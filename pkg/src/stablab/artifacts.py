"""Run output directory: text artifacts, plot-ready tables and the manifest."""
from __future__ import annotations

import hashlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .fem import Field
from .levelset import PoincareBreakdown
from .stability import StabilityReport

__all__ = ["ArtifactDir", "emit_plot_data", "write_manifest"]


def _num(v) -> str:
    return repr(float(v))


def emit_plot_data(obj, path) -> Path:
    """Write a Field, StabilityReport or list of PoincareBreakdowns as columns.

    Fields become ``node x y value`` rows in node order; a StabilityReport is a
    two-line block (sorted keys, then values); breakdowns get one row each.
    """
    path = Path(path)
    if isinstance(obj, Field):
        lines = ["# node[-] x[length] y[length] value[1]"]
        x, y = obj.mesh.nodes.T
        lines += [f"{i} {_num(x[i])} {_num(y[i])} {_num(v)}" for i, v in enumerate(obj.values)]
    elif isinstance(obj, StabilityReport):
        d = obj.as_dict()
        keys = sorted(d)
        lines = ["# " + " ".join(keys),
                 " ".join(_num(d[k]) if isinstance(d[k], float) else str(d[k]) for k in keys)]
    elif isinstance(obj, (list, tuple)) and all(isinstance(b, PoincareBreakdown) for b in obj):
        lines = ["# " + " ".join(f"{c}[1]" for c in PoincareBreakdown.COLUMNS)]
        lines += [" ".join(_num(v) for v in b.as_row()) for b in obj]
    else:
        raise TypeError(f"cannot emit plot data for {type(obj).__name__}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write plot data to {path}: {exc}") from exc
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory, names) -> Path:
    """``MANIFEST`` with one ``sha256  name`` line per file and a timestamp line."""
    directory = Path(directory)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    lines = [f"# generated {stamp}"]
    lines += [f"{_sha256(directory / n)}  {n}" for n in sorted(names)]
    out = directory / "MANIFEST"
    out.write_text("\n".join(lines) + "\n")
    return out


class ArtifactDir:
    """Output directory of one run; remembers every file written."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.names = []

    def _track(self, name: str) -> Path:
        if name not in self.names:
            self.names.append(name)
        return self.path / name

    def text(self, name: str, text: str) -> Path:
        p = self._track(name)
        p.write_text(text)
        return p

    def csv(self, name: str, header: str, rows) -> Path:
        lines = [header] + [",".join(_cell(v) for v in r) for r in rows]
        return self.text(name, "\n".join(lines) + "\n")

    def plot(self, name: str, obj) -> Path:
        return emit_plot_data(obj, self._track(name))

    def manifest(self) -> Path:
        return write_manifest(self.path, self.names)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)
