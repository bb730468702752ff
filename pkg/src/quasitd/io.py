"""Text formats for meshes, fields, CSV tables, VTK exports and manifests.

Every float is written with 17 significant digits (``%.17g``), which
round-trips finite doubles exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .mesh import TAG_CODES, TAG_NAMES, Mesh


def fmt(x) -> str:
    """17-significant-digit text for numbers, plain ``str`` otherwise; ``None`` is ``nan``."""
    if x is None:
        return "nan"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.17g" % x
    return str(x)


def _write_text(path, text: str) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------


def format_mesh(mesh: Mesh) -> str:
    out = ["mesh2d v1", f"vertices {mesh.num_vertices}"]
    for (x, y), b in zip(mesh.vertices, mesh.boundary_vertex):
        out.append(f"{fmt(x)} {fmt(y)} {int(b)}")
    out.append(f"triangles {mesh.num_triangles}")
    for (i, j, k), t in zip(mesh.triangles, mesh.region_tag):
        out.append(f"{i} {j} {k} {TAG_NAMES[t]}")
    return "\n".join(out) + "\n"


def write_mesh(mesh: Mesh, path) -> Path:
    return _write_text(path, format_mesh(mesh))


class _Lines:
    def __init__(self, text: str, source):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.source = source

    def next(self, what: str) -> tuple[int, str]:
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {what}", line=self.pos + 1, source=self.source)
        self.pos += 1
        return self.pos, self.lines[self.pos - 1]

    def error(self, line, msg, column=None):
        return ParseError(msg, line=line, column=column, source=self.source)

    def finish(self):
        if self.pos != len(self.lines):
            raise ParseError("trailing content after the last record", line=self.pos + 1, source=self.source)


def _tokens(lines: _Lines, ln: int, text: str, n: int):
    if text != text.strip() or "  " in text or "\t" in text:
        raise lines.error(ln, "records must be single-space separated without padding", 1)
    parts = text.split(" ")
    if len(parts) != n:
        raise lines.error(ln, f"expected {n} fields, found {len(parts)}", 1)
    return parts


def _column(text: str, index: int) -> int:
    return sum(len(p) + 1 for p in text.split(" ")[:index]) + 1


def _count(lines: _Lines, keyword: str) -> int:
    ln, text = lines.next(f"'{keyword} N'")
    parts = text.split(" ")
    if len(parts) != 2 or parts[0] != keyword or not parts[1].isdigit():
        raise lines.error(ln, f"expected '{keyword} N', found {text!r}", 1)
    return int(parts[1])


def _float(lines, ln, text, parts, i) -> float:
    try:
        v = float(parts[i])
    except ValueError:
        raise lines.error(ln, f"invalid number {parts[i]!r}", _column(text, i)) from None
    if not math.isfinite(v):
        raise lines.error(ln, f"non-finite number {parts[i]!r}", _column(text, i))
    return v


def parse_mesh(text: str, source=None) -> Mesh:
    lines = _Lines(text, source)
    ln, head = lines.next("header")
    if head != "mesh2d v1":
        raise lines.error(ln, f"expected header 'mesh2d v1', found {head!r}", 1)
    nv = _count(lines, "vertices")
    verts = np.empty((nv, 2))
    flags = np.empty(nv, dtype=bool)
    for i in range(nv):
        ln, text = lines.next("vertex record")
        parts = _tokens(lines, ln, text, 3)
        verts[i, 0] = _float(lines, ln, text, parts, 0)
        verts[i, 1] = _float(lines, ln, text, parts, 1)
        if parts[2] not in ("0", "1"):
            raise lines.error(ln, f"boundary flag must be 0 or 1, found {parts[2]!r}", _column(text, 2))
        flags[i] = parts[2] == "1"
    nt = _count(lines, "triangles")
    tris = np.empty((nt, 3), dtype=np.int64)
    tags = np.empty(nt, dtype=np.int8)
    for i in range(nt):
        ln, text = lines.next("triangle record")
        parts = _tokens(lines, ln, text, 4)
        for j in range(3):
            if not parts[j].isdigit() or int(parts[j]) >= nv:
                raise lines.error(ln, f"invalid vertex index {parts[j]!r}", _column(text, j))
            tris[i, j] = int(parts[j])
        if parts[3] not in TAG_CODES:
            raise lines.error(ln, f"unknown region tag {parts[3]!r}", _column(text, 3))
        tags[i] = TAG_CODES[parts[3]]
    lines.finish()
    return Mesh(verts, tris, tags, flags)


def read_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text(encoding="utf-8"), source=str(path))


# ---------------------------------------------------------------------------
# field
# ---------------------------------------------------------------------------


def format_field(values) -> str:
    vals = np.asarray(getattr(values, "values", values), dtype=float).reshape(-1)
    return "field v1\n" + f"{len(vals)}\n" + "".join(fmt(v) + "\n" for v in vals)


def write_field(values, path) -> Path:
    return _write_text(path, format_field(values))


def parse_field(text: str, source=None) -> np.ndarray:
    lines = _Lines(text, source)
    ln, head = lines.next("header")
    if head != "field v1":
        raise lines.error(ln, f"expected header 'field v1', found {head!r}", 1)
    ln, text_n = lines.next("vertex count")
    if not text_n.isdigit():
        raise lines.error(ln, f"expected a vertex count, found {text_n!r}", 1)
    n = int(text_n)
    out = np.empty(n)
    for i in range(n):
        ln, t = lines.next("coefficient")
        parts = _tokens(lines, ln, t, 1)
        out[i] = _float(lines, ln, t, parts, 0)
    lines.finish()
    return out


def read_field(path, mesh: Mesh | None = None) -> np.ndarray:
    vals = parse_field(Path(path).read_text(encoding="utf-8"), source=str(path))
    if mesh is not None and len(vals) != mesh.num_vertices:
        raise ParseError(f"field has {len(vals)} values, mesh has {mesh.num_vertices} vertices", source=str(path))
    return vals


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def format_csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    return _write_text(path, format_csv(header, rows))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty CSV file", source=str(path))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# VTK
# ---------------------------------------------------------------------------


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "quasitd") -> Path:
    """Legacy ASCII unstructured grid with scalar point and cell data.

    The cell data always includes ``region_tag`` (integer codes, see
    :data:`quasitd.mesh.TAG_NAMES`).
    """
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.num_vertices} double")
    out.extend(f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.vertices)
    nt = mesh.num_triangles
    out.append(f"CELLS {nt} {4 * nt}")
    out.extend(f"3 {i} {j} {k}" for i, j, k in mesh.triangles)
    out.append(f"CELL_TYPES {nt}")
    out.extend("5" for _ in range(nt))
    cells = {"region_tag": mesh.region_tag.astype(float)}
    cells.update(cell_data or {})
    out.append(f"CELL_DATA {nt}")
    for name, vals in cells.items():
        out.append(f"SCALARS {name} double 1")
        out.append("LOOKUP_TABLE default")
        out.extend(fmt(v) for v in np.asarray(vals, dtype=float))
    if point_data:
        out.append(f"POINT_DATA {mesh.num_vertices}")
        for name, vals in point_data.items():
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(fmt(v) for v in np.asarray(getattr(vals, "values", vals), dtype=float))
    return _write_text(path, "\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# golden comparison and manifests
# ---------------------------------------------------------------------------


@dataclass
class GoldenReport:
    passed: bool
    differences: list = field(default_factory=list)

    def __str__(self):
        if self.passed:
            return "PASS"
        return "FAIL\n" + "\n".join(self.differences)


def _num(s: str):
    try:
        return float(s)
    except ValueError:
        return None


def compare_golden(file, golden, abs_tol: float = 0.0, rel_tol: float = 0.0,
                   column_tols: dict | None = None, max_report: int = 20) -> GoldenReport:
    """Compare an output file with its golden counterpart.

    CSV files are compared cell by cell; numeric cells pass when
    ``|x - g| <= abs_tol + rel_tol * |g|`` (per-column overrides in
    ``column_tols[name] = (abs_tol, rel_tol)``).  Mesh files must match
    exactly in content, other files byte for byte.
    """
    file, golden = Path(file), Path(golden)
    diffs: list[str] = []
    if file.suffix == ".mesh" or golden.suffix == ".mesh":
        a, b = read_mesh(file), read_mesh(golden)
        if not a.equals(b):
            diffs.append(f"mesh {file} differs from golden {golden}")
        return GoldenReport(not diffs, diffs)
    if file.suffix != ".csv":
        ok = file.read_bytes() == golden.read_bytes()
        return GoldenReport(ok, [] if ok else [f"{file} differs from golden {golden} byte-wise"])
    ha, ra = read_csv(file)
    hb, rb = read_csv(golden)
    if ha != hb:
        return GoldenReport(False, [f"header {ha} != golden header {hb}"])
    if len(ra) != len(rb):
        diffs.append(f"row count {len(ra)} != golden {len(rb)}")
    column_tols = column_tols or {}
    for r, (row_a, row_b) in enumerate(zip(ra, rb), start=1):
        if len(row_a) != len(row_b):
            diffs.append(f"row {r}: {len(row_a)} cells, golden has {len(row_b)}")
            continue
        for c, (x, g) in enumerate(zip(row_a, row_b)):
            name = ha[c] if c < len(ha) else str(c)
            fx, fg = _num(x), _num(g)
            if fx is None or fg is None:
                if x != g:
                    diffs.append(f"row {r}, column {name}: {x!r} != golden {g!r}")
                continue
            if math.isnan(fx) and math.isnan(fg):
                continue
            at, rt = column_tols.get(name, (abs_tol, rel_tol))
            if not abs(fx - fg) <= at + rt * abs(fg):
                diffs.append(
                    f"row {r}, column {name}: {x} vs golden {g} (|diff|={abs(fx - fg):.3e}, "
                    f"allowed {at + rt * abs(fg):.3e})"
                )
    if len(diffs) > max_report:
        diffs = diffs[:max_report] + [f"... {len(diffs) - max_report} more differences"]
    return GoldenReport(not diffs, diffs)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, entries: dict, artifacts) -> Path:
    """Plain ``key = value`` manifest with one ``artifact`` line per file digest."""
    lines = [f"{k} = {fmt(v)}" for k, v in entries.items()]
    base = Path(path).parent
    for a in sorted(Path(p) for p in artifacts):
        rel = os.path.relpath(a, base)
        lines.append(f"artifact {rel} = sha256:{sha256_file(a)}")
    return _write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> tuple[dict, dict]:
    entries, artifacts = {}, {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if " = " not in line:
            raise ParseError("expected 'key = value'", line=ln, source=str(path))
        k, v = line.split(" = ", 1)
        if k.startswith("artifact "):
            artifacts[k[len("artifact "):]] = v.removeprefix("sha256:")
        else:
            entries[k] = v
    return entries, artifacts


def verify_manifest(path) -> bool:
    """Recompute the artifact digests listed in a manifest."""
    _, arts = read_manifest(path)
    base = Path(path).parent
    return all(sha256_file(base / rel) == digest for rel, digest in arts.items())
