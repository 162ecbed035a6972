"""Minimal PLY (ASCII / binary little-endian) and OBJ reading and writing."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    """Raised when a PLY file cannot be parsed."""


class _Element:
    def __init__(self, name, count, line):
        self.name = name
        self.count = count
        self.line = line
        # (name, dtype) for scalars, (name, count_dtype, item_dtype) for lists
        self.props = []


def _parse_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PlyError("line 1: expected 'ply' magic, got %r" % magic[:20])
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError("line %d: unexpected end of file inside header" % lineno)
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise PlyError("line %d: unsupported format %r" % (lineno, " ".join(tokens[1:])))
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise PlyError("line %d: malformed element declaration" % lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise PlyError("line %d: element count %r is not an integer" % (lineno, tokens[2])) from None
            elements.append(_Element(tokens[1], count, lineno))
        elif key == "property":
            if not elements:
                raise PlyError("line %d: property before any element" % lineno)
            try:
                if tokens[1] == "list":
                    elements[-1].props.append((tokens[4], _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]))
                else:
                    elements[-1].props.append((tokens[2], _PLY_TYPES[tokens[1]]))
            except (KeyError, IndexError):
                raise PlyError("line %d: malformed property %r" % (lineno, raw.strip())) from None
        elif key == "end_header":
            break
        else:
            raise PlyError("line %d: unknown header keyword %r" % (lineno, key))
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements, lineno


def _read_ascii(fh, elements, header_lines):
    data = {}
    lines = fh.read().decode("ascii", errors="replace").splitlines()
    pos = 0
    for el in elements:
        cols = {p[0]: [] for p in el.props}
        for k in range(el.count):
            lineno = header_lines + pos + 1
            if pos >= len(lines):
                raise PlyError("line %d: element %r truncated after %d of %d rows"
                               % (lineno, el.name, k, el.count))
            tokens = lines[pos].split()
            pos += 1
            t = 0
            try:
                for p in el.props:
                    if len(p) == 2:
                        cols[p[0]].append(float(tokens[t]))
                        t += 1
                    else:
                        n = int(tokens[t])
                        cols[p[0]].append([float(v) for v in tokens[t + 1:t + 1 + n]])
                        if len(cols[p[0]][-1]) != n:
                            raise IndexError
                        t += 1 + n
            except (IndexError, ValueError):
                raise PlyError("line %d: element %r row %d is malformed" % (lineno, el.name, k)) from None
        out = {}
        for p in el.props:
            if len(p) == 2:
                out[p[0]] = np.asarray(cols[p[0]], dtype=np.dtype(p[1]))
            else:
                out[p[0]] = [np.asarray(v, dtype=np.dtype(p[2])) for v in cols[p[0]]]
        data[el.name] = out
    return data


def _read_binary(fh, elements):
    buf = fh.read()
    off = 0
    data = {}
    for el in elements:
        if all(len(p) == 2 for p in el.props):
            dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
            need = dt.itemsize * el.count
            if off + need > len(buf):
                raise PlyError("element %r truncated: need %d bytes, have %d"
                               % (el.name, need, len(buf) - off))
            arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=off)
            off += need
            data[el.name] = {p[0]: arr[p[0]].copy() for p in el.props}
            continue
        cols = {p[0]: [] for p in el.props}
        for k in range(el.count):
            for p in el.props:
                try:
                    if len(p) == 2:
                        dt = np.dtype("<" + p[1])
                        cols[p[0]].append(np.frombuffer(buf, dt, 1, off)[0])
                        off += dt.itemsize
                    else:
                        cdt, idt = np.dtype("<" + p[1]), np.dtype("<" + p[2])
                        n = int(np.frombuffer(buf, cdt, 1, off)[0])
                        off += cdt.itemsize
                        cols[p[0]].append(np.frombuffer(buf, idt, n, off).copy())
                        off += idt.itemsize * n
                except ValueError:
                    raise PlyError("element %r truncated at row %d" % (el.name, k)) from None
        out = {}
        for p in el.props:
            if len(p) == 2:
                out[p[0]] = np.asarray(cols[p[0]], dtype=np.dtype(p[1]))
            else:
                out[p[0]] = cols[p[0]]
        data[el.name] = out
    return data


def read_ply(path):
    """Read a PLY file into ``{element: {property: array}}``.

    List properties come back as a list of 1-D arrays, one per row.
    """
    with open(path, "rb") as fh:
        fmt, elements, nlines = _parse_header(fh)
        if fmt == "ascii":
            return _read_ascii(fh, elements, nlines)
        return _read_binary(fh, elements)


def _fmt_float(v):
    return repr(float(v))


def write_ply(path, vertex: dict, faces=None):
    """Write an ASCII PLY.

    ``vertex`` maps property name to a 1-D array; uint8 arrays are written as
    ``uchar`` and everything else as ``double``.  ``faces`` is an (m, 3) int array.
    """
    names = list(vertex)
    cols = [np.asarray(vertex[k]) for k in names]
    n = len(cols[0]) if cols else 0
    lines = ["ply", "format ascii 1.0", "element vertex %d" % n]
    for k, c in zip(names, cols):
        lines.append("property %s %s" % ("uchar" if c.dtype == np.uint8 else "double", k))
    if faces is not None:
        lines.append("element face %d" % len(faces))
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    conv = [(lambda v: str(int(v))) if c.dtype == np.uint8 else _fmt_float for c in cols]
    for i in range(n):
        lines.append(" ".join(f(c[i]) for f, c in zip(conv, cols)))
    if faces is not None:
        for f in np.asarray(faces, dtype=np.int64):
            lines.append("3 %d %d %d" % (f[0], f[1], f[2]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_obj(path, vertices, faces):
    """Write geometry-only OBJ with 1-based face indices."""
    out = ["v %s %s %s" % tuple(_fmt_float(c) for c in v) for v in np.asarray(vertices)]
    out += ["f %d %d %d" % tuple(int(i) + 1 for i in f) for f in np.asarray(faces)]
    Path(path).write_text("\n".join(out) + ("\n" if out else ""), encoding="utf-8")


def read_obj(path):
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
        except ValueError:
            raise PlyError("%s line %d: malformed OBJ record" % (path, lineno)) from None
    return (np.asarray(verts, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


if __name__ == "__main__":  # pragma: no cover
    d = read_ply(sys.argv[1])
    for name, props in d.items():
        print(name, {k: (len(v) if isinstance(v, list) else v.shape) for k, v in props.items()})
