"""Flat text format for named parameter arrays.

Layout:
    # key value            metadata lines, optional, any number
    name dim0 dim1 ...     one header per array (no dims for scalars)
    0x1.9p-3 0x1.0p+0 ...  exactly prod(dims) values, wrapped freely

Values are written as C99 hex floats, so a write/read round trip is
bit-identical. Value lines always carry the 0x prefix, which is how the
reader tells them apart from header lines (names like "b1" are valid
hex digits, so sniffing with float.fromhex would misfire).
"""

import numpy as np

from .errors import ContractViolation

_PER_LINE = 8


def write_params(path, named, meta=None):
    """named: dict name -> ndarray (insertion order preserved)."""
    with open(path, "w") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key} {value}\n")
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            if " " in name:
                raise ContractViolation(f"parameter name {name!r} contains a space")
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"parameter {name!r} has non-finite entries")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(name + (" " + dims if dims else "") + "\n")
            flat = arr.ravel()
            for i in range(0, flat.size, _PER_LINE):
                fh.write(" ".join(float.hex(float(x)) for x in flat[i:i + _PER_LINE]) + "\n")


def write_csv(path, header, columns):
    """RFC-4180 CSV: header row, floats at 17 significant digits.

    columns: sequence of equal-length 1-D arrays, one per header field.
    Integers and bools pass through as-is so flags stay readable.
    """
    import csv

    columns = [np.asarray(c) for c in columns]
    if len(columns) != len(header):
        raise ContractViolation("header/column count mismatch")
    n = columns[0].shape[0] if columns else 0
    if any(c.shape != (n,) for c in columns):
        raise ContractViolation("csv columns must be equal-length 1-D arrays")

    def cell(value):
        if isinstance(value, (bool, np.bool_)):
            return str(int(value))
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        return f"{float(value):.17g}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            writer.writerow([cell(c[i]) for c in columns])


def read_csv(path):
    """Inverse of write_csv: (header list, dict column -> float array)."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    cols = {name: np.array([float(row[i]) for row in rows])
            for i, name in enumerate(header)}
    return header, cols


def _is_value_line(first_token):
    return first_token.startswith("0x") or first_token.startswith("-0x")


def read_params(path):
    """Returns (dict name -> ndarray, dict of metadata strings)."""
    meta = {}
    named = {}
    with open(path) as fh:
        tokens = []
        header = None

        def flush():
            if header is None:
                return
            name, shape = header
            need = int(np.prod(shape)) if shape else 1
            if len(tokens) != need:
                raise ContractViolation(
                    f"parameter {name!r}: expected {need} values, got {len(tokens)}")
            arr = np.array([float.fromhex(t) for t in tokens], dtype=np.float64)
            named[name] = arr.reshape(shape)

        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split(None, 1)
                if parts:
                    meta[parts[0]] = parts[1] if len(parts) > 1 else ""
                continue
            if _is_value_line(line.split()[0]):
                tokens.extend(line.split())
            else:
                flush()
                parts = line.split()
                header = (parts[0], tuple(int(d) for d in parts[1:]))
                tokens = []
        flush()
    return named, meta
