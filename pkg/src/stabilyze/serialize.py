"""JSON/CSV output helpers: fixed float formatting, exact rationals, atomic writes."""
from __future__ import annotations

import hashlib
import math
import os
import tempfile
from fractions import Fraction

import numpy as np


def rational(x):
    """Read a number that may be given as {num, den}, an int, a float or a string."""
    if isinstance(x, dict):
        return Fraction(int(x["num"]), int(x["den"]))
    if isinstance(x, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    return float(x)


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        # JSON has no literal for these; keep them readable and parseable by python
        return '"%s"' % repr(x)
    if x == 0.0:
        return "0.0"
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "inf" not in s:
        s += ".0"
    return s


def to_plain(obj):
    """Convert nested data (numpy, Fraction, complex, dataclass-like) to JSON-ready values."""
    if isinstance(obj, Fraction):
        if obj.denominator == 1:
            return {"num": obj.numerator, "den": 1}
        return {"num": obj.numerator, "den": obj.denominator}
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return [to_plain(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_plain(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    return _dump(to_plain(obj), 0, indent) + "\n"


def _dump(v, level, indent):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{pad}{_quote(k)}: {_dump(v[k], level + 1, indent)}" for k in sorted(v)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, list):
        if not v:
            return "[]"
        if all(not isinstance(x, (dict, list)) for x in v):
            return "[" + ", ".join(_dump(x, level + 1, indent) for x in v) + "]"
        return "[\n" + ",\n".join(pad + _dump(x, level + 1, indent) for x in v) + "\n" + end + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return _fmt_float(v)
    if isinstance(v, str):
        return _quote(v)
    raise TypeError(type(v))


def _quote(s: str) -> str:
    import json
    return json.dumps(s, ensure_ascii=False)


def atomic_write(path: str, data: str | bytes) -> str:
    """Write via a temp file in the same directory, then rename. Returns the sha256."""
    path = os.path.abspath(path)
    d = os.path.dirname(path)
    os.makedirs(d, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(raw).hexdigest()


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def csv_text(header, rows) -> str:
    out = [",".join(header)]
    for row in rows:
        cells = []
        for x in row:
            if isinstance(x, (float, np.floating)):
                cells.append(format(float(x), ".17g"))
            else:
                cells.append(str(x))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"
