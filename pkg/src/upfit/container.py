"""Named-array container I/O.

All binary artifacts (body model files, trained predictor files) are stored as
uncompressed NPZ archives: a zip of little-endian ``.npy`` members, one per
named array.  Every archive carries a ``format_version`` scalar and, where
needed, a ``meta_json`` member holding a UTF-8 JSON string for non-array
metadata.  Writes are deterministic, so identical content hashes identically.
"""

import hashlib
import io
import json
import os
import tempfile
import zipfile

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_named_arrays(path, arrays):
    """Write ``{name: ndarray}`` to an npz file with deterministic bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            payload = io.BytesIO()
            np.lib.format.write_array(payload, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE)
            zf.writestr(info, payload.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_named_arrays(path):
    """Read an npz written by :func:`save_named_arrays` (or numpy itself)."""
    with np.load(path, allow_pickle=False) as data:
        return {name: data[name] for name in data.files}


def encode_json_array(obj):
    """JSON-encode ``obj`` into a 0-d unicode array for npz storage."""
    return np.array(json.dumps(obj, sort_keys=True))


def decode_json_array(arr):
    return json.loads(str(arr))


def atomic_write_bytes(path, payload):
    """Write bytes via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    """Deterministic, human-readable JSON dump."""
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_bytes(payload):
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
