"""On-disk formats: dataset container, checkpoints, run configs.

Everything numeric is little-endian float64 so regeneration under the same
seed is byte-identical and oracle comparisons stay exact. The container is
a fixed-layout binary (magic "OPSPM1") with a JSON manifest alongside it in
the same file; checkpoints follow the same pattern with named tensors.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

CONTAINER_MAGIC = b"OPSPM1"
CHECKPOINT_MAGIC = b"OPSPMCK"
FORMAT_VERSION = 1
_LE = "<"


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_container(path, manifest: dict, arrays: dict) -> None:
    """arrays: profiles_i (N,np), instances (N,9), field_n/field_p (N,nr,nt),
    voltage (N,nt), violated (N,) -- stored per sample in that order."""
    n = arrays["profiles_i"].shape[0]
    n_prof = arrays["profiles_i"].shape[1]
    n_r, n_t = arrays["field_n"].shape[1:]
    man = dict(manifest)
    man["format_version"] = FORMAT_VERSION
    man_b = _json_bytes(man)
    header = struct.pack(_LE + "6sHBxIIII", CONTAINER_MAGIC, FORMAT_VERSION, 1,
                         n, n_prof, n_r, n_t)
    header += struct.pack(_LE + "3d", man["scaling"]["c_max_n"],
                          man["scaling"]["c_max_p"], man["scaling"]["current_scale"])
    header += struct.pack(_LE + "I", len(man_b))
    with open(path, "wb") as f:
        f.write(header)
        f.write(man_b)
        for i in range(n):
            f.write(_f64(arrays["profiles_i"][i]))
            f.write(_f64(arrays["instances"][i]))
            f.write(_f64(arrays["field_n"][i]))
            f.write(_f64(arrays["field_p"][i]))
            f.write(_f64(arrays["voltage"][i]))
            f.write(_f64([1.0 if arrays["violated"][i] else 0.0]))


def read_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    head_fmt = _LE + "6sHBxIIII"
    head_len = struct.calcsize(head_fmt)
    magic, version, endian, n, n_prof, n_r, n_t = struct.unpack_from(head_fmt, raw)
    if magic != CONTAINER_MAGIC:
        raise ValueError(f"bad container magic {magic!r}")
    if version != FORMAT_VERSION or endian != 1:
        raise ValueError(f"unsupported container version {version} / endianness {endian}")
    off = head_len
    c_max_n, c_max_p, cur_scale = struct.unpack_from(_LE + "3d", raw, off)
    off += 24
    (man_len,) = struct.unpack_from(_LE + "I", raw, off)
    off += 4
    manifest = json.loads(raw[off:off + man_len].decode("utf-8"))
    off += man_len
    rec_floats = n_prof + 9 + 2 * n_r * n_t + n_t + 1
    expected = off + n * rec_floats * 8
    if len(raw) != expected:
        raise ValueError(f"container length {len(raw)} != declared layout {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=off).reshape(n, rec_floats)
    p = 0
    arrays = {}
    for key, width in (("profiles_i", n_prof), ("instances", 9),
                       ("field_n", n_r * n_t), ("field_p", n_r * n_t),
                       ("voltage", n_t)):
        arrays[key] = flat[:, p:p + width].copy()
        p += width
    arrays["violated"] = flat[:, p] > 0.5
    arrays["field_n"] = arrays["field_n"].reshape(n, n_r, n_t)
    arrays["field_p"] = arrays["field_p"].reshape(n, n_r, n_t)
    return manifest, arrays


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(_json_bytes(manifest)).hexdigest()


def save_checkpoint(path, arch: str, config: dict, tensors: dict,
                    train_manifest_hash: str = "") -> None:
    """tensors: name -> float64/complex128 ndarray; round-trips bit-exactly."""
    names = sorted(tensors)
    index = []
    blobs = []
    off = 0
    for name in names:
        a = np.ascontiguousarray(tensors[name])
        kind = "c16" if a.dtype.kind == "c" else "f8"
        b = a.astype("<c16" if kind == "c16" else "<f8").tobytes()
        index.append({"name": name, "shape": list(a.shape), "dtype": kind,
                      "offset": off, "nbytes": len(b)})
        blobs.append(b)
        off += len(b)
    header = _json_bytes({"arch": arch, "config": config, "tensors": index,
                          "manifest_hash": train_manifest_hash,
                          "format_version": FORMAT_VERSION})
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(_LE + "I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[str, dict, dict, str]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:7] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:7]!r}")
    (hlen,) = struct.unpack_from(_LE + "I", raw, 7)
    head = json.loads(raw[11:11 + hlen].decode("utf-8"))
    base = 11 + hlen
    tensors = {}
    for ent in head["tensors"]:
        dt = "<c16" if ent["dtype"] == "c16" else "<f8"
        a = np.frombuffer(raw, dtype=dt, count=int(np.prod(ent["shape"])) if ent["shape"] else 1,
                          offset=base + ent["offset"])
        tensors[ent["name"]] = a.reshape(ent["shape"]).copy()
    return head["arch"], head["config"], tensors, head["manifest_hash"]


# ------------------------------------------------------------------ configs

def parse_config_file(path, schema: dict) -> dict:
    """key = value lines; '#' comments; unknown keys are errors (fail fast)."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in schema:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce_value(val, schema[key])
    return out


def _coerce_value(val: str, kind):
    if kind is bool:
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {val!r}")
    if kind in (int, float):
        return kind(val)
    return val


def write_resolved_config(path, config: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(config):
            f.write(f"{key} = {config[key]}\n")
