"""Versioned binary checkpoint archive.

Layout (all little-endian)::

    b"RFN1"  u32 version  u32 record_count
    record*: u16 name_len, name (utf-8), u8 kind, u64 payload_len, payload

``kind`` 0 is a UTF-8 JSON document, ``kind`` 1 a float64 array stored as
u8 ndim, ndim * u32 dims, then the values in row-major order.  Records are
written in a fixed order:

* ``config``: fusion and training configuration echo
* ``vocab``: token list and counts
* ``meta``: epoch, seed, rng state, Adam scalars, early-stopping counters
* ``param/<name>``: every model parameter, e.g. ``param/stage1.m0.t1.lstm.W``
* ``adam.m/<name>``, ``adam.v/<name>``: Adam moments
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import FusionConfig, RFNet
from .numerics import AdamState, Rng, Tensor

MAGIC = b"RFN1"
VERSION = 1
_JSON, _ARRAY = 0, 1


@dataclass
class Checkpoint:
    model: RFNet
    adam: AdamState
    vocab_json: str = "{}"
    epoch: int = -1
    seed: int = 0
    rng_state: dict | None = None
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _record(name: str, kind: int, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)) + payload


def _json(name: str, obj) -> bytes:
    return _record(name, _JSON, json.dumps(obj, sort_keys=True).encode("utf-8"))


def _array(name: str, a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return _record(name, _ARRAY, head + a.tobytes())


def _rng_state_json(state):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=int))


def to_bytes(ck: Checkpoint) -> bytes:
    cfg = asdict(ck.model.cfg)
    meta = {
        "epoch": ck.epoch,
        "seed": ck.seed,
        "rng_state": _rng_state_json(ck.rng_state),
        "adam": {
            "step_count": ck.adam.step_count,
            "beta1": ck.adam.beta1,
            "beta2": ck.adam.beta2,
            "epsilon": ck.adam.epsilon,
        },
        "extra": ck.extra,
    }
    records = [
        _json("config", {"fusion": cfg, "train": ck.train_config}),
        _record("vocab", _JSON, ck.vocab_json.encode("utf-8")),
        _json("meta", meta),
    ]
    for name in sorted(ck.model.params):
        records.append(_array(f"param/{name}", ck.model.params[name].data))
    for name in sorted(ck.adam.m):
        records.append(_array(f"adam.m/{name}", ck.adam.m[name]))
        records.append(_array(f"adam.v/{name}", ck.adam.v[name]))
    return MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise ValueError("not an RFN1 checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    docs, arrays = {}, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        kind, size = struct.unpack_from("<BQ", buf, pos)
        pos += 9
        payload = buf[pos : pos + size]
        pos += size
        if kind == _JSON:
            docs[name] = payload.decode("utf-8")
        elif kind == _ARRAY:
            (ndim,) = struct.unpack_from("<B", payload, 0)
            shape = struct.unpack_from(f"<{ndim}I", payload, 1)
            off = 1 + 4 * ndim
            arrays[name] = np.frombuffer(payload, "<f8", offset=off).astype(np.float64).reshape(shape)
        else:
            raise ValueError(f"record {name!r}: unknown kind {kind}")
    config = json.loads(docs["config"])
    fcfg = config["fusion"]
    if fcfg.get("view_subset") is not None:
        fcfg["view_subset"] = tuple(fcfg["view_subset"])
    model = RFNet(FusionConfig(**fcfg))
    for name, a in arrays.items():
        if name.startswith("param/"):
            key = name[len("param/") :]
            model.params[key] = Tensor(a.copy(), requires_grad=True, name=key)
    want = {k: p.shape for k, p in RFNet.create(model.cfg, Rng(0)).params.items()}
    have = {k: p.shape for k, p in model.params.items()}
    if want != have:
        missing = sorted(set(want) - set(have)) or sorted(k for k in want if want[k] != have.get(k))
        raise ValueError(f"checkpoint parameters do not match the configuration: {missing[:3]}")
    model.assert_census()
    meta = json.loads(docs["meta"])
    adam = AdamState(step_count=meta["adam"]["step_count"], beta1=meta["adam"]["beta1"],
                     beta2=meta["adam"]["beta2"], epsilon=meta["adam"]["epsilon"])
    for name, a in arrays.items():
        if name.startswith("adam.m/"):
            adam.m[name[7:]] = a.copy()
        elif name.startswith("adam.v/"):
            adam.v[name[7:]] = a.copy()
    return Checkpoint(
        model=model,
        adam=adam,
        vocab_json=docs.get("vocab", "{}"),
        epoch=meta["epoch"],
        seed=meta["seed"],
        rng_state=meta["rng_state"],
        train_config=config.get("train", {}),
        extra=meta.get("extra", {}),
    )


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
