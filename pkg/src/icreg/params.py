"""Named parameter storage and binary checkpoints.

A checkpoint file is:

    8 bytes   magic ``ICCKPT01``
    4 bytes   u32 little-endian byte length of the manifest
    N bytes   UTF-8 JSON manifest: list of {"name", "shape", "byte_offset"}
    ...       raw little-endian float64 payload, row-major

``byte_offset`` is relative to the start of the payload.  Save followed by
load reproduces every array bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tape import DiffTensor, Tape

MAGIC = b"ICCKPT01"


class ParamStore:
    """Ordered name -> float64 array mapping for trainable parameters.

    Each entry also carries Adam moment buffers and a step counter so an
    optimizer can resume mid-run; checkpoints serialize values only.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64, order="C")
        self._values[name] = arr
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        self._t[name] = 0
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> tuple[str, ...]:
        return tuple(self._values)

    def assign(self, name: str, value: np.ndarray) -> None:
        cur = self._values[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ValueError(
                f"parameter {name!r}: shape {value.shape} does not match stored {cur.shape}"
            )
        self._values[name] = np.ascontiguousarray(value)

    def leaves(self, tape: Tape) -> dict[str, DiffTensor]:
        """Register every parameter as a leaf on ``tape`` (insertion order)."""
        return {name: tape.leaf(value, name) for name, value in self._values.items()}

    def adam_state(self, name: str) -> tuple[np.ndarray, np.ndarray, int]:
        return self._m[name], self._v[name], self._t[name]

    def set_adam_state(self, name: str, m: np.ndarray, v: np.ndarray, t: int) -> None:
        cur = self._values[name]
        if m.shape != cur.shape or v.shape != cur.shape:
            raise ValueError(f"parameter {name!r}: moment shapes must match {cur.shape}")
        self._m[name], self._v[name], self._t[name] = m, v, int(t)

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.copy())
            out._m[name] = self._m[name].copy()
            out._v[name] = self._v[name].copy()
            out._t[name] = self._t[name]
        return out

    def total_size(self) -> int:
        return sum(v.size for v in self._values.values())

    def save(self, path) -> None:
        path = Path(path)
        manifest = []
        offset = 0
        for name, value in self._values.items():
            manifest.append({"name": name, "shape": list(value.shape), "byte_offset": offset})
            offset += value.size * 8
        blob = json.dumps(manifest).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(len(blob)).tobytes())
            f.write(blob)
            for value in self._values.values():
                f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())

    def load_values(self, path) -> None:
        """Overwrite the values of an already-built store from a checkpoint.

        The checkpoint must carry exactly the names this store holds, with
        matching shapes; moments and step counters are left untouched.
        """
        other = ParamStore.load(path)
        mine, theirs = set(self._values), set(other._values)
        if mine != theirs:
            raise ValueError(
                f"{path}: checkpoint does not match model parameters "
                f"(missing {sorted(mine - theirs)}, unexpected {sorted(theirs - mine)})"
            )
        for name in self._values:
            self.assign(name, other[name])

    @classmethod
    def load(cls, path) -> "ParamStore":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {raw[:8]!r})")
        n = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
        try:
            manifest = json.loads(raw[12 : 12 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}: corrupt manifest ({e})") from None
        payload = raw[12 + n :]
        store = cls()
        for entry in manifest:
            name, shape, off = entry["name"], tuple(entry["shape"]), entry["byte_offset"]
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            end = off + count * 8
            if end > len(payload):
                raise ValueError(
                    f"{path}: parameter {name!r} extends past end of file "
                    f"(needs byte {end}, payload has {len(payload)})"
                )
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
            store.add(name, arr)
        return store
