"""Single-file checkpoints.

Layout::

    8 bytes   magic b"FEDABML\\x00"
    4 bytes   format version (uint32, little-endian)
    8 bytes   header length H (uint64, little-endian)
    H bytes   UTF-8 JSON header (manifest, hash, round, history, vector index)
    ...       float64 little-endian payload; the index maps names to [offset, length]
              in units of float64 elements

Raw float64 storage keeps every vector bit-exact across save/load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fedcore import TrainState
from .metrics import TrainingHistory
from .varinf import MeanFieldGaussian

MAGIC = b"FEDABML\x00"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, manifest: dict, manifest_hash: str, state: TrainState) -> Path:
    vectors: dict[str, np.ndarray] = {
        "theta.mean": state.theta.mean,
        "theta.log_std": state.theta.log_std,
    }
    for cid in sorted(state.phis):
        vectors[f"phi.{cid}.mean"] = state.phis[cid].mean
        vectors[f"phi.{cid}.log_std"] = state.phis[cid].log_std
    index, offset = {}, 0
    for name, vec in vectors.items():
        index[name] = [offset, int(vec.size)]
        offset += int(vec.size)
    header = {
        "manifest": manifest,
        "manifest_hash": manifest_hash,
        "next_round": state.next_round,
        "d": state.theta.d,
        "clients": sorted(int(c) for c in state.phis),
        "history": state.history.to_dicts(),
        "index": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for vec in vectors.values():
            fh.write(np.ascontiguousarray(vec, dtype=_LE_F64).tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, str, TrainState]:
    """Returns (manifest, stored manifest hash, state)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    start = 8 + struct.calcsize("<IQ")
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    end = start + hlen
    if end > len(raw) or (len(raw) - end) % _LE_F64.itemsize:
        raise CheckpointError(f"{path}: truncated or misaligned payload")
    try:
        header = json.loads(raw[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = np.frombuffer(raw, dtype=_LE_F64, offset=end)

    def vec(name):
        off, n = header["index"][name]
        if off + n > payload.size:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        return payload[off : off + n].astype(np.float64)

    theta = MeanFieldGaussian(vec("theta.mean"), vec("theta.log_std"))
    phis = {cid: MeanFieldGaussian(vec(f"phi.{cid}.mean"), vec(f"phi.{cid}.log_std")) for cid in header["clients"]}
    state = TrainState(theta, phis, TrainingHistory.from_dicts(header["history"]), header["next_round"])
    return header["manifest"], header["manifest_hash"], state
