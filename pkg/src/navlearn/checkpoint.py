"""Binary checkpoints.

Layout::

    byte 0          format version
    bytes 1..4      header length n (uint32, little-endian)
    bytes 5..5+n    UTF-8 JSON header (manifest, configs, counters, rng state)
    payload         parameters as little-endian float32 in manifest order,
                    then Adam first and second moments in the same order
                    when the header says they are present
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import EpisodeRecord
from .policy import PolicyConfig, PolicyParameters

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: PolicyParameters
    optimizer_state: dict | None = None
    run_config: dict = field(default_factory=dict)
    episode: int = 0
    updates: int = 0
    rng_state: dict | None = None
    records: list = field(default_factory=list)


def policy_config_to_dict(cfg: PolicyConfig) -> dict:
    d = asdict(cfg)
    d["conv"] = [list(c) for c in cfg.conv]
    return d


def policy_config_from_dict(d: dict) -> PolicyConfig:
    d = dict(d)
    d["conv"] = tuple(tuple(int(v) for v in c) for c in d["conv"])
    return PolicyConfig(**d)


def _record_to_list(r: EpisodeRecord) -> list:
    return [r.episode, list(r.target), int(r.is_test), int(r.arrival), r.total_reward, r.steps, r.terminal.value]


def _record_from_list(v) -> EpisodeRecord:
    return EpisodeRecord(int(v[0]), tuple(v[1]), bool(v[2]), bool(v[3]), float(v[4]), int(v[5]), v[6])


def save_checkpoint(path, params: PolicyParameters, optimizer_state: dict | None = None, *,
                    run_config: dict | None = None, episode: int = 0, updates: int = 0,
                    rng_state: dict | None = None, records=()) -> None:
    manifest = [[name, list(shape)] for name, shape in params.manifest()]
    header = {
        "manifest": manifest,
        "policy_config": policy_config_to_dict(params.config),
        "run_config": run_config or {},
        "episode": int(episode),
        "updates": int(updates),
        "rng_state": rng_state,
        "optimizer": None if optimizer_state is None else {"t": int(optimizer_state["t"])},
        "records": [_record_to_list(r) for r in records],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [t.data.astype(_LE_F32).tobytes() for t in params]
    if optimizer_state is not None:
        parts += [np.asarray(m).astype(_LE_F32).tobytes() for m in optimizer_state["m"]]
        parts += [np.asarray(v).astype(_LE_F32).tobytes() for v in optimizer_state["v"]]
    with open(path, "wb") as fh:
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in parts:
            fh.write(p)


def load_checkpoint(path, expected: PolicyConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` the stored architecture must match it."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < 5:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    if data[0] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {data[0]}, expected {FORMAT_VERSION}")
    (n,) = struct.unpack("<I", data[1:5])
    if len(data) < 5 + n:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[5:5 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from None

    try:
        cfg = policy_config_from_dict(header["policy_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad policy configuration: {exc}") from None
    manifest = [(name, tuple(shape)) for name, shape in header["manifest"]]
    if [(nm, tuple(s)) for nm, s in cfg.param_shapes()] != manifest:
        raise CheckpointError(f"{path}: manifest disagrees with the stored policy configuration")
    if expected is not None:
        current = dict(expected.param_shapes())
        for name, shape in manifest:
            if name not in current or current[name] != shape:
                raise CheckpointError(f"shape mismatch in layer '{name}': checkpoint {shape}, "
                                      f"current architecture {current.get(name)}")
        if len(current) != len(manifest):
            raise CheckpointError("checkpoint and current architecture have different layer sets")

    count = sum(int(np.prod(s)) for _, s in manifest)
    has_opt = header.get("optimizer") is not None
    expected_floats = count * (3 if has_opt else 1)
    payload = data[5 + n:]
    if len(payload) != 4 * expected_floats:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest needs {4 * expected_floats}")
    flat = np.frombuffer(payload, dtype=_LE_F32)

    tensors, offset = {}, 0
    arrays = []
    for name, shape in manifest:
        size = int(np.prod(shape))
        arrays.append((name, flat[offset:offset + size].reshape(shape)))
        offset += size
    for name, arr in arrays:
        tensors[name] = Tensor(arr.astype(ad.get_default_dtype()), requires_grad=True, name=name)
    params = PolicyParameters(cfg, tensors)

    opt_state = None
    if has_opt:
        ms, vs = [], []
        for bucket in (ms, vs):
            for _, shape in manifest:
                size = int(np.prod(shape))
                bucket.append(flat[offset:offset + size].reshape(shape).astype(np.float32))
                offset += size
        opt_state = {"t": header["optimizer"]["t"], "m": ms, "v": vs}

    return Checkpoint(params, opt_state, header.get("run_config", {}), header.get("episode", 0),
                      header.get("updates", 0), header.get("rng_state"),
                      [_record_from_list(v) for v in header.get("records", [])])
