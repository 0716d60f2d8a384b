"""Model checkpoint file format.

Layout (all integers little-endian u32):

    magic   5 bytes  b"CVVTW"
    version u32      format version, currently 1
    clen    u32      byte length of the config block
    config  clen     utf-8 ``key=value`` lines describing the model config
    then, repeated until end of file:
        nlen    u32      byte length of the tensor name
        name    nlen     utf-8 dotted state path (e.g. "blocks.0.mlp...")
        rank    u32
        extents rank*u32
        data    prod(extents) little-endian float32

Save/load round-trips are bitwise exact for float32 state.
"""

import struct

import numpy as np

from .model import ModelConfig, build_model

MAGIC = b"CVVTW"
VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed or truncated."""


def _encode_config(config):
    flat = config.to_flat()
    text = "".join(f"{k}={flat[k]}\n" for k in sorted(flat))
    return text.encode("utf-8")


def _decode_config(blob):
    flat = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    try:
        return ModelConfig.from_flat(flat)
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"checkpoint config invalid: {e}") from e


def save_checkpoint(path, model):
    """Write a model's config and complete state (including the running
    batch-norm statistics) to ``path``."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = _encode_config(model.config)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, tensor in model.named_states():
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} "
                              f"(wanted {n} bytes, got {len(data)})")
    return data


def read_checkpoint(path):
    """Parse a checkpoint into (ModelConfig, {name: float32 array})."""
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint "
                                  f"(bad magic)")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version "
                                  f"{version} (expected {VERSION})")
        clen = struct.unpack("<I", _read_exact(f, 4, "config length"))[0]
        config = _decode_config(_read_exact(f, clen, "config"))
        state = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint at tensor name")
            nlen = struct.unpack("<I", head)[0]
            name = _read_exact(f, nlen, "tensor name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(f, 4, "rank"))[0]
            shape = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(f, 4 * count, f"tensor {name!r} data")
            state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape) \
                .astype(np.float32)
        return config, state


def load_checkpoint(path, seed=0):
    """Rebuild the saved model: construct from the stored config, then load
    every tensor (strictly — any mismatch is an error)."""
    config, state = read_checkpoint(path)
    net = build_model(config, seed=seed)
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint state does not fit the stored "
                              f"config: {e}") from e
    return net
