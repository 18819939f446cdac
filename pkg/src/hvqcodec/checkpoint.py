"""Binary model checkpoints ("HVQM") and resumable training state ("HVQT").

Model file layout, little-endian::

    b"HVQM" | u16 version | u32 n | n bytes ModelConfig JSON
    | every parameter in declaration order as f32
    | per codebook: entries, ema_cluster_size, ema_embed_sum as f32
    | 32-byte SHA-256 of everything above

The trailer doubles as the model identity that archives reference.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .model import HierarchicalVQModel, ModelConfig
from .optim import Adam

MODEL_MAGIC = b"HVQM"
STATE_MAGIC = b"HVQT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(model: HierarchicalVQModel) -> list[np.ndarray]:
    arrs = [p.data for p in model.parameters()]
    for cb in model.codebooks:
        arrs += [cb.entries, cb.ema_cluster_size, cb.ema_embed_sum]
    return arrs


def model_to_bytes(model: HierarchicalVQModel) -> bytes:
    buf = io.BytesIO()
    cfg = model.config.to_json().encode()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(cfg)))
    buf.write(cfg)
    for arr in _arrays(model):
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def model_hash(model: HierarchicalVQModel) -> bytes:
    return model_to_bytes(model)[-32:]


def model_from_bytes(blob: bytes) -> HierarchicalVQModel:
    if len(blob) < 42 or blob[:4] != MODEL_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("model checkpoint hash mismatch (file corrupt)")
    version, n = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported model checkpoint version {version}")
    config = ModelConfig.from_json(body[10 : 10 + n].decode())
    model = HierarchicalVQModel(config)
    offset = 10 + n
    for arr in _arrays(model):
        nbytes = arr.size * 4
        if offset + nbytes > len(body):
            raise CheckpointError("model checkpoint truncated")
        arr[...] = np.frombuffer(body, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError("model checkpoint has trailing bytes")
    return model


def save_model(model: HierarchicalVQModel, path) -> bytes:
    blob = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob[-32:]


def load_model(path) -> HierarchicalVQModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# -- training state ------------------------------------------------------------

def state_to_bytes(model: HierarchicalVQModel, optimizer: Adam, step: int, extra: dict) -> bytes:
    """Model bytes + Adam moments + step + JSON (RNG states, config hash)."""
    mb = model_to_bytes(model)
    st = optimizer.state
    meta = json.dumps(extra, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<HQ", VERSION, len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<QQddddI", step, st.step, st.lr, st.beta1, st.beta2, st.eps, len(meta)))
    buf.write(meta)
    for arr in st.m + st.v:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def state_from_bytes(blob: bytes) -> tuple[HierarchicalVQModel, Adam, int, dict]:
    if blob[:4] != STATE_MAGIC:
        raise CheckpointError("not a training state file (bad magic)")
    version, n = struct.unpack_from("<HQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported training state version {version}")
    off = 14
    model = model_from_bytes(blob[off : off + n])
    off += n
    step, opt_step, lr, b1, b2, eps, mlen = struct.unpack_from("<QQddddI", blob, off)
    off += struct.calcsize("<QQddddI")
    extra = json.loads(blob[off : off + mlen].decode())
    off += mlen
    opt = Adam(model.parameters(), lr=lr, betas=(b1, b2), eps=eps)
    opt.state.step = opt_step
    for arr in opt.state.m + opt.state.v:
        arr[...] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape)
        off += arr.size * 4
    if off != len(blob):
        raise CheckpointError("training state has trailing bytes")
    return model, opt, step, extra
