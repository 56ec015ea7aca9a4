"""PRCK checkpoint container (little-endian).

Layout: magic "PRCK" | u32 version=1 | u32 n_tensors, then per tensor
u16 name length | UTF-8 name | u8 dtype (1=f32, 2=f64, 3=complex-f64
interleaved) | u8 ndim | u32 dims... | raw payload.

Spectral weights are held in parameter dicts as (..., 2) float64 arrays;
they are written as complex tensors (dtype 3) whose payload bytes are
identical, so round trips are bitwise. Model configuration and the
preconditioning state travel as scalar f64 tensors under "config.*" and
"precond.*" names.
"""
from __future__ import annotations

import struct

import numpy as np

from .denoiser import Denoiser, DenoiserConfig

_MAGIC = b"PRCK"
_HEAD = struct.Struct("<4sII")

_DT_F32, _DT_F64, _DT_C128 = 1, 2, 3
_NP_OF = {_DT_F32: np.dtype("<f4"), _DT_F64: np.dtype("<f8"), _DT_C128: np.dtype("<c16")}


class CheckpointError(Exception):
    pass


def write_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, 1, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype == np.float32:
                code = _DT_F32
            elif arr.dtype == np.float64:
                code = _DT_F64
            elif arr.dtype == np.complex128:
                code = _DT_C128
            else:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_NP_OF[code]).tobytes())


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, n_tensors = _HEAD.unpack(head)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != 1:
            raise CheckpointError(f"{path}: unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            if code not in _NP_OF:
                raise CheckpointError(f"{path}: {name}: unknown dtype code {code}")
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            np_dtype = _NP_OF[code]
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            payload = fh.read(count * np_dtype.itemsize)
            if len(payload) < count * np_dtype.itemsize:
                raise CheckpointError(f"{path}: {name}: truncated payload")
            out[name] = np.frombuffer(payload, dtype=np_dtype).reshape(dims).copy()
    return out


_ENUMS = {
    "sra_mode": ("off", "concat", "sra"),
    "gate_mode": ("skip_gate", "multiplicative", "none"),
    "attention_mode": ("phase_aware", "magnitude_only"),
    "lift_mode": ("conv", "broadcast"),
}

_SPECTRAL_SUFFIX = ".spectral.w"


def _param_tensors(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in params.items():
        if name.endswith(_SPECTRAL_SUFFIX):
            cplx = np.ascontiguousarray(arr).view(np.complex128)[..., 0]
            out[f"param.{name}"] = cplx
        else:
            out[f"param.{name}"] = arr
    return out


def save_model(path: str, model: Denoiser, extra: dict[str, np.ndarray] | None = None) -> None:
    cfg = model.config
    tensors = _param_tensors(model.params)
    tensors["precond.sigma_data"] = np.asarray(model.sigma_data, dtype=float)
    tensors["precond.residual_scale"] = np.asarray([model.residual_scale], dtype=float)
    tensors["config.levels"] = np.asarray([cfg.levels], dtype=float)
    tensors["config.channels"] = np.asarray(cfg.channels, dtype=float)
    tensors["config.modes"] = np.asarray(cfg.modes, dtype=float)
    tensors["config.embed_dim"] = np.asarray([cfg.embed_dim], dtype=float)
    tensors["config.dropout"] = np.asarray([cfg.dropout], dtype=float)
    tensors["config.sigma_min"] = np.asarray([cfg.sigma_min], dtype=float)
    tensors["config.sigma_max"] = np.asarray([cfg.sigma_max], dtype=float)
    for key, values in _ENUMS.items():
        tensors[f"config.{key}"] = np.asarray([values.index(getattr(cfg, key))], dtype=float)
    if extra:
        tensors.update(extra)
    write_checkpoint(path, tensors)


def load_model(path: str) -> tuple[Denoiser, dict[str, np.ndarray]]:
    """Returns (model, leftover tensors not consumed by the model)."""
    tensors = read_checkpoint(path)

    def pop1(name):
        return float(tensors.pop(name)[0])

    cfg = DenoiserConfig(
        levels=int(pop1("config.levels")),
        channels=tuple(int(c) for c in tensors.pop("config.channels")),
        modes=tuple(int(m) for m in tensors.pop("config.modes")),
        embed_dim=int(pop1("config.embed_dim")),
        dropout=pop1("config.dropout"),
        sigma_min=pop1("config.sigma_min"),
        sigma_max=pop1("config.sigma_max"),
        **{key: _ENUMS[key][int(pop1(f"config.{key}"))] for key in _ENUMS},
    )
    params: dict[str, np.ndarray] = {}
    for name in [n for n in tensors if n.startswith("param.")]:
        arr = tensors.pop(name)
        pname = name[len("param.") :]
        if pname.endswith(_SPECTRAL_SUFFIX):
            arr = np.ascontiguousarray(arr)
            params[pname] = arr.view(np.float64).reshape(arr.shape + (2,))
        else:
            params[pname] = arr
    model = Denoiser(cfg, params=params)
    model.sigma_data = tensors.pop("precond.sigma_data")
    model.residual_scale = float(tensors.pop("precond.residual_scale")[0])
    return model, tensors
