"""Binary checkpoint container.

Layout (all integers little-endian, documented in docs/checkpoint_format.md):

    8 bytes   magic ``MINRCKP1``
    u32       format version
    u64       header length in bytes
    ...       UTF-8 JSON header: configs, seed, epoch, metric history, and
              the ordered section table (name + shape per array)
    sections  for each array, in header order:
                  u32 name length, name bytes,
                  u64 payload length, raw little-endian float64 data

A round trip reproduces every array bitwise. Loading validates the magic,
version, section names, and exact lengths; any mismatch raises
:class:`FormatError` naming the offending section, and no partial state is
returned.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .errors import FormatError
from .model import (
    CRFBundle,
    HyperNetParams,
    MappingNetParams,
    ModelConfig,
    ModelParams,
)
from .trainer import CHECKPOINT_FORMAT_VERSION, Checkpoint, TrainConfig

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC"]

MAGIC = b"MINRCKP1"


def _crf_arrays(crf: CRFBundle):
    for k, arr in enumerate(crf.input_bases):
        yield f"crf.input_bases.{k}", arr
    for i, arr in enumerate(crf.layer_bases):
        yield f"crf.layer_bases.{i}", arr
    for i, arr in enumerate(crf.layer_proj):
        yield f"crf.layer_proj.{i}", arr


def _all_sections(params: ModelParams):
    yield from params.named_arrays()
    yield from _crf_arrays(params.crf)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections = list(_all_sections(ckpt.params))
    header = {
        "format_version": ckpt.format_version,
        "train_config": asdict(ckpt.train_config),
        "seed": ckpt.params.seed,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "sections": [
            {"name": name, "shape": list(arr.shape)} for name, arr in sections
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.format_version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in sections:
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated in {what}")
    return data


def _tupled(d: dict, keys: tuple[str, ...]) -> dict:
    return {k: tuple(v) if k in keys else v for k, v in d.items()}


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = ModelConfig(
        **_tupled(d.pop("model"), ("input_scales", "layer_scales", "axis_dims"))
    )
    return TrainConfig(model=model, **d)


def _assemble_params(
    config: ModelConfig, seed: int, arrays: dict[str, np.ndarray]
) -> ModelParams:
    def mapping(prefix: str) -> MappingNetParams:
        return MappingNetParams(
            w_in=arrays[f"{prefix}.w_in"],
            b_in=arrays[f"{prefix}.b_in"],
            w_hid=[arrays[f"{prefix}.w_hid.{i}"] for i in range(config.layers)],
            b_hid=[arrays[f"{prefix}.b_hid.{i}"] for i in range(config.layers)],
            w_out=[arrays[f"{prefix}.w_out.{i}"] for i in range(config.layers)],
            b_out=[arrays[f"{prefix}.b_out.{i}"] for i in range(config.layers)],
            w_final=arrays[f"{prefix}.w_final"],
            b_final=arrays[f"{prefix}.b_final"],
        )

    def hyper(prefix: str) -> HyperNetParams:
        return HyperNetParams(
            w=[arrays[f"{prefix}.w.{i}"] for i in range(config.layers + 1)],
            b=[arrays[f"{prefix}.b.{i}"] for i in range(config.layers + 1)],
        )

    crf = CRFBundle(
        input_scales=tuple(config.input_scales),
        input_bases=[
            arrays[f"crf.input_bases.{k}"] for k in range(len(config.input_scales))
        ],
        layer_scales=tuple(config.layer_scales),
        layer_bases=[arrays[f"crf.layer_bases.{i}"] for i in range(config.layers)],
        layer_proj=[arrays[f"crf.layer_proj.{i}"] for i in range(config.layers)],
        seed=seed,
    )
    return ModelParams(
        config=config,
        crf=crf,
        axis1=mapping("axis1"),
        axis2=mapping("axis2"),
        hyper1=hyper("hyper1"),
        hyper2=hyper("hyper2"),
        core=arrays["core"],
        seed=seed,
    )


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(
                f"unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_FORMAT_VERSION})"
            )
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint header: {exc}") from None
        try:
            train_config = _train_config_from_dict(header["train_config"])
            seed = int(header["seed"])
            epoch = int(header["epoch"])
            history = list(header["history"])
            section_table = header["sections"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint header is missing field {exc}") from None

        arrays: dict[str, np.ndarray] = {}
        for entry in section_table:
            name, shape = entry["name"], tuple(entry["shape"])
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"section {name}"))
            try:
                stored = _read_exact(fh, name_len, f"section {name}").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"section {name}: corrupt name bytes") from None
            if stored != name:
                raise FormatError(
                    f"section name mismatch: header says {name!r}, file says {stored!r}"
                )
            (n_bytes,) = struct.unpack("<Q", _read_exact(fh, 8, f"section {name}"))
            expected = int(np.prod(shape, dtype=np.int64)) * 8
            if n_bytes != expected:
                raise FormatError(
                    f"section {name}: payload of {n_bytes} bytes, expected {expected}"
                )
            payload = _read_exact(fh, n_bytes, f"section {name}")
            arrays[name] = (
                np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            )
        if fh.read(1):
            raise FormatError("trailing bytes after the last section")

    params = _assemble_params(train_config.model, seed, arrays)
    return Checkpoint(
        train_config=train_config,
        params=params,
        epoch=epoch,
        history=history,
        format_version=version,
    )
