"""Checkpoint persistence: a text manifest plus raw float64 tensor blobs.

Layout under the checkpoint directory:

    manifest.txt         format tag, config digest, tensor table
    config.txt           the full run configuration (lossless text form)
    tensors/NNNN.bin     little-endian float64, row-major, one per tensor

The model skeleton is rebuilt from the stored config, then every array is
overwritten from its blob, so a reloaded model reproduces predictions bit
for bit. Batchnorm statistics live outside the parameter dicts and are
saved as separate ``buffer.*`` tensors.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from . import nn
from .config import RunConfig, config_digest, config_to_text, load_config
from .errors import IntegrityError
from .pipeline import build_model
from .transfer import Adapter, TrainLog, TransferModel

FORMAT_TAG = "mixlink-checkpoint-1"


def _named_batchnorms(layer, prefix: str):
    """Depth-first walk yielding (dotted path, FrozenBatchNorm)."""
    if isinstance(layer, nn.FrozenBatchNorm):
        yield prefix, layer
        return
    for name, child in getattr(layer, "named_layers", ()):
        yield from _named_batchnorms(child, f"{prefix}.{name}" if prefix else name)


def _all_tensors(model: TransferModel) -> dict[str, np.ndarray]:
    """Every array inference can touch, under stable dotted names."""
    out: dict[str, np.ndarray] = {}
    for component, params in model.component_params().items():
        for name, tensor in params.items():
            out[f"{component}.{name}"] = tensor
    for root, chain in (("encoder", model.encoder.chain),
                        ("generator", model.generator)):
        for path, bn in _named_batchnorms(chain, root):
            out[f"buffer.{path}.mean"] = bn.mean
            out[f"buffer.{path}.var"] = bn.var
    if model.emb_mu is not None:
        out["buffer.embed.mu"] = model.emb_mu
        out["buffer.embed.sd"] = model.emb_sd
    return out


def save_checkpoint(dir_path: str, model: TransferModel, cfg: RunConfig) -> None:
    os.makedirs(os.path.join(dir_path, "tensors"), exist_ok=True)
    with open(os.path.join(dir_path, "config.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(config_to_text(cfg))
    tensors = _all_tensors(model)
    lines = [f"format: {FORMAT_TAG}", f"config_digest: {config_digest(cfg)}"]
    for i, name in enumerate(sorted(tensors)):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        rel = os.path.join("tensors", f"{i:04d}.bin")
        with open(os.path.join(dir_path, rel), "wb") as fh:
            fh.write(arr.astype("<f8").tobytes(order="C"))
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor: {name} {rel.replace(os.sep, '/')} {shape}")
    with open(os.path.join(dir_path, "manifest.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_manifest(dir_path: str) -> tuple[str, dict[str, tuple[str, tuple[int, ...]]]]:
    path = os.path.join(dir_path, "manifest.txt")
    digest = ""
    table: dict[str, tuple[str, tuple[int, ...]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != f"format: {FORMAT_TAG}":
        raise IntegrityError(f"{path}: not a {FORMAT_TAG} manifest")
    for line in lines[1:]:
        key, _, rest = line.partition(": ")
        if key == "config_digest":
            digest = rest
        elif key == "tensor":
            name, rel, shape_text = rest.split(" ")
            shape = tuple(int(d) for d in shape_text.split(",") if d)
            table[name] = (rel, shape)
        else:
            raise IntegrityError(f"{path}: unknown manifest entry {key!r}")
    return digest, table


def load_checkpoint(dir_path: str) -> tuple[TransferModel, RunConfig]:
    """Rebuild the model and verify the stored config digest."""
    cfg = load_config(os.path.join(dir_path, "config.txt"))
    digest, table = _read_manifest(dir_path)
    if digest != config_digest(cfg):
        raise IntegrityError(
            f"checkpoint digest {digest} does not match its config "
            f"({config_digest(cfg)})")
    model = build_model(cfg)
    if "adapter.mu_s" in table:
        mu_rel, mu_shape = table["adapter.mu_s"]
        u_rel, u_shape = table["adapter.u"]
        model.adapter = Adapter(_read_blob(dir_path, mu_rel, mu_shape),
                                _read_blob(dir_path, u_rel, u_shape))
    targets = _all_tensors(model)
    if set(table) != set(targets):
        missing = sorted(set(targets) - set(table))
        extra = sorted(set(table) - set(targets))
        raise IntegrityError(
            f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for name, (rel, shape) in table.items():
        loaded = _read_blob(dir_path, rel, shape)
        if targets[name].shape != loaded.shape:
            raise IntegrityError(
                f"tensor {name}: shape {loaded.shape} does not fit "
                f"{targets[name].shape}")
        np.copyto(targets[name], loaded)
    return model, cfg


def _read_blob(dir_path: str, rel: str, shape: tuple[int, ...]) -> np.ndarray:
    path = os.path.join(dir_path, *rel.split("/"))
    data = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise IntegrityError(
            f"{path}: {data.size} values where {expected} expected")
    return data.reshape(shape).astype(np.float64)


def write_train_log(path: str, log: TrainLog) -> None:
    """CSV with one row per epoch; delta columns cover every component."""
    delta_keys = sorted({k for r in log.epochs for k in r.param_deltas})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "target_discrepancy", "source_ce",
                         *(f"delta_{k}" for k in delta_keys)])
        for r in log.epochs:
            writer.writerow([r.epoch, repr(r.target_discrepancy),
                             repr(r.source_ce),
                             *(repr(r.param_deltas.get(k, 0.0))
                               for k in delta_keys)])
