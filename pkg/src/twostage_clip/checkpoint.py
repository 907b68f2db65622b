"""Checkpoint bundles: a directory with ``manifest.txt`` plus one tensor file each.

Manifest lines are ``key=value``. Config fields appear as ``image.<field>``
and ``text.<field>``, free-form trainer metadata as ``meta.<key>``, and every
stored tensor as ``tensor.<relative path>=<comma separated dims>``; the
tensor itself lives at ``<relative path>.dtw`` in the binary tensor format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncoderConfig, TwoTowerModel
from .tensor import BatchNormState, Tensor, TensorFormatError, load_tensor, save_tensor

SCHEMA_VERSION = "1"
MANIFEST = "manifest.txt"


class CheckpointError(IOError):
    pass


@dataclass
class Bundle:
    image_config: EncoderConfig
    text_config: EncoderConfig
    params: dict[str, np.ndarray]
    bn_states: dict[str, BatchNormState]
    moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def to_model(self) -> TwoTowerModel:
        params = {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in self.params.items()}
        states = {n: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum,
                                    s.update_stats, s.eps)
                  for n, s in self.bn_states.items()}
        return TwoTowerModel(self.image_config, self.text_config, params, states)


def _dims(shape) -> str:
    return ",".join(str(d) for d in shape)


def save_bundle(path, model: TwoTowerModel, moments=None, meta=None, dtype: str = "f64") -> Path:
    """Write `model` (and optional optimizer `moments`) to directory `path`.

    `moments` maps parameter name to ``(first, second, step_count)``.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"schema_version={SCHEMA_VERSION}", f"dtype={dtype}"]
    lines += [f"image.{k}={v}" for k, v in model.image_config.to_items().items()]
    lines += [f"text.{k}={v}" for k, v in model.text_config.to_items().items()]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={v}")

    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in model.params.items():
        arrays.append((f"params/{name}", p.data))
    for name, s in model.bn_states.items():
        arrays.append((f"buffers/{name}.running_mean", s.running_mean))
        arrays.append((f"buffers/{name}.running_var", s.running_var))
        lines.append(f"bn.{name}.momentum={s.momentum!r}")
        lines.append(f"bn.{name}.eps={s.eps!r}")
    for name, (m, v, steps) in (moments or {}).items():
        arrays.append((f"optim/m/{name}", m))
        arrays.append((f"optim/v/{name}", v))
        lines.append(f"optim.steps.{name}={steps}")

    for rel, arr in arrays:
        lines.append(f"tensor.{rel}={_dims(arr.shape)}")
        target = root / f"{rel}.dtw"
        target.parent.mkdir(parents=True, exist_ok=True)
        stored = dtype if rel.startswith("params/") else "f64"
        save_tensor(target, arr, stored)
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def read_manifest(path) -> dict[str, str]:
    manifest = Path(path) / MANIFEST
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read {manifest}: {exc}") from exc
    items = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{manifest}: malformed line {line!r}")
        items[key] = value
    if items.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{manifest}: unsupported schema {items.get('schema_version')!r}")
    return items


def load_bundle(path) -> Bundle:
    root = Path(path)
    items = read_manifest(root)

    def section(prefix):
        return {k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)}

    image_cfg = EncoderConfig.from_items(section("image."))
    text_cfg = EncoderConfig.from_items(section("text."))
    arrays = {}
    for rel, dims in section("tensor.").items():
        try:
            arr = load_tensor(root / f"{rel}.dtw")
        except (OSError, TensorFormatError) as exc:
            raise CheckpointError(f"{root / rel}.dtw: {exc}") from exc
        expected = tuple(int(d) for d in dims.split(",")) if dims else ()
        if arr.shape != expected:
            raise CheckpointError(f"{rel}: manifest says {expected}, file holds {arr.shape}")
        arrays[rel] = arr

    params = {k[len("params/"):]: a for k, a in arrays.items() if k.startswith("params/")}
    bn_states = {}
    for key in arrays:
        if key.startswith("buffers/") and key.endswith(".running_mean"):
            name = key[len("buffers/"):-len(".running_mean")]
            bn_states[name] = BatchNormState(
                arrays[key], arrays[f"buffers/{name}.running_var"],
                momentum=float(items.get(f"bn.{name}.momentum", 0.1)),
                eps=float(items.get(f"bn.{name}.eps", 1e-5)),
            )
    moments = {}
    for name, steps in section("optim.steps.").items():
        moments[name] = (arrays[f"optim/m/{name}"], arrays[f"optim/v/{name}"], int(steps))
    return Bundle(image_cfg, text_cfg, params, bn_states, moments, section("meta."))
