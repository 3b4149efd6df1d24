"""Self-describing checkpoint container.

A checkpoint is a zip archive readable by ``numpy.load``: one ``.npy``
member per named float64 array plus a ``__meta__.json`` member holding a
JSON object.  Every member gets the fixed 1980-01-01 timestamp, so equal
contents give byte-identical files.

``meta["format"]`` is always ``"pmol-checkpoint"`` and ``meta["version"]``
the container version.  ``meta["kind"]`` is one of:

``backbone``
    arrays ``backbone.<param>``; ``meta["backbone"]`` is the config.
``adapters``
    arrays ``adapters.<layer>.experts.<k>.A|B`` and
    ``adapters.<layer>.router.W|bias``; ``meta["groups"]`` is the expert
    group table (ranges and sc coefficients).
``train``
    the adapter arrays plus ``adam.m.<name>`` / ``adam.v.<name>`` moments,
    with ``meta["step"]``, ``meta["adam_t"]``, ``meta["config"]`` and
    ``meta["config_hash"]``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .adapter import ExpertGroupTable, LoraExpert, PmolLayer, Router, stack_experts
from .backbone import BackboneConfig, BackboneParams
from .numcore import Tensor

FORMAT = "pmol-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(IOError):
    pass


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    meta = {"format": FORMAT, "version": VERSION, **meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("__meta__.json", _EPOCH),
                    json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name], dtype=np.float64),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", _EPOCH), buf.getvalue())
    tmp.replace(path)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as err:
        raise CheckpointError(f"cannot open checkpoint {path}: {err}") from None
    with zf:
        try:
            meta = json.loads(zf.read("__meta__.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no __meta__.json") from None
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"{path} is not a {FORMAT} file")
        if meta.get("version", 0) > VERSION:
            raise CheckpointError(f"{path} has newer container version {meta['version']}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays


def backbone_arrays(params: BackboneParams) -> dict[str, np.ndarray]:
    return {f"backbone.{k}": v.data for k, v in params.tensors.items()}


def save_backbone(path, params: BackboneParams) -> None:
    save_container(path, {"kind": "backbone", "backbone": params.cfg.to_dict(), "frozen": params.frozen},
                   backbone_arrays(params))


def load_backbone(path) -> BackboneParams:
    meta, arrays = load_container(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a backbone")
    cfg = BackboneConfig(**meta["backbone"])
    tensors = {k[len("backbone."):]: Tensor(v) for k, v in arrays.items() if k.startswith("backbone.")}
    params = BackboneParams(cfg, tensors)
    return params.freeze() if meta.get("frozen", True) else params.unfreeze()


def adapter_arrays(adapters: list[PmolLayer]) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(adapters):
        for name, t in layer.parameters().items():
            out[f"adapters.{i}.{name}"] = t.data
    return out


def adapters_from_arrays(arrays: dict[str, np.ndarray], groups: ExpertGroupTable,
                         n_layers: int) -> list[PmolLayer]:
    layers = []
    for i in range(n_layers):
        p = f"adapters.{i}."
        try:
            experts = [LoraExpert(Tensor(arrays[f"{p}experts.{k}.A"], requires_grad=True),
                                  Tensor(arrays[f"{p}experts.{k}.B"], requires_grad=True))
                       for k in range(groups.K)]
            router = Router(Tensor(arrays[p + "router.W"], requires_grad=True),
                            Tensor(arrays[p + "router.bias"], requires_grad=True))
        except KeyError as err:
            raise CheckpointError(f"missing array {err.args[0]}") from None
        layer = PmolLayer(experts, router, groups)
        stack_experts(layer)
        layers.append(layer)
    return layers


def save_adapters(path, adapters: list[PmolLayer]) -> None:
    groups = adapters[0].groups
    save_container(path, {"kind": "adapters", "groups": groups.to_dict(), "n_layers": len(adapters)},
                   adapter_arrays(adapters))


def load_adapters(path) -> list[PmolLayer]:
    meta, arrays = load_container(path)
    if meta.get("kind") not in ("adapters", "train"):
        raise CheckpointError(f"{path} holds no adapters")
    return adapters_from_arrays(arrays, ExpertGroupTable.from_dict(meta["groups"]), meta["n_layers"])
