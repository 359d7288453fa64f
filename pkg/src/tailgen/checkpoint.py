"""Text checkpoints for flows and tail generators.

A checkpoint is a JSON document::

    {"format": "tailgen-checkpoint", "version": 1, "type": "flow" | "tail",
     "dim": 2, "layer_count": 6, "architecture": {...}, "meta": {...},
     "layers": [{"index": 0, "mask": [1, 0], "params": {name: {"shape": [...], "values": [...]}}}],
     "extra_params": {...}}

Floats are written with 17 significant digits, so a save/load round trip is
bit-exact. ``layers`` holds the coupling stack (empty for plain MLP tails);
``extra_params`` holds everything else (e.g. a tail's feed-forward head).
"""
import json
import math

import numpy as np
import torch

from .errors import ConfigError, FormatError
from .flow import DTYPE, FlowModel
from .tail import TailNet

FORMAT = "tailgen-checkpoint"
VERSION = 1


def _num(v):
    v = float(v)
    if not math.isfinite(v):
        raise FormatError(f"refusing to write non-finite parameter {v}")
    return f"{v:.17g}"


def _array_json(a):
    a = np.asarray(a, dtype=np.float64)
    vals = ", ".join(_num(v) for v in a.ravel())
    return '{"shape": %s, "values": [%s]}' % (json.dumps(list(a.shape)), vals)


def _params_json(named, indent):
    pad = " " * indent
    items = [f'{pad}  {json.dumps(k)}: {_array_json(v.detach().numpy())}' for k, v in named]
    if not items:
        return "{}"
    return "{\n" + ",\n".join(items) + f"\n{pad}}}"


def dumps(kind, dim, architecture, flow=None, extra=(), meta=None):
    layers = []
    if flow is not None:
        for idx, layer in enumerate(flow.layers):
            named = [(k, v) for k, v in layer.state_dict().items() if k != "mask"]
            mask = json.dumps([int(m) for m in layer.mask.tolist()])
            layers.append('    {"index": %d, "mask": %s, "params": %s}' % (idx, mask, _params_json(named, 4)))
    head = {
        "format": FORMAT,
        "version": VERSION,
        "type": kind,
        "dim": dim,
        "layer_count": len(layers),
        "architecture": architecture,
        "meta": meta or {},
    }
    body = json.dumps(head, indent=2, sort_keys=True)[:-2]
    body += ',\n  "layers": [\n' + ",\n".join(layers) + "\n  ],\n"
    body += '  "extra_params": ' + _params_json(list(extra), 2) + "\n}\n"
    return body


def _tensor(entry, where):
    try:
        shape = tuple(int(s) for s in entry["shape"])
        vals = np.array(entry["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad parameter array at {where}: {exc}") from exc
    if vals.size != int(np.prod(shape)):
        raise FormatError(f"parameter {where}: {vals.size} values for shape {shape}")
    return torch.from_numpy(vals.reshape(shape)).to(DTYPE)


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise FormatError("not a tailgen checkpoint")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}")
    for key in ("type", "dim", "layer_count", "architecture", "layers", "extra_params"):
        if key not in doc:
            raise FormatError(f"checkpoint is missing field {key!r}")
    if len(doc["layers"]) != doc["layer_count"]:
        raise FormatError("layer_count does not match the number of layers")
    return doc


def _load_stack(flow, layers):
    for idx, (layer, rec) in enumerate(zip(flow.layers, layers)):
        if [int(m) for m in layer.mask.tolist()] != [int(m) for m in rec["mask"]]:
            raise FormatError(f"layer {idx}: mask does not match the alternating layout")
        state = {k: _tensor(v, f"layer {idx}.{k}") for k, v in rec["params"].items()}
        state["mask"] = layer.mask
        try:
            layer.load_state_dict(state)
        except RuntimeError as exc:
            raise FormatError(f"layer {idx}: {exc}") from exc


def save_flow(path, model, meta=None):
    arch = {"n_layers": model.n_layers, "hidden": model.hidden, "max_log_scale": model.max_log_scale}
    with open(path, "w") as fh:
        fh.write(dumps("flow", model.dim, arch, flow=model, meta=meta))


def load_flow(path):
    """Returns ``(model, meta)``."""
    doc = _read(path)
    if doc["type"] != "flow":
        raise FormatError(f"{path}: expected a flow checkpoint, found type {doc['type']!r}")
    a = doc["architecture"]
    model = FlowModel(doc["dim"], a["n_layers"], a["hidden"], a["max_log_scale"])
    if model.n_layers != doc["layer_count"]:
        raise FormatError(f"{path}: architecture says {a['n_layers']} layers, file has {doc['layer_count']}")
    _load_stack(model, doc["layers"])
    return model, doc["meta"]


def save_tail(path, tail, meta=None):
    extra = list(tail.head.state_dict().items()) if tail.head is not None else []
    with open(path, "w") as fh:
        fh.write(dumps("tail", tail.dim, tail.spec(), flow=tail.flow, extra=extra, meta=meta))


def load_tail(path):
    """Returns ``(tail, meta)``."""
    doc = _read(path)
    if doc["type"] != "tail":
        raise FormatError(f"{path}: expected a tail checkpoint, found type {doc['type']!r}")
    a = dict(doc["architecture"])
    try:
        tail = TailNet(a.pop("dim", doc["dim"]), **a)
    except (ConfigError, TypeError) as exc:
        raise FormatError(f"{path}: bad tail architecture: {exc}") from exc
    if tail.flow is not None:
        if tail.flow.n_layers != doc["layer_count"]:
            raise FormatError(f"{path}: layer count mismatch")
        _load_stack(tail.flow, doc["layers"])
    elif doc["layer_count"]:
        raise FormatError(f"{path}: {tail.arch} tail cannot carry coupling layers")
    if tail.head is not None:
        state = {k: _tensor(v, k) for k, v in doc["extra_params"].items()}
        try:
            tail.head.load_state_dict(state)
        except RuntimeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return tail, doc["meta"]


def _read(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(text)
