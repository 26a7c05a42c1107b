"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic  b"BSFF"
    bytes 4..7    format version, uint32 (currently 1)
    bytes 8..15   header length in bytes, uint64
    header        UTF-8 JSON: net spec, seed, epoch cursor, and an ordered
                  array table [{name, dtype, shape, offset, nbytes}, ...]
    payload       raw array bytes, little-endian, in table order

Arrays cover every kernel bank, bias, running stat, Adam moment, and the
classifier head, so a reload resumes bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import DataFormatError
from .tensor import KernelBank
from .trainer import AdamState, LayerSpec, LayerState, Model, NetSpec

MAGIC = b"BSFF"
VERSION = 1


def _array_table(model: Model):
    arrays = {}
    for li, layer in enumerate(model.layers):
        p = f"layer{li}"
        arrays[f"{p}.weights"] = layer.kernels.weights
        arrays[f"{p}.bias"] = layer.kernels.bias
        arrays[f"{p}.adam_w.m"] = layer.adam_w.m
        arrays[f"{p}.adam_w.v"] = layer.adam_w.v
        arrays[f"{p}.adam_b.m"] = layer.adam_b.m
        arrays[f"{p}.adam_b.v"] = layer.adam_b.v
        if layer.run_mu is not None:
            arrays[f"{p}.run_mu"] = layer.run_mu
            arrays[f"{p}.run_var"] = layer.run_var
    arrays["clf.w"] = model.clf_w
    arrays["clf.b"] = model.clf_b
    return arrays


def save_model(path, model: Model):
    arrays = _array_table(model)
    table = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "net": {
            "in_channels": model.net.in_channels,
            "image_hw": list(model.net.image_hw),
            "ncat": model.net.ncat,
            "layers": [asdict(l) for l in model.net.layers],
        },
        "seed": model.seed,
        "epoch": model.epoch,
        "adam_t": [[l.adam_w.t, l.adam_b.t] for l in model.layers],
        "frozen": [l.frozen for l in model.layers],
        "arrays": table,
    }
    hjson = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for blob in blobs:
            f.write(blob)


def load_model(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode())
    payload = raw[16 + hlen:]

    def fetch(entry):
        a = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]).newbyteorder("<"),
                          count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
                          offset=entry["offset"])
        return a.reshape(entry["shape"]).copy()

    table = {e["name"]: e for e in header["arrays"]}
    netinfo = header["net"]
    net = NetSpec(netinfo["in_channels"], tuple(netinfo["image_hw"]),
                  netinfo["ncat"], [LayerSpec(**l) for l in netinfo["layers"]])
    layers = []
    for li in range(len(net.layers)):
        p = f"layer{li}"
        kern = KernelBank(fetch(table[f"{p}.weights"]), fetch(table[f"{p}.bias"]),
                          net.layers[li].groups)
        aw = AdamState(fetch(table[f"{p}.adam_w.m"]), fetch(table[f"{p}.adam_w.v"]),
                       header["adam_t"][li][0])
        ab = AdamState(fetch(table[f"{p}.adam_b.m"]), fetch(table[f"{p}.adam_b.v"]),
                       header["adam_t"][li][1])
        state = LayerState(net.layers[li], kern, aw, ab,
                           frozen=header["frozen"][li])
        if f"{p}.run_mu" in table:
            state.run_mu = fetch(table[f"{p}.run_mu"])
            state.run_var = fetch(table[f"{p}.run_var"])
        layers.append(state)
    model = Model(net, layers, fetch(table["clf.w"]), fetch(table["clf.b"]),
                  header["seed"], header["epoch"])
    return model
