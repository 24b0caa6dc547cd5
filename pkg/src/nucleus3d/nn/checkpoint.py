"""Model checkpoints: text header followed by a little-endian f64 payload.

Layout::

    NUCLEUS3D-CHECKPOINT
    version=1
    model=<kind>
    config.<key>=<value>          (zero or more)
    layer <description>           (one per layer, declaration order)
    param <name> <d0,d1,...>      (parameters, then buffers, payload order)
    buffer <name> <d0,d1,...>
    end
    <raw float64 payload>
"""
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .modules import layer_specs

MAGIC = "NUCLEUS3D-CHECKPOINT"
VERSION = 1


def save(model, path, kind, config):
    lines = [MAGIC, f"version={VERSION}", f"model={kind}"]
    lines += [f"config.{k}={v}" for k, v in config.items()]
    lines += [f"layer {s}" for s in layer_specs(model)]
    arrays = []
    for tag, items in (("param", ((n, p.data) for n, p in model.named_parameters())),
                       ("buffer", model.named_buffers())):
        for name, arr in items:
            lines.append(f"{tag} {name} {','.join(str(s) for s in arr.shape)}")
            arrays.append(np.asarray(arr, dtype="<f8").ravel())
    lines.append("end")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for a in arrays:
            fh.write(a.tobytes())


def read_header(path):
    """Return (kind, config dict, [(tag, name, shape)], payload offset)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise FormatError(f"{path}: not a checkpoint")
    lines = raw[:end].decode().split("\n")
    kind, config, entries, version = None, {}, [], None
    for line in lines[1:]:
        if line.startswith("version="):
            version = int(line.split("=", 1)[1])
        elif line.startswith("model="):
            kind = line.split("=", 1)[1]
        elif line.startswith("config."):
            k, _, v = line[len("config."):].partition("=")
            config[k] = v
        elif line.startswith(("param ", "buffer ")):
            tag, name, shape = line.split(" ")
            entries.append((tag, name, tuple(int(s) for s in shape.split(",") if s)))
    if version is None:
        raise FormatError(f"{path}: missing version tag")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    return kind, config, entries, end + len(b"\nend\n")


def load_into(model, path):
    kind, config, entries, offset = read_header(path)
    payload = np.frombuffer(Path(path).read_bytes()[offset:], dtype="<f8")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = [("param", n, p.shape) for n, p in params.items()]
    expected += [("buffer", n, b.shape) for n, b in buffers.items()]
    if [(t, n, tuple(s)) for t, n, s in expected] != entries:
        raise FormatError(f"{path}: parameter layout does not match the model")
    pos = 0
    for tag, name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        chunk = payload[pos:pos + size]
        if chunk.size != size:
            raise FormatError(f"{path}: payload truncated at {name}")
        target = params[name].data if tag == "param" else buffers[name]
        target[...] = chunk.reshape(shape)
        pos += size
    if pos != payload.size:
        raise FormatError(f"{path}: {payload.size - pos} trailing payload values")
    return kind, config
