#!/usr/bin/env python3
"""Convert a torchvision AlexNet state_dict into a hyperdys weights file.

    python tools/convert_alexnet.py alexnet-owt-7be5be79.pth alexnet.hwts

Fully connected weights are transposed to [in, out]. classifier.6 (the 1000-way
ImageNet layer) is dropped; the projection layer keeps its seeded init.
"""

import argparse
import struct
import sys
import zlib

import numpy as np

KEEP = [
    "features.0", "features.3", "features.6", "features.8", "features.10",
    "classifier.1", "classifier.4",
]

SHAPES = {
    "features.0.weight": (64, 3, 11, 11),
    "features.3.weight": (192, 64, 5, 5),
    "features.6.weight": (384, 192, 3, 3),
    "features.8.weight": (256, 384, 3, 3),
    "features.10.weight": (256, 256, 3, 3),
    "classifier.1.weight": (4096, 9216),
    "classifier.4.weight": (4096, 4096),
}


def encode(tensors):
    out = bytearray(b"HWTS")
    out += struct.pack("<II", 1, len(tensors))
    for name, array in tensors:
        array = np.ascontiguousarray(array, dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", array.ndim)
        out += struct.pack("<%dI" % array.ndim, *array.shape)
        out += array.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def convert(state):
    tensors = []
    for layer in KEEP:
        weight = np.asarray(state[layer + ".weight"], dtype=np.float32)
        bias = np.asarray(state[layer + ".bias"], dtype=np.float32)
        expected = SHAPES[layer + ".weight"]
        if weight.shape != expected:
            raise ValueError("%s.weight has shape %s, expected %s" % (layer, weight.shape, expected))
        if layer.startswith("classifier"):
            weight = weight.T
        tensors.append((layer + ".weight", weight))
        tensors.append((layer + ".bias", bias))
    return encode(tensors)


def load_state(path):
    if path.endswith(".npz"):
        return dict(np.load(path))
    import torch

    state = torch.load(path, map_location="cpu")
    if "state_dict" in state:
        state = state["state_dict"]
    return {k: v.numpy() for k, v in state.items()}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", help="torchvision .pth state_dict or .npz with the same keys")
    parser.add_argument("output", help="destination .hwts file")
    args = parser.parse_args(argv)
    data = convert(load_state(args.source))
    with open(args.output, "wb") as f:
        f.write(data)
    print("wrote %s (%d bytes)" % (args.output, len(data)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
