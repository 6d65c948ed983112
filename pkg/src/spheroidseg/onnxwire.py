"""
Minimal ONNX protobuf reader/writer.

Only what the toolkit needs: read the graph input/output signature of a model
file, and write small float32 graphs (the synthetic demo model).  Field
numbers follow ``onnx.proto``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = ["TensorInfo", "read_signature", "Node", "encode_model"]

Dim = Union[int, str, None]

_FLOAT = 1  # TensorProto.DataType.FLOAT
_ATTR_INT, _ATTR_FLOAT, _ATTR_INTS = 2, 1, 7


# ---------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------
def _varint(v: int) -> bytes:
    if v < 0:
        v += 1 << 64
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _key(field: int, wire: int) -> bytes:
    return _varint((field << 3) | wire)


def _int(field: int, v: int) -> bytes:
    return _key(field, 0) + _varint(int(v))


def _bytes(field: int, b: bytes) -> bytes:
    return _key(field, 2) + _varint(len(b)) + b


def _str(field: int, s: str) -> bytes:
    return _bytes(field, s.encode())


def _float(field: int, v: float) -> bytes:
    return _key(field, 5) + struct.pack("<f", v)


def _fields(buf: bytes) -> Iterator[Tuple[int, int, Union[int, bytes]]]:
    i = 0
    n = len(buf)
    while i < n:
        key, i = _read_varint(buf, i)
        field, wire = key >> 3, key & 7
        if wire == 0:
            val, i = _read_varint(buf, i)
        elif wire == 1:
            val, i = buf[i : i + 8], i + 8
        elif wire == 2:
            ln, i = _read_varint(buf, i)
            val, i = buf[i : i + ln], i + ln
        elif wire == 5:
            val, i = buf[i : i + 4], i + 4
        else:
            raise ValueError(f"unsupported protobuf wire type {wire}")
        yield field, wire, val


def _read_varint(buf: bytes, i: int) -> Tuple[int, int]:
    shift = result = 0
    while True:
        b = buf[i]
        i += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, i
        shift += 7


# ---------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class TensorInfo:
    name: str
    elem_type: int
    shape: Tuple[Dim, ...]


def _value_info(buf: bytes) -> TensorInfo:
    name, elem, dims = "", 0, []
    for f, _, v in _fields(buf):
        if f == 1:
            name = v.decode()
        elif f == 2:
            for tf, _, tv in _fields(v):
                if tf != 1:  # only tensor_type is of interest
                    continue
                for ttf, _, ttv in _fields(tv):
                    if ttf == 1:
                        elem = ttv
                    elif ttf == 2:
                        for sf, _, sv in _fields(ttv):
                            if sf != 1:
                                continue
                            d: Dim = None
                            for df, _, dv in _fields(sv):
                                if df == 1:
                                    d = int(dv)
                                elif df == 2:
                                    d = dv.decode()
                            dims.append(d)
    return TensorInfo(name, elem, tuple(dims))


def read_signature(path) -> Tuple[List[TensorInfo], List[TensorInfo]]:
    """Graph inputs (initializers excluded) and outputs of an ONNX file."""
    with open(path, "rb") as fh:
        data = fh.read()
    graph = None
    for f, _, v in _fields(data):
        if f == 7:
            graph = v
    if graph is None:
        raise ValueError(f"{path}: no graph in model file")
    inputs, outputs, inits = [], [], set()
    for f, _, v in _fields(graph):
        if f == 11:
            inputs.append(_value_info(v))
        elif f == 12:
            outputs.append(_value_info(v))
        elif f == 5:
            for tf, _, tv in _fields(v):
                if tf == 8:
                    inits.add(tv.decode())
    return [i for i in inputs if i.name not in inits], outputs


# ---------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------
@dataclass
class Node:
    op_type: str
    inputs: Sequence[str]
    outputs: Sequence[str]
    attrs: Optional[Dict[str, Union[int, float, Sequence[int]]]] = None


def _attribute(name: str, value) -> bytes:
    body = _str(1, name)
    if isinstance(value, bool) or isinstance(value, (int, np.integer)):
        body += _int(3, int(value)) + _int(20, _ATTR_INT)
    elif isinstance(value, float):
        body += _float(2, value) + _int(20, _ATTR_FLOAT)
    else:
        body += b"".join(_int(8, int(x)) for x in value) + _int(20, _ATTR_INTS)
    return body


def _tensor(name: str, arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    body = b"".join(_int(1, d) for d in a.shape)
    body += _int(2, _FLOAT) + _str(8, name) + _bytes(9, a.tobytes())
    return body


def _vi(name: str, shape: Sequence[Dim]) -> bytes:
    dims = b""
    for d in shape:
        dims += _bytes(1, _int(1, d) if isinstance(d, int) else _str(2, str(d)))
    tensor_type = _int(1, _FLOAT) + _bytes(2, dims)
    return _str(1, name) + _bytes(2, _bytes(1, tensor_type))


def encode_model(
    nodes: Sequence[Node],
    initializers: Dict[str, np.ndarray],
    inputs: Dict[str, Sequence[Dim]],
    outputs: Dict[str, Sequence[Dim]],
    opset: int = 13,
    name: str = "graph",
) -> bytes:
    """Serialise a float32 graph to ONNX ``ModelProto`` bytes."""
    g = b""
    for k, n in enumerate(nodes):
        nb = b"".join(_str(1, i) for i in n.inputs)
        nb += b"".join(_str(2, o) for o in n.outputs)
        nb += _str(3, f"{n.op_type.lower()}_{k}") + _str(4, n.op_type)
        for an, av in (n.attrs or {}).items():
            nb += _bytes(5, _attribute(an, av))
        g += _bytes(1, nb)
    g += _str(2, name)
    for tn, arr in initializers.items():
        g += _bytes(5, _tensor(tn, arr))
    for vn, shape in inputs.items():
        g += _bytes(11, _vi(vn, shape))
    for vn, shape in outputs.items():
        g += _bytes(12, _vi(vn, shape))
    model = _int(1, 7) + _str(2, "spheroidseg") + _bytes(7, g)
    model += _bytes(8, _str(1, "") + _int(2, opset))
    return model
