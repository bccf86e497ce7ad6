"""Lowering of a QuantizedModel into a DDR image of 16-byte lines and a PRG1 program.

DDR layout (from ``base_addr``, every tensor padded to whole lines):

    layer{i}.weight, layer{i}.bias   for each conv/dense layer in order
    input                            staging area for the driver
    layer{i}.out                     one buffer per non-flatten layer

A bias allocation holds the int32 bias codes, padded to a line, followed by
two requantization lines (M f64, p0w, p0x, p0out i32, output bits u8).
Keeping these next to the parameters means everything a model change touches
lives in DDR and the program itself only encodes shapes and addresses.

On-chip addresses are linear inside a region: line ``L`` of a region maps to
bank ``first + L // linesPerBank`` at address ``L % linesPerBank``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .quant import QuantizedModel, QuantParams, bias_bytes, qmf_hash, weight_bytes


class CompileError(RuntimeError):
    pass


@dataclass(frozen=True)
class BankGeometry:
    bank_count: int = 34
    lines_per_bank: int = 2048
    line_bytes: int = 16
    feature_banks: int = 16
    weight_banks: int = 17
    bias_banks: int = 1

    def __post_init__(self):
        if self.feature_banks + self.weight_banks + self.bias_banks != self.bank_count:
            raise ValueError("region split must add up to the bank count")
        if min(self.feature_banks, self.weight_banks, self.bias_banks) < 1:
            raise ValueError("every region needs at least one bank")
        if self.lines_per_bank < 1 or self.line_bytes < 1 or self.lines_per_bank > 0xFFFF:
            raise ValueError("bad bank dimensions")

    def region(self, name: str) -> tuple:
        """(first bank, bank count) of 'feature', 'weight' or 'bias'."""
        if name == "feature":
            return 0, self.feature_banks
        if name == "weight":
            return self.feature_banks, self.weight_banks
        if name == "bias":
            return self.feature_banks + self.weight_banks, self.bias_banks
        raise ValueError(f"unknown region {name!r}")

    def region_of(self, bank: int) -> str:
        if bank < self.feature_banks:
            return "feature"
        if bank < self.feature_banks + self.weight_banks:
            return "weight"
        if bank < self.bank_count:
            return "bias"
        raise ValueError(f"bank {bank} out of range")

    def region_lines(self, name: str) -> int:
        return self.region(name)[1] * self.lines_per_bank

    def place(self, name: str, line: int) -> tuple:
        first, _ = self.region(name)
        return first + line // self.lines_per_bank, line % self.lines_per_bank

    def lines_for(self, nbytes: int) -> int:
        return -(-nbytes // self.line_bytes)


REQUANT = struct.Struct("<diiiB")
REQUANT_LINES = 2


@dataclass
class Allocation:
    tensor: str
    addr: int
    lines: int
    nbytes: int  # payload bytes before padding
    region: str


@dataclass
class DdrImage:
    data: bytearray
    base_addr: int
    geometry: BankGeometry
    allocations: dict  # tensor id -> Allocation, in address order
    meta: dict = field(default_factory=dict)

    def offset(self, addr: int) -> int:
        return addr - self.base_addr

    def read(self, addr: int, nbytes: int) -> bytes:
        off = self.offset(addr)
        if off < 0 or off + nbytes > len(self.data):
            raise IndexError(f"DDR access 0x{addr:x}+{nbytes} outside the image")
        return bytes(self.data[off:off + nbytes])

    def tensor_bytes(self, tensor: str) -> bytes:
        a = self.allocations[tensor]
        return self.read(a.addr, a.nbytes)

    def copy(self) -> "DdrImage":
        return DdrImage(bytearray(self.data), self.base_addr, self.geometry, dict(self.allocations),
                        json.loads(json.dumps(self.meta)))

    @property
    def input_qp(self) -> QuantParams:
        q = self.meta["input_qp"]
        return QuantParams(q["bits"], q["low"], q["high"], q["mode"])


def _bias_block(qm: QuantizedModel, i: int, geom: BankGeometry) -> bytes:
    l = qm.layers[i]
    codes = bias_bytes(l.bias)
    codes += b"\x00" * (geom.lines_for(len(codes)) * geom.line_bytes - len(codes))
    rq = REQUANT.pack(l.multiplier, l.weight_qp.zero_point, qm.in_qp(i).zero_point,
                      l.out_qp.zero_point, l.out_qp.bits)
    return codes + rq.ljust(REQUANT_LINES * geom.line_bytes, b"\x00")


def _feature_producers(qm: QuantizedModel) -> list:
    """Index of the layer whose DDR buffer holds the input of each layer (-1 = input)."""
    src, out = -1, []
    for i, l in enumerate(qm.layers):
        out.append(src)
        if l.kind != "flatten":
            src = i
    return out


def layout_parameters(qm: QuantizedModel, geom: Optional[BankGeometry] = None,
                      base_addr: int = 0x1000) -> DdrImage:
    geom = geom or BankGeometry()
    if base_addr % geom.line_bytes:
        raise CompileError("base address must be line aligned")
    chunks, allocs = [], {}
    addr = base_addr

    def put(tensor, payload, region, nbytes=None):
        nonlocal addr
        lines = max(1, geom.lines_for(len(payload)))
        if lines > geom.region_lines(region):
            raise CompileError(f"{tensor}: {lines} lines exceed the {region} region "
                               f"({geom.region_lines(region)} lines)")
        allocs[tensor] = Allocation(tensor, addr, lines, len(payload) if nbytes is None else nbytes, region)
        chunks.append(payload + b"\x00" * (lines * geom.line_bytes - len(payload)))
        addr += lines * geom.line_bytes

    for i, l in enumerate(qm.layers):
        if l.weight is None:
            continue
        put(f"layer{i}.weight", weight_bytes(l.weight), "weight")
        put(f"layer{i}.bias", _bias_block(qm, i, geom), "bias", nbytes=4 * len(l.bias))
    shapes = qm.layer_shapes()
    put("input", b"\x00" * int(np.prod(shapes[0])), "feature")
    for i, l in enumerate(qm.layers):
        if l.kind != "flatten":
            put(f"layer{i}.out", b"\x00" * int(np.prod(shapes[i + 1])), "feature")
    meta = {
        "model_hash": qmf_hash(qm),
        "input_shape": list(qm.input_shape),
        "input_qp": {"bits": qm.input_qp.bits, "low": qm.input_qp.low, "high": qm.input_qp.high,
                     "mode": qm.input_qp.mode},
        "layer_kinds": [l.kind for l in qm.layers],
    }
    return DdrImage(bytearray(b"".join(chunks)), base_addr, geom, allocs, meta)


class ParamLocation(NamedTuple):
    load_addr: int
    line: int
    byte: int


def locate_parameter(image: DdrImage, flat_index: int, layer_id: int) -> ParamLocation:
    """Byte coordinates of entry ``flat_index`` of ``concat(weights, bias)`` of a layer."""
    w = image.allocations.get(f"layer{layer_id}.weight")
    b = image.allocations.get(f"layer{layer_id}.bias")
    if w is None or b is None:
        raise KeyError(f"layer {layer_id} has no parameters in this image")
    lb = image.geometry.line_bytes
    if 0 <= flat_index < w.nbytes:
        off, alloc = flat_index, w
    elif w.nbytes <= flat_index < w.nbytes + b.nbytes // 4:
        off, alloc = 4 * (flat_index - w.nbytes), b
    else:
        raise IndexError(f"parameter index {flat_index} out of range for layer {layer_id}")
    return ParamLocation(alloc.addr, off // lb, off % lb)


# -- instructions -----------------------------------------------------------

OP_LOAD, OP_STORE, OP_CONV, OP_ALU, OP_END = 1, 2, 3, 4, 5
ALU_RELU, ALU_MAXPOOL = 1, 2
RECORD_BYTES = 24


@dataclass(frozen=True)
class Load:
    ddr_addr: int
    bank: int
    bank_addr: int
    lines: int
    opcode = OP_LOAD


@dataclass(frozen=True)
class Store:
    bank: int
    bank_addr: int
    ddr_addr: int
    lines: int
    opcode = OP_STORE


@dataclass(frozen=True)
class Conv:
    in_bank: int
    in_addr: int
    w_bank: int
    w_addr: int
    b_bank: int
    b_addr: int
    out_bank: int
    out_addr: int
    height: int
    width: int
    cin: int
    cout: int
    kernel: int
    stride: int
    pad: int
    opcode = OP_CONV


@dataclass(frozen=True)
class Alu:
    op: int
    in_bank: int
    in_addr: int
    out_bank: int
    out_addr: int
    height: int
    width: int
    channels: int
    window: int
    zero_point: int
    opcode = OP_ALU


@dataclass(frozen=True)
class End:
    opcode = OP_END


_FORMATS = {
    OP_LOAD: struct.Struct("<BQBHI"),
    OP_STORE: struct.Struct("<BBHQI"),
    OP_CONV: struct.Struct("<BBHBHBHBHHHHHBBB"),
    OP_ALU: struct.Struct("<BBBHBHHHHBi"),
    OP_END: struct.Struct("<B"),
}
_CLASSES = {OP_LOAD: Load, OP_STORE: Store, OP_CONV: Conv, OP_ALU: Alu, OP_END: End}


def encode_instruction(ins) -> bytes:
    fmt = _FORMATS[ins.opcode]
    values = [getattr(ins, f) for f in ins.__dataclass_fields__]
    try:
        rec = fmt.pack(ins.opcode, *values)
    except struct.error as exc:
        raise CompileError(f"field out of range in {ins}: {exc}") from None
    return rec.ljust(RECORD_BYTES, b"\x00")


class MalformedInstruction(ValueError):
    pass


def decode_instruction(rec: bytes):
    if len(rec) != RECORD_BYTES:
        raise MalformedInstruction("instruction records are 24 bytes")
    op = rec[0]
    if op not in _FORMATS:
        raise MalformedInstruction(f"unknown opcode {op}")
    values = _FORMATS[op].unpack_from(rec)[1:]
    return _CLASSES[op](*values)


@dataclass
class Program:
    instructions: list
    model_hash: str
    geometry: BankGeometry

    def __len__(self):
        return len(self.instructions)


PRG_MAGIC = b"PRG1"
_GEOM = struct.Struct("<HHHBBB")


def program_to_bytes(prog: Program) -> bytes:
    g = prog.geometry
    head = PRG_MAGIC + struct.pack("<I", len(prog.instructions)) + bytes.fromhex(prog.model_hash)
    head += _GEOM.pack(g.bank_count, g.lines_per_bank, g.line_bytes, g.feature_banks,
                       g.weight_banks, g.bias_banks)
    return head + b"".join(encode_instruction(i) for i in prog.instructions)


def program_from_bytes(blob: bytes) -> Program:
    if blob[:4] != PRG_MAGIC:
        raise ValueError("not a PRG1 program")
    (count,) = struct.unpack_from("<I", blob, 4)
    model_hash = blob[8:40].hex()
    geom = BankGeometry(*_GEOM.unpack_from(blob, 40))
    off = 40 + _GEOM.size
    if len(blob) != off + count * RECORD_BYTES:
        raise MalformedInstruction("program length does not match its record count")
    ins = [decode_instruction(blob[off + k * RECORD_BYTES: off + (k + 1) * RECORD_BYTES])
           for k in range(count)]
    return Program(ins, model_hash, geom)


def emit_program(qm: QuantizedModel, image: DdrImage, geom: Optional[BankGeometry] = None) -> Program:
    """Per layer: LOAD in, LOAD w, LOAD b, CONV, STORE (or LOAD in, ALU, STORE).

    Dense layers are issued as 1x1 convolutions over a 1x1 map. Flatten emits
    nothing: the NHWC buffer of its input is already the flat vector.
    """
    geom = geom or image.geometry
    if geom != image.geometry:
        raise CompileError("program geometry differs from the image geometry")
    allocs = image.allocations
    shapes = qm.layer_shapes()
    producers = _feature_producers(qm)
    feat_lines = geom.region_lines("feature")
    out = []
    for i, l in enumerate(qm.layers):
        if l.kind == "flatten":
            continue
        src = allocs["input" if producers[i] < 0 else f"layer{producers[i]}.out"]
        dst = allocs[f"layer{i}.out"]
        if src.lines + dst.lines > feat_lines:
            raise CompileError(f"layer{i}: activations need {src.lines + dst.lines} feature lines")
        in_bank, in_addr = geom.place("feature", 0)
        out_bank, out_addr = geom.place("feature", src.lines)
        out.append(Load(src.addr, in_bank, in_addr, src.lines))
        if l.kind in ("conv", "dense"):
            w, b = allocs[f"layer{i}.weight"], allocs[f"layer{i}.bias"]
            w_bank, w_addr = geom.place("weight", 0)
            b_bank, b_addr = geom.place("bias", 0)
            out.append(Load(w.addr, w_bank, w_addr, w.lines))
            out.append(Load(b.addr, b_bank, b_addr, b.lines))
            if l.kind == "conv":
                h, wd, cin = shapes[i]
                kh, kw, _, cout = l.weight.shape
                if kh != kw:
                    raise CompileError(f"layer{i}: only square kernels are supported")
                k, s, p = kh, l.geometry["stride"], l.geometry["padding"]
            else:
                h, wd, (cin, cout), k, s, p = 1, 1, l.weight.shape, 1, 1, 0
            out.append(Conv(in_bank, in_addr, w_bank, w_addr, b_bank, b_addr, out_bank, out_addr,
                            h, wd, cin, cout, k, s, p))
        else:
            h, wd, c = shapes[i] if len(shapes[i]) == 3 else (1, 1, shapes[i][0])
            if l.kind == "relu":
                out.append(Alu(ALU_RELU, in_bank, in_addr, out_bank, out_addr, h, wd, c, 1,
                               l.out_qp.zero_point))
            elif l.kind == "maxpool":
                out.append(Alu(ALU_MAXPOOL, in_bank, in_addr, out_bank, out_addr, h, wd, c,
                               l.geometry["window"], 0))
            else:
                raise CompileError(f"layer{i}: unsupported kind {l.kind!r}")
        out.append(Store(out_bank, out_addr, dst.addr, dst.lines))
    out.append(End())
    prog = Program(out, image.meta["model_hash"], geom)
    check_program(prog)
    return prog


def check_program(prog: Program) -> None:
    """Region discipline and bank capacity for every LOAD/STORE."""
    g = prog.geometry
    for n, ins in enumerate(prog.instructions):
        if isinstance(ins, (Load, Store)):
            if ins.bank >= g.bank_count or ins.lines < 1:
                raise CompileError(f"instruction {n}: bad bank or empty transfer")
            region = g.region_of(ins.bank)
            first, count = g.region(region)
            start = (ins.bank - first) * g.lines_per_bank + ins.bank_addr
            if start + ins.lines > count * g.lines_per_bank:
                raise CompileError(f"instruction {n}: transfer overflows the {region} region")
    if not prog.instructions or not isinstance(prog.instructions[-1], End):
        raise CompileError("program must end with END")


# -- files ------------------------------------------------------------------

DDR_MAGIC = b"DDR1"


def image_to_bytes(image: DdrImage) -> bytes:
    return DDR_MAGIC + struct.pack("<QI", image.base_addr, len(image.data)) + bytes(image.data)


def image_sidecar(image: DdrImage) -> str:
    return json.dumps({
        "base_addr": image.base_addr,
        "geometry": asdict(image.geometry),
        "allocations": [asdict(a) for a in image.allocations.values()],
        "meta": image.meta,
    }, indent=1, sort_keys=True)


def image_from_bytes(blob: bytes, sidecar: str) -> DdrImage:
    if blob[:4] != DDR_MAGIC:
        raise ValueError("not a DDR1 image")
    base, n = struct.unpack_from("<QI", blob, 4)
    side = json.loads(sidecar)
    allocs = {a["tensor"]: Allocation(**a) for a in side["allocations"]}
    return DdrImage(bytearray(blob[16:16 + n]), base, BankGeometry(**side["geometry"]), allocs, side["meta"])


def save_image(image: DdrImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(image_to_bytes(image))
    with open(f"{path}.json", "w") as fh:
        fh.write(image_sidecar(image))


def load_image(path) -> DdrImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(f"{path}.json") as fh:
        return image_from_bytes(blob, fh.read())


def save_program(prog: Program, path) -> None:
    with open(path, "wb") as fh:
        fh.write(program_to_bytes(prog))


def load_program(path) -> Program:
    with open(path, "rb") as fh:
        return program_from_bytes(fh.read())


def compile_model(qm: QuantizedModel, geom: Optional[BankGeometry] = None, base_addr: int = 0x1000):
    image = layout_parameters(qm, geom, base_addr)
    return image, emit_program(qm, image)
