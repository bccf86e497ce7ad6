"""Cycle-counting simulator of one DPU-style core.

The scheduler issues instructions in order. LOADs stream DDR lines through the
memory-reader FSM (IDLE -> CFG -> (PARSE <-> SEND)* -> DONE -> IDLE) into the
banked on-chip RAM; the trojan, when provisioned, sits between PARSE and the
write controller. CONV and ALU engines work on the codes held on chip and
STORE writes results back to a private copy of the DDR image.

Cycle model: every instruction costs ``DISPATCH_CYCLES``; a LOAD adds CFG and
DONE overhead plus one cycle per line; STORE adds a fixed cost plus one cycle
per line; compute engines have fixed latencies derived from their work size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .compiler import (ALU_MAXPOOL, ALU_RELU, REQUANT, Alu, BankGeometry, Conv, DdrImage, End, Load,
                       Program, Store)
from .quant import INT32_MAX, INT32_MIN, AccumulatorOverflow, quantize
from .trojan import TrojanConfig

DISPATCH_CYCLES = 1
LOAD_CFG_CYCLES = 2
LOAD_DONE_CYCLES = 1
STORE_SETUP_CYCLES = 2
CONV_SETUP_CYCLES = 8
CONV_MACS_PER_CYCLE = 256
ALU_SETUP_CYCLES = 2
ALU_ELEMENTS_PER_CYCLE = 64


class SimError(RuntimeError):
    pass


class UninitializedRead(SimError):
    pass


class BankOverflow(SimError):
    pass


class FsmFault(SimError):
    pass


class OnChipRam:
    def __init__(self, geom: BankGeometry):
        self.geom = geom
        total = geom.bank_count * geom.lines_per_bank
        self.lines = np.zeros((total, geom.line_bytes), dtype=np.uint8)
        self.written = np.zeros(total, dtype=bool)

    def line_index(self, bank: int, addr: int) -> int:
        if not 0 <= bank < self.geom.bank_count or not 0 <= addr < self.geom.lines_per_bank:
            raise BankOverflow(f"bank {bank} address {addr} outside on-chip RAM")
        return bank * self.geom.lines_per_bank + addr

    def _span(self, bank: int, addr: int, count: int):
        start = self.line_index(bank, addr)
        region = self.geom.region_of(bank)
        first, banks = self.geom.region(region)
        end = (first + banks) * self.geom.lines_per_bank
        if start + count > end:
            raise BankOverflow(f"{count} lines from bank {bank}:{addr} overflow the {region} region")
        return start, start + count

    def write(self, bank: int, addr: int, block: np.ndarray) -> None:
        block = np.asarray(block, dtype=np.uint8).reshape(-1, self.geom.line_bytes)
        lo, hi = self._span(bank, addr, len(block))
        self.lines[lo:hi] = block
        self.written[lo:hi] = True

    def read(self, bank: int, addr: int, nbytes: int) -> np.ndarray:
        count = -(-nbytes // self.geom.line_bytes)
        lo, hi = self._span(bank, addr, count)
        if not self.written[lo:hi].all():
            bad = lo + int(np.argmin(self.written[lo:hi]))
            raise UninitializedRead(f"read of never-written line {bad // self.geom.lines_per_bank}:"
                                    f"{bad % self.geom.lines_per_bank}")
        return self.lines[lo:hi].reshape(-1)[:nbytes]

    def dump(self) -> bytes:
        return self.lines.tobytes()


IDLE, CFG, PARSE, SEND, DONE = "IDLE", "CFG", "PARSE", "SEND", "DONE"
_LEGAL = {IDLE: {CFG}, CFG: {PARSE}, PARSE: {SEND}, SEND: {PARSE, DONE}, DONE: {IDLE}}


@dataclass
class LoadFsmState:
    geom: BankGeometry
    state: str = IDLE
    instr: Optional[Load] = None
    transfers: int = 0
    ddr_cursor: int = 0
    bank_cursor: int = 0  # linear line index inside the on-chip RAM
    target: object = None  # matched trojan target, latched in CFG

    def move(self, new: str) -> None:
        if new not in _LEGAL[self.state]:
            raise FsmFault(f"illegal load FSM transition {self.state} -> {new}")
        self.state = new

    @property
    def bank(self) -> int:
        return self.bank_cursor // self.geom.lines_per_bank

    @property
    def bank_addr(self) -> int:
        return self.bank_cursor % self.geom.lines_per_bank


def load_engine_configure(fsm: LoadFsmState, ins: Load, trojan: Optional[TrojanConfig]) -> None:
    """IDLE -> CFG -> PARSE; the trojan compares the start address here."""
    fsm.move(CFG)
    if ins.lines < 1:
        raise FsmFault("LOAD with zero lines")
    fsm.instr = ins
    fsm.transfers = 0
    fsm.ddr_cursor = ins.ddr_addr
    fsm.bank_cursor = ins.bank * fsm.geom.lines_per_bank + ins.bank_addr
    fsm.target = trojan.match(ins.ddr_addr) if trojan is not None else None
    fsm.move(PARSE)


def load_engine_step(fsm: LoadFsmState, incoming: bytes):
    """One 16-byte transfer: PARSE -> SEND, trojan MUX, cursor increment.

    Returns ``(line_to_write, bank, bank_addr)`` for the write controller.
    """
    if fsm.state != PARSE:
        raise FsmFault(f"transfer issued in state {fsm.state}")
    if fsm.transfers >= fsm.instr.lines:
        raise FsmFault("transfer past the LOAD line count")
    fsm.move(SEND)
    line = bytes(incoming)
    if fsm.target is not None:
        line = fsm.target.select(fsm.transfers, line)
    bank, addr = fsm.bank, fsm.bank_addr
    fsm.transfers += 1
    fsm.ddr_cursor += fsm.geom.line_bytes
    fsm.bank_cursor += 1
    fsm.move(PARSE if fsm.transfers < fsm.instr.lines else DONE)
    return line, bank, addr


def load_engine_finish(fsm: LoadFsmState) -> None:
    if fsm.state != DONE:
        raise FsmFault(f"LOAD finished in state {fsm.state}")
    fsm.move(IDLE)
    fsm.instr, fsm.target = None, None


@dataclass
class SimResult:
    predicted: Optional[int]
    outputs: list  # int64 code arrays, one per STORE (i.e. per non-flatten layer)
    cycles: int
    data_cycles: int
    trace: Optional[list] = None
    ddr: Optional[bytes] = field(default=None, repr=False)

    @property
    def has_output(self) -> bool:
        return self.predicted is not None


class Simulator:
    def __init__(self, program: Program, image: DdrImage, trojan: Optional[TrojanConfig] = None,
                 trace: bool = False):
        if program.geometry != image.geometry:
            raise SimError("program and image geometries differ")
        self.program = program
        self.image = image
        self.geom = image.geometry
        self.trojan = trojan
        self.tracing = trace

    def _ddr_lines(self, ddr, addr, count):
        lb = self.geom.line_bytes
        off = addr - self.image.base_addr
        if off < 0 or off % lb or off + count * lb > len(ddr):
            raise SimError(f"DDR window 0x{addr:x}+{count} lines outside the image")
        return np.frombuffer(ddr, np.uint8, count * lb, off).reshape(count, lb)

    def run(self, input_codes) -> SimResult:
        geom = self.geom
        ddr = bytearray(self.image.data)
        staged = np.asarray(input_codes, dtype=np.int64).astype(np.int8).tobytes()
        inp = self.image.allocations["input"]
        if len(staged) != inp.nbytes:
            raise SimError(f"input has {len(staged)} codes, staging area holds {inp.nbytes}")
        off = inp.addr - self.image.base_addr
        ddr[off:off + len(staged)] = staged
        ram = OnChipRam(geom)
        fsm = LoadFsmState(geom)
        trace = [] if self.tracing else None
        cycles = data_cycles = 0
        outputs, pending = [], None
        for n, ins in enumerate(self.program.instructions):
            cycles += DISPATCH_CYCLES
            if isinstance(ins, Load):
                self._load(n, ins, ddr, ram, fsm, trace)
                cycles += LOAD_CFG_CYCLES + ins.lines + LOAD_DONE_CYCLES
                data_cycles += ins.lines
            elif isinstance(ins, Conv):
                pending, macs = self._conv(ins, ram)
                cycles += CONV_SETUP_CYCLES + math.ceil(macs / CONV_MACS_PER_CYCLE)
            elif isinstance(ins, Alu):
                pending = self._alu(ins, ram)
                cycles += ALU_SETUP_CYCLES + math.ceil(pending.size / ALU_ELEMENTS_PER_CYCLE)
            elif isinstance(ins, Store):
                block = ram.read(ins.bank, ins.bank_addr, ins.lines * geom.line_bytes)
                off = ins.ddr_addr - self.image.base_addr
                if off < 0 or off + len(block) > len(ddr):
                    raise SimError(f"STORE to 0x{ins.ddr_addr:x} outside the image")
                ddr[off:off + len(block)] = block.tobytes()
                cycles += STORE_SETUP_CYCLES + ins.lines
                data_cycles += ins.lines
                if pending is not None:
                    outputs.append(pending)
                    pending = None
            elif isinstance(ins, End):
                break
            else:
                raise SimError(f"instruction {n}: unknown record {ins!r}")
        else:
            raise SimError("program ran past its last instruction without END")
        predicted = int(np.argmax(outputs[-1].reshape(-1))) if outputs else None
        return SimResult(predicted, outputs, cycles, data_cycles, trace, bytes(ddr))

    def _load(self, n, ins: Load, ddr, ram, fsm, trace):
        lines = self._ddr_lines(ddr, ins.ddr_addr, ins.lines)
        load_engine_configure(fsm, ins, self.trojan)
        if fsm.target is None and trace is None:
            # nothing can alter the stream: move the whole window at once
            ram.write(ins.bank, ins.bank_addr, lines)
            fsm.transfers = ins.lines
            fsm.bank_cursor += ins.lines
            fsm.ddr_cursor += ins.lines * self.geom.line_bytes
            fsm.move(SEND)
            fsm.move(DONE)
        else:
            for k in range(ins.lines):
                incoming = lines[k].tobytes()
                line, bank, addr = load_engine_step(fsm, incoming)
                ram.write(bank, addr, np.frombuffer(line, np.uint8))
                if trace is not None:
                    trace.append({"instrIndex": n, "ddrAddr": ins.ddr_addr + k * self.geom.line_bytes,
                                  "bankId": bank, "bankAddr": addr, "substituted": line != incoming})
        load_engine_finish(fsm)

    def _codes(self, ram, bank, addr, count, dtype=np.int8):
        raw = ram.read(bank, addr, count * np.dtype(dtype).itemsize)
        return raw.view(dtype).astype(np.int64)

    def _write_codes(self, ram, bank, addr, codes):
        raw = codes.astype(np.int8).tobytes()
        lb = self.geom.line_bytes
        pad = (-len(raw)) % lb
        ram.write(bank, addr, np.frombuffer(raw + b"\x00" * pad, np.uint8))

    def _conv(self, ins: Conv, ram):
        h, w, cin, cout, k, s, p = ins.height, ins.width, ins.cin, ins.cout, ins.kernel, ins.stride, ins.pad
        x = self._codes(ram, ins.in_bank, ins.in_addr, h * w * cin).reshape(h, w, cin)
        wt = self._codes(ram, ins.w_bank, ins.w_addr, k * k * cin * cout).reshape(k, k, cin, cout)
        bias = self._codes(ram, ins.b_bank, ins.b_addr, cout, np.dtype("<i4"))
        rq_line = ins.b_addr + -(-4 * cout // self.geom.line_bytes)
        rq = ram.read(ins.b_bank, rq_line, REQUANT.size).tobytes()
        m, p0w, p0x, p0out, out_bits = REQUANT.unpack(rq)
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        xs = np.zeros((h + 2 * p, w + 2 * p, cin), dtype=np.int64)
        xs[p:p + h, p:p + w] = x - p0x
        wt = wt - p0w
        # shifted-slice accumulation: one matrix product per kernel tap
        acc = np.broadcast_to(bias, (ho, wo, cout)).copy()
        for i in range(k):
            for j in range(k):
                tap = xs[i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                acc += tap @ wt[i, j]
        if acc.min() < INT32_MIN or acc.max() > INT32_MAX:
            raise AccumulatorOverflow("CONV accumulator exceeds 32-bit signed range")
        lo, hi = -(2 ** (out_bits - 1)), 2 ** (out_bits - 1) - 1
        out = np.clip(np.floor(acc.astype(np.float64) * m + p0out), lo, hi).astype(np.int64)
        self._write_codes(ram, ins.out_bank, ins.out_addr, out)
        return out, ho * wo * cout * k * k * cin

    def _alu(self, ins: Alu, ram):
        h, w, c = ins.height, ins.width, ins.channels
        x = self._codes(ram, ins.in_bank, ins.in_addr, h * w * c).reshape(h, w, c)
        if ins.op == ALU_RELU:
            out = np.maximum(x, ins.zero_point)
        elif ins.op == ALU_MAXPOOL:
            kk = ins.window
            out = x.reshape(h // kk, kk, w // kk, kk, c).max(axis=(1, 3))
        else:
            raise SimError(f"unknown ALU op {ins.op}")
        self._write_codes(ram, ins.out_bank, ins.out_addr, out)
        return out


def run_program(program: Program, image: DdrImage, input_codes, trojan: Optional[TrojanConfig] = None,
                trace: bool = False) -> SimResult:
    return Simulator(program, image, trojan, trace).run(input_codes)


def quantize_for_image(image: DdrImage, x) -> np.ndarray:
    """Driver-side input quantization with the parameters recorded in the image."""
    return quantize(x, image.input_qp)


def simulate_dataset(program: Program, image: DdrImage, inputs, trojan: Optional[TrojanConfig] = None):
    """Predictions and cycle counts for a batch of float inputs."""
    sim = Simulator(program, image, trojan)
    preds, cycles, outputs = [], [], []
    for x in np.asarray(inputs, dtype=np.float64):
        r = sim.run(quantize_for_image(image, x))
        preds.append(r.predicted)
        cycles.append(r.cycles)
        outputs.append(r.outputs)
    return np.array(preds, dtype=np.int64), np.array(cycles, dtype=np.int64), outputs
