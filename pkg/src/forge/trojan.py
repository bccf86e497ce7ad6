"""Parameter-swapping trojan for the LOAD engine.

The trojan ROM holds, per targeted LOAD start address, a line mask with one
bit per transfer and the replacement lines for the set bits in transfer order.
The start address is compared once at CFG; afterwards each transfer ticks the
shift register and a set bit routes the next replacement line through the MUX.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .compiler import DdrImage, Load, Program


class TrojanFault(RuntimeError):
    pass


class ProvisioningError(ValueError):
    pass


@dataclass(frozen=True)
class TrojanTarget:
    ddr_addr: int
    mask: tuple  # bools, bit i = transfer i of the LOAD
    lines: tuple  # 16-byte replacement lines for the set bits
    _rank: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        mask = tuple(bool(b) for b in self.mask)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "lines", tuple(bytes(l) for l in self.lines))
        if sum(mask) != len(self.lines):
            raise ValueError("popcount(mask) must equal the number of replacement lines")
        if self.ddr_addr % 16:
            raise ValueError("target address must be 16-byte aligned")
        object.__setattr__(self, "_rank", tuple(np.cumsum((0,) + mask[:-1]).tolist()) if mask else ())

    def select(self, index: int, incoming: bytes) -> bytes:
        if index >= len(self.mask):
            raise TrojanFault(f"line mask of target 0x{self.ddr_addr:x} exhausted at transfer {index}")
        if self.mask[index]:
            return self.lines[self._rank[index]]
        return incoming

    @property
    def line_count(self) -> int:
        return len(self.mask)


@dataclass(frozen=True)
class TrojanConfig:
    targets: tuple = ()
    _by_addr: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        targets = tuple(self.targets)
        object.__setattr__(self, "targets", targets)
        by_addr = {t.ddr_addr: t for t in targets}
        if len(by_addr) != len(targets):
            raise ValueError("target addresses must be unique")
        object.__setattr__(self, "_by_addr", by_addr)

    def match(self, load_start: int):
        """CFG-state comparator: exact equality on the LOAD start address."""
        return self._by_addr.get(load_start)

    @property
    def replacement_lines(self) -> int:
        return sum(len(t.lines) for t in self.targets)

    def __len__(self):
        return len(self.targets)


EMPTY_TROJAN = TrojanConfig()


def trojan_hook(cfg: TrojanConfig, transfer_addr: int, index: int, load_start: int, incoming: bytes) -> bytes:
    target = cfg.match(load_start) if cfg is not None else None
    if target is None:
        return incoming
    return target.select(index, incoming)


def generate_provisioning(clean: DdrImage, backdoored: DdrImage, program: Program) -> TrojanConfig:
    """One target per LOAD window that holds differing bytes; whole lines are replaced."""
    if (clean.base_addr != backdoored.base_addr or len(clean.data) != len(backdoored.data)
            or clean.geometry != backdoored.geometry):
        raise ProvisioningError("images do not share base address, size and geometry")
    lb = clean.geometry.line_bytes
    a = np.frombuffer(bytes(clean.data), np.uint8).reshape(-1, lb)
    b = np.frombuffer(bytes(backdoored.data), np.uint8).reshape(-1, lb)
    differing = set(np.flatnonzero((a != b).any(axis=1)).tolist())
    covered, targets = set(), []
    seen = set()
    for ins in program.instructions:
        if not isinstance(ins, Load) or ins.ddr_addr in seen:
            continue
        seen.add(ins.ddr_addr)
        first = (ins.ddr_addr - clean.base_addr) // lb
        window = range(first, first + ins.lines)
        hits = [k for k in window if k in differing]
        if not hits:
            continue
        mask = [False] * ins.lines
        for k in hits:
            mask[k - first] = True
        targets.append(TrojanTarget(ins.ddr_addr, tuple(mask), tuple(b[k].tobytes() for k in hits)))
        covered.update(hits)
    missing = differing - covered
    if missing:
        addrs = ", ".join(f"0x{clean.base_addr + k * lb:x}" for k in sorted(missing)[:4])
        raise ProvisioningError(f"{len(missing)} differing lines lie outside every LOAD window ({addrs})")
    return TrojanConfig(tuple(targets))


# -- overhead model ---------------------------------------------------------

BASELINE = {"lut": 37379, "lutram": 6440, "ff": 90309}


@dataclass(frozen=True)
class OverheadModel:
    """Linear resource model: delta = const + per_target * targets + per_line * lines.

    Model-based estimates, not synthesis results. A replacement line is 128 bits
    and is assumed to sit in two 64x1 LUT-RAMs; each target adds a 64-bit
    address comparator and a mask shift register.
    """
    lut: tuple = (144, 24, 1)
    ff: tuple = (16, 128, 0)
    lutram: tuple = (0, 0, 2)

    def delta(self, resource: str, targets: int, lines: int) -> int:
        c0, c1, c2 = getattr(self, resource)
        return c0 + c1 * targets + c2 * lines


@dataclass
class OverheadReport:
    targets: int
    lines: int
    delta: dict
    baseline: dict
    percent: dict
    total_percent: float
    basis: str = "linear model estimate"

    def to_dict(self) -> dict:
        return asdict(self)


def overhead_for(targets: int, lines: int, model: OverheadModel = OverheadModel()) -> OverheadReport:
    delta = {r: model.delta(r, targets, lines) for r in BASELINE}
    percent = {r: 100.0 * delta[r] / BASELINE[r] for r in BASELINE}
    total = 100.0 * sum(delta.values()) / sum(BASELINE.values())
    return OverheadReport(targets, lines, delta, dict(BASELINE), percent, total)


def estimate_overhead(cfg: TrojanConfig, model: OverheadModel = OverheadModel()) -> OverheadReport:
    return overhead_for(len(cfg), cfg.replacement_lines, model)


def overhead_model_from_json(text: str) -> OverheadModel:
    raw = json.loads(text)
    if not isinstance(raw, dict):
        raise ValueError("coefficients must be an object of resource -> [c0, per_target, per_line]")
    for k, v in raw.items():
        if not isinstance(v, list) or len(v) != 3 or not all(isinstance(c, (int, float)) for c in v):
            raise ValueError(f"{k}: expected three numbers [c0, per_target, per_line]")
    return OverheadModel(**{k: tuple(v) for k, v in raw.items()})


# -- TPF1 -------------------------------------------------------------------

TPF_MAGIC = b"TPF1"


def tpf_to_bytes(cfg: TrojanConfig) -> bytes:
    out = [TPF_MAGIC, struct.pack("<I", len(cfg.targets))]
    for t in cfg.targets:
        out.append(struct.pack("<QI", t.ddr_addr, t.line_count))
        # bit i of the packed mask is transfer i, least significant bit first
        out.append(np.packbits(np.array(t.mask, dtype=np.uint8), bitorder="little").tobytes())
        out.extend(t.lines)
    return b"".join(out)


def tpf_from_bytes(blob: bytes) -> TrojanConfig:
    if blob[:4] != TPF_MAGIC:
        raise ValueError("not a TPF1 provisioning file")
    (count,) = struct.unpack_from("<I", blob, 4)
    off, targets = 8, []
    for _ in range(count):
        addr, n = struct.unpack_from("<QI", blob, off)
        off += 12
        nbytes = -(-n // 8)
        bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, off), bitorder="little")[:n]
        off += nbytes
        k = int(bits.sum())
        lines = [blob[off + 16 * j: off + 16 * (j + 1)] for j in range(k)]
        off += 16 * k
        targets.append(TrojanTarget(addr, tuple(bits.astype(bool).tolist()), tuple(lines)))
    if off != len(blob):
        raise ValueError("trailing bytes in TPF1 file")
    return TrojanConfig(tuple(targets))


def save_tpf(cfg: TrojanConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tpf_to_bytes(cfg))


def load_tpf(path) -> TrojanConfig:
    with open(path, "rb") as fh:
        return tpf_from_bytes(fh.read())
