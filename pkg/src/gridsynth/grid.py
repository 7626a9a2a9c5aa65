"""Grid data model: buses, generators, branches, and the bus admittance matrix.

Cases are stored in a small text format with three sections (BUS, GEN,
BRANCH) plus a BASE_MVA line.  Column orders are fixed and documented in the
README; the parser enforces them.  All electrical quantities are per-unit on
the system base.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

SLACK, PV, PQ = "slack", "pv", "pq"
_BUS_TYPES = (SLACK, PV, PQ)

_BUS_COLS = 8  # id type Pd Qd Vmin Vmax Gs Bs
_GEN_COLS = 6  # bus Pmin Pmax Qmin Qmax Vset
_BRANCH_COLS = 7  # from to r x b tap smax


@dataclass
class BusSpec:
    """One bus of the network.

    Attributes
    ----------
    bus_id : original identifier from the case file (any positive int)
    bus_type : "slack", "pv", or "pq"
    pd, qd : baseline active/reactive demand (pu)
    vmin, vmax : voltage magnitude limits (pu)
    gs, bs : shunt conductance/susceptance to ground (pu)
    zero_injection : derived; true when the bus has no demand, no shunt,
        and no generator, so its net injection is structurally zero
    """

    bus_id: int
    bus_type: str
    pd: float
    qd: float
    vmin: float
    vmax: float
    gs: float = 0.0
    bs: float = 0.0
    zero_injection: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.bus_type not in _BUS_TYPES:
            raise ValidationError(f"bus {self.bus_id}: unknown type {self.bus_type!r}")
        if not self.vmin < self.vmax:
            raise ValidationError(f"bus {self.bus_id}: need vmin < vmax")
        if self.vmin <= 0:
            raise ValidationError(f"bus {self.bus_id}: vmin must be positive")


@dataclass
class GenSpec:
    """One generator (multiple units on a bus are aggregated at parse time).

    Attributes
    ----------
    bus : original id of the host bus (must be slack or pv)
    pmin, pmax : active power capability (pu)
    qmin, qmax : reactive power capability (pu)
    vset : regulated voltage magnitude setpoint (pu)
    """

    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    vset: float

    def __post_init__(self):
        if self.pmin > self.pmax:
            raise ValidationError(f"gen at bus {self.bus}: pmin > pmax")
        if self.qmin > self.qmax:
            raise ValidationError(f"gen at bus {self.bus}: qmin > qmax")
        if self.vset <= 0:
            raise ValidationError(f"gen at bus {self.bus}: vset must be positive")


@dataclass
class BranchSpec:
    """One branch (line or transformer) between two buses.

    Attributes
    ----------
    from_bus, to_bus : original bus ids
    r, x : series resistance/reactance (pu); at least one must be nonzero
    b : total line charging susceptance (pu), split half per end
    tap : off-nominal turns ratio on the from side (1.0 for lines)
    smax : apparent-power rating (pu); 0 means unlimited
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    smax: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValidationError(f"branch {self.from_bus}-{self.to_bus}: self loop")
        if self.r == 0.0 and self.x == 0.0:
            raise ValidationError(
                f"branch {self.from_bus}-{self.to_bus}: zero series impedance"
            )
        if self.tap <= 0:
            raise ValidationError(f"branch {self.from_bus}-{self.to_bus}: tap <= 0")
        if self.smax < 0:
            raise ValidationError(f"branch {self.from_bus}-{self.to_bus}: smax < 0")


@dataclass
class AdmittanceMatrix:
    """Dense bus admittance matrix split into real and imaginary parts.

    G and B are (n, n) float64 arrays with Y = G + jB, indexed by the
    contiguous internal bus numbering of the owning GridCase.
    """

    g: np.ndarray
    b: np.ndarray

    @property
    def n(self) -> int:
        return self.g.shape[0]


class BranchAdmittances:
    """Per-branch two-port admittance terms used by flow calculations.

    For a branch with series admittance y = 1/(r+jx), charging b_c, and tap
    ratio tau on the from side, the two-port relation is

        [If]   [y_ff  y_ft] [Vf]        y_ff = (y + j b_c/2) / tau^2
        [It] = [y_tf  y_tt] [Vt]        y_ft = y_tf = -y / tau
                                        y_tt =  y + j b_c/2

    Arrays are stored split into real/imag parts so numeric kernels can
    consume them without complex arithmetic.
    """

    def __init__(self, branches: list[BranchSpec], index_of: dict[int, int]):
        nb = len(branches)
        self.f = np.empty(nb, dtype=np.int64)
        self.t = np.empty(nb, dtype=np.int64)
        self.smax = np.empty(nb)
        self.gff = np.empty(nb)
        self.bff = np.empty(nb)
        self.gft = np.empty(nb)
        self.bft = np.empty(nb)
        self.gtf = np.empty(nb)
        self.btf = np.empty(nb)
        self.gtt = np.empty(nb)
        self.btt = np.empty(nb)
        for k, br in enumerate(branches):
            y = 1.0 / complex(br.r, br.x)
            ytt = y + 0.5j * br.b
            yff = ytt / (br.tap * br.tap)
            yft = -y / br.tap
            self.f[k] = index_of[br.from_bus]
            self.t[k] = index_of[br.to_bus]
            self.smax[k] = br.smax
            self.gff[k], self.bff[k] = yff.real, yff.imag
            self.gft[k], self.bft[k] = yft.real, yft.imag
            self.gtf[k], self.btf[k] = yft.real, yft.imag
            self.gtt[k], self.btt[k] = ytt.real, ytt.imag


class GridCase:
    """A validated grid with contiguous internal bus numbering.

    Buses are renumbered 0..n-1 in case-file order; original ids are kept in
    `bus_ids` and `index_of`.  Instances are immutable by convention: no
    method mutates the case after construction, which makes sharing across
    worker processes safe.
    """

    def __init__(
        self,
        name: str,
        base_mva: float,
        buses: list[BusSpec],
        gens: list[GenSpec],
        branches: list[BranchSpec],
    ):
        if base_mva <= 0:
            raise ValidationError("base_mva must be positive")
        self.name = name
        self.base_mva = base_mva
        self.buses = buses
        self.gens = gens
        self.branches = branches

        ids = [b.bus_id for b in buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus ids")
        self.bus_ids = list(ids)
        self.index_of = {bid: i for i, bid in enumerate(ids)}

        self._validate()
        self._derive()

    # -- construction helpers -------------------------------------------------

    def _validate(self):
        slacks = [b for b in self.buses if b.bus_type == SLACK]
        if len(slacks) != 1:
            raise ValidationError(f"need exactly one slack bus, found {len(slacks)}")

        gen_buses = {g.bus for g in self.gens}
        for g in self.gens:
            if g.bus not in self.index_of:
                raise ValidationError(f"generator references unknown bus {g.bus}")
            if self.buses[self.index_of[g.bus]].bus_type == PQ:
                raise ValidationError(f"generator on pq bus {g.bus}")
        for b in self.buses:
            if b.bus_type in (SLACK, PV) and b.bus_id not in gen_buses:
                raise ValidationError(f"{b.bus_type} bus {b.bus_id} has no generator")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self.index_of:
                    raise ValidationError(f"branch references unknown bus {end}")
        if not self._connected():
            raise ValidationError("network is not connected")

    def _connected(self) -> bool:
        n = len(self.buses)
        adj = [[] for _ in range(n)]
        for br in self.branches:
            i, j = self.index_of[br.from_bus], self.index_of[br.to_bus]
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == n

    def _derive(self):
        gen_buses = {g.bus for g in self.gens}
        for b in self.buses:
            b.zero_injection = (
                b.bus_id not in gen_buses
                and b.pd == 0.0
                and b.qd == 0.0
                and b.gs == 0.0
                and b.bs == 0.0
            )

        n = self.n
        self.slack = next(
            i for i, b in enumerate(self.buses) if b.bus_type == SLACK
        )
        self.pv = np.array(
            [i for i, b in enumerate(self.buses) if b.bus_type == PV], dtype=np.int64
        )
        self.pq = np.array(
            [i for i, b in enumerate(self.buses) if b.bus_type == PQ], dtype=np.int64
        )
        self.pd = np.array([b.pd for b in self.buses])
        self.qd = np.array([b.qd for b in self.buses])
        self.vmin = np.array([b.vmin for b in self.buses])
        self.vmax = np.array([b.vmax for b in self.buses])
        self.zero_injection_mask = np.array(
            [b.zero_injection for b in self.buses], dtype=bool
        )
        self.gen_bus = np.array([self.index_of[g.bus] for g in self.gens], dtype=np.int64)
        self.gen_pmin = np.array([g.pmin for g in self.gens])
        self.gen_pmax = np.array([g.pmax for g in self.gens])
        self.gen_qmin = np.array([g.qmin for g in self.gens])
        self.gen_qmax = np.array([g.qmax for g in self.gens])
        self.gen_vset = np.array([g.vset for g in self.gens])
        self.vset = np.ones(n)
        self.vset[self.gen_bus] = self.gen_vset

        self.ybus = build_ybus(self)
        self.branch_adm = BranchAdmittances(self.branches, self.index_of)

    # -- public surface --------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.gens)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def format_case(self) -> str:
        """Serialize back to the case text format.

        Float fields are written with repr precision, so parsing the result
        reproduces the exact same admittance matrix.
        """
        lines = [f"# {self.name}", f"BASE_MVA {self.base_mva!r}", "", "BUS"]
        lines.append("# id type Pd Qd Vmin Vmax Gs Bs")
        for b in self.buses:
            lines.append(
                f"{b.bus_id} {b.bus_type} {b.pd!r} {b.qd!r} "
                f"{b.vmin!r} {b.vmax!r} {b.gs!r} {b.bs!r}"
            )
        lines += ["", "GEN", "# bus Pmin Pmax Qmin Qmax Vset"]
        for g in self.gens:
            lines.append(
                f"{g.bus} {g.pmin!r} {g.pmax!r} {g.qmin!r} {g.qmax!r} {g.vset!r}"
            )
        lines += ["", "BRANCH", "# from to r x b tap smax"]
        for br in self.branches:
            lines.append(
                f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r} "
                f"{br.b!r} {br.tap!r} {br.smax!r}"
            )
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """sha256 over the canonical serialization; identifies the grid."""
        return hashlib.sha256(self.format_case().encode()).hexdigest()


def feature_labels(grid: GridCase) -> list[str]:
    """Column labels for the flattened state layout [P | Q | V | theta]."""
    ids = grid.bus_ids
    out = []
    for prefix in ("P", "Q", "V", "theta"):
        out += [f"{prefix}_{bid}" for bid in ids]
    return out


def build_ybus(grid: GridCase) -> AdmittanceMatrix:
    """Assemble the dense bus admittance matrix from branch and shunt data.

    Returns an AdmittanceMatrix with Y = G + jB.  After accumulation the
    diagonal is checked row by row against an independently accumulated sum
    of shunt and branch self terms.
    """
    n = grid.n
    y = np.zeros((n, n), dtype=complex)
    diag_check = np.zeros(n, dtype=complex)
    for br in grid.branches:
        i = grid.index_of[br.from_bus]
        j = grid.index_of[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ytt = ys + 0.5j * br.b
        yff = ytt / (br.tap * br.tap)
        yft = -ys / br.tap
        y[i, i] += yff
        y[j, j] += ytt
        y[i, j] += yft
        y[j, i] += yft
        diag_check[i] += yff
        diag_check[j] += ytt
    for b in grid.buses:
        i = grid.index_of[b.bus_id]
        sh = complex(b.gs, b.bs)
        y[i, i] += sh
        diag_check[i] += sh

    if not np.allclose(np.diag(y), diag_check, rtol=0, atol=1e-12):
        raise ValidationError("admittance diagonal failed consistency check")
    return AdmittanceMatrix(g=np.ascontiguousarray(y.real), b=np.ascontiguousarray(y.imag))


def _floats(tokens: list[str], where: str) -> list[float]:
    try:
        return [float(tok) for tok in tokens]
    except ValueError as exc:
        raise ParseError(f"{where}: bad number in {tokens!r}") from exc


def parse_case_text(text: str, name: str = "case") -> GridCase:
    """Parse the case text format into a validated GridCase."""
    base_mva = None
    section = None
    buses: list[BusSpec] = []
    branches: list[BranchSpec] = []
    raw_gens: list[GenSpec] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{name}:{lineno}"
        tokens = line.split()
        head = tokens[0].upper()
        if head == "BASE_MVA":
            if len(tokens) != 2:
                raise ParseError(f"{where}: BASE_MVA takes one value")
            base_mva = _floats(tokens[1:], where)[0]
            continue
        if head in ("BUS", "GEN", "BRANCH"):
            if len(tokens) != 1:
                raise ParseError(f"{where}: section header takes no values")
            section = head
            continue
        if section == "BUS":
            if len(tokens) != _BUS_COLS:
                raise ParseError(f"{where}: BUS rows take {_BUS_COLS} columns")
            vals = _floats(tokens[2:], where)
            buses.append(BusSpec(int(tokens[0]), tokens[1].lower(), *vals))
        elif section == "GEN":
            if len(tokens) != _GEN_COLS:
                raise ParseError(f"{where}: GEN rows take {_GEN_COLS} columns")
            vals = _floats(tokens[1:], where)
            raw_gens.append(GenSpec(int(tokens[0]), *vals))
        elif section == "BRANCH":
            if len(tokens) != _BRANCH_COLS:
                raise ParseError(f"{where}: BRANCH rows take {_BRANCH_COLS} columns")
            vals = _floats(tokens[2:], where)
            branches.append(BranchSpec(int(tokens[0]), int(tokens[1]), *vals))
        else:
            raise ParseError(f"{where}: data outside any section")

    if base_mva is None:
        raise ParseError(f"{name}: missing BASE_MVA")
    if not buses:
        raise ParseError(f"{name}: no buses")
    return GridCase(name, base_mva, buses, _aggregate_gens(raw_gens), branches)


def _aggregate_gens(raw: list[GenSpec]) -> list[GenSpec]:
    """Merge multiple units on one bus: limits add, setpoints must agree."""
    by_bus: dict[int, GenSpec] = {}
    for g in raw:
        prev = by_bus.get(g.bus)
        if prev is None:
            by_bus[g.bus] = g
            continue
        if prev.vset != g.vset:
            raise ValidationError(f"bus {g.bus}: units disagree on vset")
        by_bus[g.bus] = GenSpec(
            g.bus,
            prev.pmin + g.pmin,
            prev.pmax + g.pmax,
            prev.qmin + g.qmin,
            prev.qmax + g.qmax,
            g.vset,
        )
    return list(by_bus.values())


def parse_case(path: str | Path) -> GridCase:
    """Load a case file from disk."""
    path = Path(path)
    return parse_case_text(path.read_text(), name=path.stem)


def load_bundled_case(name: str) -> GridCase:
    """Load one of the cases shipped with the package ("case6", "case24")."""
    ref = resources.files("gridsynth") / "cases" / f"{name}.case"
    try:
        text = ref.read_text()
    except FileNotFoundError as exc:
        raise ValidationError(f"no bundled case named {name!r}") from exc
    return parse_case_text(text, name=name)
