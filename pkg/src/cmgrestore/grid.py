"""Three-phase radial feeder model, node groups and generator portfolio.

Feeders are read from a YAML document (see ``data/*.yaml`` and the README for
the schema). Impedances are given in ohms and normalised to per unit on a
per-phase base: ``S_base = kVA_3ph / 3`` and ``Z_base = kV_LL^2 * 1000 / kVA_3ph``.
"""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

PHASES = ("A", "B", "C")
PH_INDEX = {p: i for i, p in enumerate(PHASES)}
SCHEMA_VERSION = 1

# default priority weights by (class, inside the CMG)
OMEGA1_DEFAULTS = {("CL", True): 100.0, ("CL", False): 50.0,
                   ("NCL", True): 10.0, ("NCL", False): 1.0}

GEN_KINDS = ("PV-C", "PV-UC", "ES", "DG")


class FeederError(ValueError):
    """Validation failure naming the offending element."""

    def __init__(self, msg: str, element: str | None = None, elements: list[str] | None = None):
        self.element = element
        self.elements = elements or ([element] if element else [])
        super().__init__(msg)


def phase_mask(phases: str) -> np.ndarray:
    m = np.zeros(3, dtype=bool)
    for p in phases:
        if p not in PH_INDEX:
            raise FeederError(f"unknown phase {p!r}")
        m[PH_INDEX[p]] = True
    return m


@dataclass(frozen=True)
class Base:
    kva: float = 3000.0
    kv: float = 4.16

    @property
    def s_phase(self) -> float:
        """Per-phase power base in kVA."""
        return self.kva / 3.0

    @property
    def z(self) -> float:
        return self.kv ** 2 * 1000.0 / self.kva


@dataclass
class Node:
    id: str
    phases: str
    p_kw: np.ndarray
    q_kvar: np.ndarray
    load_class: str = "none"
    omega1: float = 0.0
    dr_zone: str = ""
    ng: int = 1

    @property
    def mask(self) -> np.ndarray:
        return phase_mask(self.phases)

    @property
    def has_load(self) -> bool:
        return self.load_class in ("CL", "NCL") and float(self.p_kw.sum()) > 0


@dataclass
class Edge:
    id: str
    f: str
    t: str
    phases: str
    r_ohm: np.ndarray
    x_ohm: np.ndarray
    r: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    x: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    p_max: np.ndarray | None = None
    q_max: np.ndarray | None = None
    is_switch: bool = False
    normally_closed: bool = True
    coupled: bool = True  # phase-pair impedances were given

    @property
    def mask(self) -> np.ndarray:
        return phase_mask(self.phases)


@dataclass
class Generator:
    id: str
    kind: str
    node: str
    phases: str
    s_kva: float
    # storage
    e_kwh: float = 0.0
    soc_min: float = 20.0
    soc_max: float = 80.0
    soc_op_min: float = 5.0
    soc_op_max: float = 95.0
    soc_init: float = 75.0
    grid_forming: bool = False
    # diesel
    p_max: float = 0.0
    p_min: float = 0.0
    q_max: float = 0.0
    q_min: float = 0.0
    ramp: float = math.inf
    fuel_max: float = 0.0
    fuel_min: float = 0.0
    fuel_init: float = 0.0
    alpha: float = 0.244
    beta: float = 0.014
    ng: int = 1

    @property
    def mask(self) -> np.ndarray:
        return phase_mask(self.phases)

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def is_pv(self) -> bool:
        return self.kind in ("PV-C", "PV-UC")


@dataclass
class NodeGroup:
    id: int
    node_ids: list[str]
    parent: int | None = None
    tie_edge: str | None = None
    has_critical_load: bool = False


@dataclass
class NetworkModel:
    name: str
    base: Base
    nodes: dict[str, Node]
    edges: dict[str, Edge]
    generators: dict[str, Generator]
    groups: dict[int, NodeGroup]
    defaults: dict[str, Any] = field(default_factory=dict)

    # derived, filled by _finalise
    node_order: list[str] = field(default_factory=list)
    root: str = ""
    parent_edge: dict[str, str] = field(default_factory=dict)

    @property
    def node_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.node_order)}

    def gens(self, kind: str | tuple[str, ...]) -> list[Generator]:
        kinds = (kind,) if isinstance(kind, str) else kind
        return [g for g in self.generators.values() if g.kind in kinds]

    @property
    def grid_forming(self) -> Generator:
        return next(g for g in self.generators.values() if g.grid_forming)

    def load_nodes(self) -> list[Node]:
        return [self.nodes[n] for n in self.node_order if self.nodes[n].has_load]

    def zones(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for n in self.load_nodes():
            out[n.dr_zone].append(n.id)
        return dict(out)

    def peak_load(self) -> float:
        return float(sum(n.p_kw.sum() for n in self.nodes.values()))

    def ng_nodes(self, energized: set[int]) -> list[str]:
        return [n for n in self.node_order if self.nodes[n].ng in energized]

    def children(self) -> dict[str, list[str]]:
        ch: dict[str, list[str]] = defaultdict(list)
        for n, e in self.parent_edge.items():
            ed = self.edges[e]
            ch[ed.f if ed.t == n else ed.t].append(n)
        return ch

    def parent_of(self, node: str) -> str | None:
        e = self.parent_edge.get(node)
        if e is None:
            return None
        ed = self.edges[e]
        return ed.f if ed.t == node else ed.t


@dataclass
class AggUnit:
    id: str
    kind: str
    ng: int
    s_kva: float
    gen: Generator


@dataclass
class AggLoad:
    node: str
    ng: int
    load_class: str
    omega1: float
    p_kw: float
    q_kvar: float


@dataclass
class AggregatedModel:
    """Single-phase equivalent resource lists per node group (no line data)."""

    groups: dict[int, NodeGroup]
    loads: list[AggLoad]
    units: list[AggUnit]
    ancestry: list[tuple[int, int]]

    def ng_loads(self, n: int) -> list[AggLoad]:
        return [ld for ld in self.loads if ld.ng == n]

    def ng_units(self, n: int) -> list[AggUnit]:
        return [u for u in self.units if u.ng == n]

    def totals(self, n: int) -> dict[str, float]:
        lds, us = self.ng_loads(n), self.ng_units(n)
        out = {"p_kw": sum(ld.p_kw for ld in lds), "q_kvar": sum(ld.q_kvar for ld in lds)}
        for k in GEN_KINDS:
            out[k] = sum(u.s_kva for u in us if u.kind == k)
        return out


# ---------------------------------------------------------------------------
# loading

def _vec3(val, phases: str, what: str, elem: str) -> np.ndarray:
    out = np.zeros(3)
    if val is None:
        return out
    if np.isscalar(val):
        for p in phases:
            out[PH_INDEX[p]] = float(val) / len(phases)
        return out
    vals = list(val)
    if len(vals) == 3:
        out[:] = vals
    elif len(vals) == len(phases):
        for p, v in zip(phases, vals):
            out[PH_INDEX[p]] = float(v)
    else:
        raise FeederError(f"{what} of {elem} needs 3 or {len(phases)} values", elem)
    mask = phase_mask(phases)
    if np.any(out[~mask] != 0):
        raise FeederError(f"{what} of {elem} set on an absent phase", elem)
    return out


def _mat3(spec, phases: str, mutual, elem: str, what: str) -> np.ndarray:
    m = np.zeros((3, 3))
    idx = [PH_INDEX[p] for p in phases]
    if np.isscalar(spec):
        for i in idx:
            m[i, i] = float(spec)
        if mutual:
            for i in idx:
                for j in idx:
                    if i != j:
                        m[i, j] = float(mutual)
        return m
    arr = np.asarray(spec, dtype=float)
    if arr.shape == (3, 3):
        m[:] = arr
    elif arr.shape == (len(idx), len(idx)):
        m[np.ix_(idx, idx)] = arr
    else:
        raise FeederError(f"{what} matrix of {elem} has shape {arr.shape}", elem)
    if not np.allclose(m, m.T, rtol=0, atol=1e-12):
        raise FeederError(f"{what} matrix of {elem} is not symmetric", elem)
    mask = phase_mask(phases)
    if np.any(m[~mask, :] != 0) or np.any(m[:, ~mask] != 0):
        raise FeederError(f"{what} matrix of {elem} has entries on absent phases", elem)
    return m


def _limit(val, phases: str, what: str, elem: str) -> np.ndarray | None:
    """Per-phase flow limit; a scalar applies to every phase present."""
    if val is None:
        return None
    if np.isscalar(val):
        return np.where(phase_mask(phases), float(val), 0.0)
    return _vec3(val, phases, what, elem)


def _check_unique(items, kind: str):
    seen = set()
    for it in items:
        key = str(it["id"])
        if key in seen:
            raise FeederError(f"duplicate {kind} id {key!r}", key)
        seen.add(key)


def load_network(source: str | Path | dict) -> NetworkModel:
    """Parse and validate a feeder description (path, YAML text, or dict)."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        p = Path(source) if isinstance(source, Path) or "\n" not in str(source) else None
        if p is not None and p.exists():
            text = p.read_text(encoding="utf-8")
        elif isinstance(source, Path):
            raise FeederError(f"feeder file {source} not found")
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise FeederError(f"feeder description does not parse: {exc}") from exc
    if not isinstance(doc, dict):
        raise FeederError("feeder description must be a mapping")
    ver = doc.get("schema_version", SCHEMA_VERSION)
    if ver != SCHEMA_VERSION:
        raise FeederError(f"unsupported schema_version {ver}")
    b = doc.get("base", {}) or {}
    base = Base(kva=float(b.get("kva", 3000.0)), kv=float(b.get("kv", 4.16)))

    raw_nodes = doc.get("nodes") or []
    raw_edges = doc.get("edges") or []
    raw_gens = doc.get("generators") or []
    raw_ngs = doc.get("node_groups") or []
    for items, kind in ((raw_nodes, "node"), (raw_edges, "edge"), (raw_gens, "generator"),
                        (raw_ngs, "node group")):
        _check_unique(items, kind)

    nodes: dict[str, Node] = {}
    for rn in raw_nodes:
        nid = str(rn["id"])
        ph = str(rn.get("phases", "ABC"))
        phase_mask(ph)
        cls = str(rn.get("load_class", "none"))
        if cls not in ("CL", "NCL", "none"):
            raise FeederError(f"node {nid} has unknown load class {cls!r}", nid)
        p = _vec3(rn.get("p_kw"), ph, "p_kw", nid)
        q = _vec3(rn.get("q_kvar"), ph, "q_kvar", nid)
        if np.any(p < 0) or np.any(q < 0):
            raise FeederError(f"node {nid} has negative load", nid)
        if cls == "none" and p.sum() > 0:
            raise FeederError(f"node {nid} has load but no load class", nid)
        nodes[nid] = Node(id=nid, phases=ph, p_kw=p, q_kvar=q, load_class=cls,
                          omega1=float(rn["omega1"]) if "omega1" in rn else -1.0,
                          dr_zone=str(rn.get("dr_zone", nid)))

    edges: dict[str, Edge] = {}
    for re_ in raw_edges:
        eid = str(re_["id"])
        f, t = str(re_["from"]), str(re_["to"])
        for end in (f, t):
            if end not in nodes:
                raise FeederError(f"edge {eid} references missing node {end!r}", eid)
        if f == t:
            raise FeederError(f"edge {eid} is a self loop", eid)
        ph = str(re_.get("phases", "ABC"))
        pm = phase_mask(ph)
        for end in (f, t):
            if np.any(pm & ~nodes[end].mask):
                raise FeederError(f"edge {eid} has phases absent at node {end}", eid)
        r = _mat3(re_.get("r", 0.0), ph, re_.get("r_mutual"), eid, "r")
        x = _mat3(re_.get("x", 0.0), ph, re_.get("x_mutual"), eid, "x")
        coupled = len(ph) == 1 or not np.isscalar(re_.get("r", 0.0)) or (
            "r_mutual" in re_ and "x_mutual" in re_)
        pmax = _limit(re_.get("p_max_kw"), ph, "p_max_kw", eid)
        qmax = _limit(re_.get("q_max_kvar"), ph, "q_max_kvar", eid)
        state = str(re_.get("normal_state", "closed"))
        if state not in ("open", "closed"):
            raise FeederError(f"edge {eid} has bad normal_state {state!r}", eid)
        edges[eid] = Edge(id=eid, f=f, t=t, phases=ph, r_ohm=r, x_ohm=x,
                          r=r / base.z, x=x / base.z,
                          p_max=pmax, q_max=qmax, coupled=coupled,
                          is_switch=bool(re_.get("switch", False)),
                          normally_closed=state == "closed")

    gens: dict[str, Generator] = {}
    for rg in raw_gens:
        gid = str(rg["id"])
        kind = str(rg["kind"])
        if kind not in GEN_KINDS:
            raise FeederError(f"generator {gid} has unknown kind {kind!r}", gid)
        node = str(rg["node"])
        if node not in nodes:
            raise FeederError(f"generator {gid} sits on missing node {node!r}", gid)
        ph = str(rg.get("phases", "ABC"))
        if np.any(phase_mask(ph) & ~nodes[node].mask):
            raise FeederError(f"generator {gid} connects to a phase absent at node {node}", gid)
        if kind == "PV-UC" and len(ph) != 1:
            raise FeederError(f"behind-the-meter PV {gid} must be single-phase", gid)
        kw = {k: rg[k] for k in ("e_kwh", "soc_min", "soc_max", "soc_op_min", "soc_op_max",
                                 "soc_init", "p_max", "p_min", "q_max", "q_min", "ramp",
                                 "fuel_max", "fuel_min", "fuel_init", "alpha", "beta") if k in rg}
        g = Generator(id=gid, kind=kind, node=node, phases=ph, s_kva=float(rg["s_kva"]),
                      grid_forming=bool(rg.get("grid_forming", False)),
                      **{k: float(v) for k, v in kw.items()})
        if g.s_kva <= 0:
            raise FeederError(f"generator {gid} needs a positive rating", gid)
        if kind == "DG":
            if g.p_max <= 0:
                g.p_max = g.s_kva
            if g.q_max <= 0:
                g.q_max = 0.6 * g.s_kva
            if "fuel_init" not in rg:
                g.fuel_init = g.fuel_max
            if not g.fuel_min <= g.fuel_init <= g.fuel_max:
                raise FeederError(f"DG {gid} initial fuel outside its limits", gid)
        if kind == "ES":
            if g.e_kwh <= 0:
                raise FeederError(f"storage {gid} needs a positive energy capacity", gid)
            if not 0 <= g.soc_init <= 100:
                raise FeederError(f"storage {gid} initial SOC outside [0, 100]", gid)
        if g.grid_forming and kind != "ES":
            raise FeederError(f"only storage may be grid-forming ({gid})", gid)
        gens[gid] = g
    gf = [g.id for g in gens.values() if g.grid_forming]
    if len(gf) != 1:
        raise FeederError(f"exactly one grid-forming storage unit required, found {len(gf)}",
                          gf[0] if gf else None, gf)

    groups: dict[int, NodeGroup] = {}
    if not raw_ngs:
        raw_ngs = [{"id": 1, "nodes": list(nodes)}]
    for rg in raw_ngs:
        gid = int(rg["id"])
        if gid < 1:
            raise FeederError(f"node group ids start at 1 (got {gid})", str(gid))
        ns = [str(n) for n in rg.get("nodes", [])]
        for n in ns:
            if n not in nodes:
                raise FeederError(f"node group {gid} lists missing node {n!r}", str(gid))
        parent = rg.get("parent")
        tie = rg.get("tie_edge")
        groups[gid] = NodeGroup(id=gid, node_ids=ns, parent=None if parent is None else int(parent),
                                tie_edge=None if tie is None else str(tie))

    model = NetworkModel(name=str(doc.get("name", "feeder")), base=base, nodes=nodes, edges=edges,
                         generators=gens, groups=groups, defaults=dict(doc.get("defaults") or {}))
    _finalise(model)
    return model


def _find_cycle(adj: dict[str, list[tuple[str, str]]], a: str, b: str, closing: str) -> list[str]:
    """Edges on the tree path a..b plus the closing edge."""
    prev: dict[str, tuple[str, str] | None] = {a: None}
    dq = deque([a])
    while dq:
        u = dq.popleft()
        if u == b:
            break
        for v, e in adj[u]:
            if v not in prev:
                prev[v] = (u, e)
                dq.append(v)
    path = []
    cur = b
    while prev.get(cur) is not None:
        u, e = prev[cur]
        path.append(e)
        cur = u
    return sorted(path + [closing])


def _finalise(m: NetworkModel) -> None:
    nodes, edges, groups = m.nodes, m.edges, m.groups
    if 1 not in groups:
        raise FeederError("node group 1 (the CMG) is missing", "1")
    g1 = groups[1]
    if g1.parent is not None or g1.tie_edge is not None:
        raise FeederError("node group 1 must have no parent and no tie edge", "1")
    owner: dict[str, int] = {}
    for g in groups.values():
        for n in g.node_ids:
            if n in owner:
                raise FeederError(f"node {n} belongs to node groups {owner[n]} and {g.id}", n)
            owner[n] = g.id
    missing = [n for n in nodes if n not in owner]
    if missing:
        raise FeederError(f"nodes {missing} are not in any node group", missing[0], missing)
    for n, g in owner.items():
        nodes[n].ng = g
    for g in m.generators.values():
        g.ng = owner[g.node]
    if m.grid_forming.ng != 1:
        raise FeederError("the grid-forming unit must sit inside node group 1", m.grid_forming.id)

    # parent tree of node groups
    for g in groups.values():
        if g.id == 1:
            continue
        if g.parent is None or g.parent not in groups:
            raise FeederError(f"node group {g.id} needs a valid parent", str(g.id))
        if g.tie_edge is None or g.tie_edge not in edges:
            raise FeederError(f"node group {g.id} needs a valid tie edge", str(g.id))
        te = edges[g.tie_edge]
        ends = {owner[te.f], owner[te.t]}
        if ends != {g.id, g.parent}:
            raise FeederError(f"tie edge {te.id} does not join node groups {g.id} and {g.parent}",
                              te.id)
    for g in groups.values():
        seen, cur = set(), g.id
        while cur is not None:
            if cur in seen:
                raise FeederError(f"node group parent relation has a cycle at {g.id}", str(g.id))
            seen.add(cur)
            cur = groups[cur].parent
    ties = {g.tie_edge for g in groups.values() if g.tie_edge}

    # radiality of the closed-edge graph (ties count as closed for the tree check)
    parent_uf = {n: n for n in nodes}

    def find(u):
        while parent_uf[u] != u:
            parent_uf[u] = parent_uf[parent_uf[u]]
            u = parent_uf[u]
        return u

    adj: dict[str, list[tuple[str, str]]] = defaultdict(list)
    active = [e for e in edges.values() if e.normally_closed or e.id in ties]
    for e in active:
        if e.id not in ties and owner[e.f] != owner[e.t]:
            raise FeederError(f"closed edge {e.id} crosses node groups without being a tie", e.id)
        ra, rb = find(e.f), find(e.t)
        if ra == rb:
            cyc = _find_cycle(adj, e.f, e.t, e.id)
            raise FeederError(f"closed topology is not radial; cycle through edges {cyc}",
                              e.id, cyc)
        parent_uf[ra] = rb
        adj[e.f].append((e.t, e.id))
        adj[e.t].append((e.f, e.id))
    roots = {find(n) for n in nodes}
    if len(roots) != 1:
        raise FeederError("feeder is disconnected with all tie switches closed")

    # orient the tree from the grid-forming node, order nodes breadth-first
    root = m.grid_forming.node
    order, pe = [root], {}
    dq = deque([root])
    seen = {root}
    while dq:
        u = dq.popleft()
        for v, e in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                pe[v] = e
                order.append(v)
                dq.append(v)
    m.root, m.node_order, m.parent_edge = root, order, pe
    for e in edges.values():
        if e.id not in pe.values():
            continue
        # store edges with f = parent side
        if pe.get(e.t) != e.id:
            e.f, e.t = e.t, e.f

    # omega1 defaults and the CL > NCL ordering
    for n in nodes.values():
        if n.load_class == "none":
            n.omega1 = 0.0
        elif n.omega1 < 0:
            n.omega1 = OMEGA1_DEFAULTS[(n.load_class, n.ng == 1)]
    cl = [n.omega1 for n in nodes.values() if n.load_class == "CL"]
    ncl = [n.omega1 for n in nodes.values() if n.load_class == "NCL"]
    if cl and ncl and min(cl) <= max(ncl):
        bad = min((n for n in nodes.values() if n.load_class == "CL"), key=lambda n: n.omega1)
        raise FeederError("every CL priority weight must exceed every NCL weight", bad.id)
    for g in groups.values():
        g.has_critical_load = any(nodes[n].load_class == "CL" for n in g.node_ids)

    # default flow limits: 1.5x feeder peak per phase
    peak = m.peak_load()
    lim = float(m.defaults.get("flow_limit_factor", 1.5)) * max(peak, 1.0)
    for e in edges.values():
        if e.p_max is None:
            e.p_max = np.where(e.mask, lim, 0.0)
        if e.q_max is None:
            e.q_max = np.where(e.mask, lim, 0.0)


def to_ohm(model: NetworkModel, edge_id: str) -> tuple[np.ndarray, np.ndarray]:
    e = model.edges[edge_id]
    return e.r * model.base.z, e.x * model.base.z


def aggregate_single_phase(model: NetworkModel) -> AggregatedModel:
    loads = [AggLoad(node=n.id, ng=n.ng, load_class=n.load_class, omega1=n.omega1,
                     p_kw=float(n.p_kw.sum()), q_kvar=float(n.q_kvar.sum()))
             for n in model.load_nodes()]
    units = [AggUnit(id=g.id, kind=g.kind, ng=g.ng, s_kva=g.s_kva, gen=g)
             for g in model.generators.values()]
    return AggregatedModel(groups=model.groups, loads=loads, units=units,
                           ancestry=ng_ancestry(model))


def ng_ancestry(model: NetworkModel | dict[int, NodeGroup]) -> list[tuple[int, int]]:
    groups = model.groups if isinstance(model, NetworkModel) else model
    out = []
    for g in sorted(groups.values(), key=lambda g: g.id):
        if g.parent is not None:
            out.append((g.parent, g.id))
    # order parents before children
    depth = {}
    for g in groups:
        d, cur = 0, groups[g].parent
        while cur is not None:
            d += 1
            cur = groups[cur].parent
        depth[g] = d
    return sorted(out, key=lambda pc: (depth[pc[1]], pc[1]))


def energized_closure(groups: dict[int, NodeGroup], theta: dict[int, int]) -> set[int]:
    """NGs actually connected to NG 1 given switch states theta."""
    on = {1}
    changed = True
    while changed:
        changed = False
        for g in groups.values():
            if g.id not in on and theta.get(g.id, 0) and g.parent in on:
                on.add(g.id)
                changed = True
    return on


def fixture_path(name: str) -> Path:
    return Path(__file__).parent / "data" / f"{name}.yaml"
