"""Structured explanation artifacts built from a responsibility trajectory:
shared and specialized prototypes per class, key checkpoints, opposing
classes, uncertain-prototype findings, the annotated checkpoint graph and
the evolution matrix, plus deterministic DOT/CSV/JSON renderers.

Checkpoint-graph nodes are named "T<i>" where i is the transition ordinal
(T0 = first consecutive checkpoint pair).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import prototypes as proto_mod
from .errors import EmptyClassError, NotSupportingError
from .trajectory import ResponsibilityTrajectory

_FLIP_EPS = 1e-6  # |d| must clear this on both sides of a sign change


@dataclass
class PresenceIndex:
    """Per-sample prototype presence with labels, the input to the class-level
    reports. sets[i] is a frozenset of 1-based prototype ids."""

    sample_ids: np.ndarray
    labels: np.ndarray
    sets: list

    @staticmethod
    def from_assignments(assignments, labels) -> "PresenceIndex":
        return PresenceIndex(
            sample_ids=np.asarray(assignments.sample_ids, dtype=np.int64),
            labels=np.asarray(labels, dtype=np.int64),
            sets=proto_mod.presence(assignments),
        )

    def class_rows(self, c: int) -> list:
        rows = [i for i in range(len(self.sets)) if self.labels[i] == c]
        if not rows:
            raise EmptyClassError(f"class {c} has no samples")
        return rows


@dataclass
class SharedPrototypeSet:
    class_id: int
    prototypes: frozenset


def shared_prototypes(c: int, presence: PresenceIndex) -> SharedPrototypeSet:
    """Intersection of presence sets across every sample of class c."""
    rows = presence.class_rows(c)
    shared = set(presence.sets[rows[0]])
    for i in rows[1:]:
        shared &= presence.sets[i]
    return SharedPrototypeSet(class_id=c, prototypes=frozenset(shared))


@dataclass
class Subgroup:
    sample_ids: list
    prototypes: frozenset  # common within the subgroup, minus the shared set


@dataclass
class SpecializedPrototypeReport:
    class_id: int
    subgroups: list


def specialized_prototypes(c: int, presence: PresenceIndex,
                           shared: SharedPrototypeSet, subgroup_k: int,
                           seed: int = 0) -> SpecializedPrototypeReport:
    """K-Means over binary presence vectors splits the class into subgroups;
    each reports (common within subgroup) minus the class-shared set."""
    if subgroup_k < 1:
        raise EmptyClassError("subgroup_k must be >= 1")
    rows = presence.class_rows(c)
    k_max = max(p for s in (presence.sets[i] for i in rows) for p in s)
    vectors = np.zeros((len(rows), k_max))
    for idx, i in enumerate(rows):
        for p in presence.sets[i]:
            vectors[idx, p - 1] = 1.0
    k = min(subgroup_k, len(rows))
    if k == 1 or np.unique(vectors, axis=0).shape[0] < k:
        groups = [list(range(len(rows)))]
    else:
        book = proto_mod.fit_prototypes(vectors, k=k, seed=seed)
        d2 = ((vectors[:, None, :] - book.centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = d2.argmin(axis=1)
        groups = [np.where(assignments == g)[0].tolist() for g in range(k)]
        groups = [g for g in groups if g]
    subgroups = []
    for g in groups:
        common = set(presence.sets[rows[g[0]]])
        for idx in g[1:]:
            common &= presence.sets[rows[idx]]
        subgroups.append(Subgroup(
            sample_ids=sorted(int(presence.sample_ids[rows[idx]]) for idx in g),
            prototypes=frozenset(common - shared.prototypes),
        ))
    subgroups.sort(key=lambda s: s.sample_ids)
    return SpecializedPrototypeReport(class_id=c, subgroups=subgroups)


def key_checkpoints(traj: ResponsibilityTrajectory, c: int, eps_conf: float) -> list:
    """Transition ordinals where some cluster moved class-c confidence by at
    least eps_conf (|c_q[c]| >= eps_conf)."""
    if eps_conf <= 0:
        raise EmptyClassError(f"eps_conf {eps_conf} must be > 0")
    out = []
    for i, t in enumerate(traj.transitions):
        if t.q == 0:
            continue
        if np.abs(t.c_matrix[:, c]).max() >= eps_conf:
            out.append(i)
    return out


def opposing_classes(beta_t: np.ndarray, k: int, c: int, rho: float) -> list:
    """Classes whose confidence moves against prototype k's support of c:
    beta[k,a] < 0 with |beta[k,a]| >= rho * beta[k,c], strongest first."""
    row = np.asarray(beta_t)[k - 1]
    support = row[c]
    if support <= 0:
        raise NotSupportingError(f"beta[{k},{c}] = {support} is not positive")
    if not (0.0 < rho <= 1.0):
        raise NotSupportingError(f"rho {rho} outside (0, 1]")
    found = [(abs(row[a]), a) for a in range(row.shape[0])
             if a != c and row[a] < 0 and abs(row[a]) >= rho * support]
    found.sort(key=lambda t: (-t[0], t[1]))
    return [a for _, a in found]


@dataclass
class UncertainPrototypeFinding:
    """Prototype whose signed contribution between a class pair keeps
    flipping across key checkpoints. contributions lists (transition ordinal,
    d) with d = beta[k,b] - beta[k,a]."""

    pair: tuple
    prototype: int
    contributions: list
    flip_count: int
    supported: bool


def _count_flips(values) -> tuple:
    """Sign flips over a sequence, requiring |v| >= _FLIP_EPS on both sides.

    Returns (flip_count, flip_positions) where positions index the later
    element of each flipping pair."""
    flips = 0
    positions = []
    last_sign = 0
    for i, v in enumerate(values):
        if abs(v) < _FLIP_EPS:
            continue
        sign = 1 if v > 0 else -1
        if last_sign != 0 and sign != last_sign:
            flips += 1
            positions.append(i)
        last_sign = sign
    return flips, positions


def detect_uncertain(traj: ResponsibilityTrajectory, pair: tuple, eps_conf: float,
                     flip_min: int = 2) -> list:
    """Findings for prototypes alternating between the two classes.

    Over the key checkpoints of either class, d_k = beta[k, b] - beta[k, a];
    a prototype is reported when d_k's sign flips at least flip_min times.
    ``supported`` is set when some other prototype holds a same-sign
    contribution of magnitude >= eps_conf at every flip checkpoint.
    """
    a, b = pair
    if a == b:
        raise EmptyClassError("pair classes must differ")
    keys = sorted(set(key_checkpoints(traj, a, eps_conf))
                  | set(key_checkpoints(traj, b, eps_conf)))
    if not keys:
        return []
    betas = [traj.transitions[i].beta for i in keys]
    d = np.stack([bt[:, b] - bt[:, a] for bt in betas], axis=1)  # (K, T_key)
    findings = []
    for k in range(1, traj.k + 1):
        flips, positions = _count_flips(d[k - 1])
        if flips < flip_min:
            continue
        supported = False
        for other in range(1, traj.k + 1):
            if other == k:
                continue
            at_flips = d[other - 1][positions]
            if np.all(np.abs(at_flips) >= eps_conf) and (
                    np.all(at_flips > 0) or np.all(at_flips < 0)):
                supported = True
                break
        findings.append(UncertainPrototypeFinding(
            pair=(a, b),
            prototype=k,
            contributions=[(keys[i], float(d[k - 1][i])) for i in range(len(keys))],
            flip_count=flips,
            supported=supported,
        ))
    findings.sort(key=lambda f: (-f.flip_count, f.prototype))
    return findings


@dataclass
class GraphEdge:
    sources: tuple  # opposing class ids, ascending
    target: int  # transition ordinal
    prototypes: tuple  # 1-based ids, ascending


@dataclass
class AnnotatedCheckpointGraph:
    class_id: int
    nodes: list  # transition ordinals
    node_spans: dict  # ordinal -> (iteration_from, iteration_to)
    edges: list


def build_graph(traj: ResponsibilityTrajectory, c: int, eps_conf: float,
                rho: float) -> AnnotatedCheckpointGraph:
    """One node per key checkpoint; each supporting prototype contributes an
    edge from its opposing classes, merged per (sources, node) with sorted
    prototype labels."""
    nodes = key_checkpoints(traj, c, eps_conf)
    merged = {}
    for i in nodes:
        beta = traj.transitions[i].beta
        for k in range(1, traj.k + 1):
            if beta[k - 1, c] < eps_conf:
                continue
            sources = tuple(sorted(opposing_classes(beta, k, c, rho)))
            if not sources:
                continue
            merged.setdefault((i, sources), []).append(k)
    edges = [GraphEdge(sources=s, target=i, prototypes=tuple(sorted(ks)))
             for (i, s), ks in sorted(merged.items())]
    spans = {i: (traj.transitions[i].checkpoint_from, traj.transitions[i].checkpoint_to)
             for i in nodes}
    return AnnotatedCheckpointGraph(class_id=c, nodes=nodes, node_spans=spans, edges=edges)


_BLANK_NO_CHANGE = "no-change"
_BLANK_CONTRAST = "presence-contrast"


@dataclass
class MatrixCell:
    sign: int = 0  # 0 = blank
    bucket: int = 0  # 1..3 by |beta|/eps_conf
    opposer: int | None = None
    blank_kind: str | None = None


@dataclass
class EvolutionMatrix:
    class_id: int
    transitions: list  # ordinals (rows)
    prototypes: list  # 1-based ids (columns)
    cells: list  # row-major list of lists of MatrixCell
    eps_conf: float


def _bucket(magnitude: float, eps_conf: float) -> int:
    ratio = magnitude / eps_conf
    if ratio < 5.0:
        return 1
    if ratio < 25.0:
        return 2
    return 3


def evolution_matrix(traj: ResponsibilityTrajectory, c: int, protos,
                     eps_conf: float = 0.02, rho: float = 0.25,
                     shared_sets: dict | None = None) -> EvolutionMatrix:
    """Signed confidence-effect grid: rows = transitions, columns = the given
    prototypes. A cell is nonblank exactly when |beta[k,c]| >= eps_conf; its
    opposer is the strongest inverse-moving class. Blanks are "no-change",
    or "presence-contrast" when shared_sets show class c holds the prototype
    while the cell column's usual opposer does not."""
    if not protos:
        raise EmptyClassError("prototype set is empty")
    cols = sorted(int(p) for p in protos)
    ordinals = list(range(len(traj.transitions)))

    def strongest_opposer(beta, k):
        row = beta[k - 1]
        if row[c] > 0:
            opp = [(abs(row[a]), a) for a in range(row.shape[0])
                   if a != c and row[a] < 0]
        else:
            opp = [(abs(row[a]), a) for a in range(row.shape[0])
                   if a != c and row[a] > 0]
        if not opp:
            return None
        opp.sort(key=lambda t: (-t[0], t[1]))
        return opp[0][1]

    # modal opposer per column, for classifying blanks
    column_opposer = {}
    for k in cols:
        best = None
        best_mag = 0.0
        for i in ordinals:
            beta = traj.transitions[i].beta
            mag = abs(beta[k - 1, c])
            if mag >= eps_conf and mag > best_mag:
                cand = strongest_opposer(beta, k)
                if cand is not None:
                    best, best_mag = cand, mag
        column_opposer[k] = best

    rows = []
    for i in ordinals:
        beta = traj.transitions[i].beta
        row_cells = []
        for k in cols:
            value = beta[k - 1, c]
            if abs(value) >= eps_conf:
                row_cells.append(MatrixCell(
                    sign=1 if value > 0 else -1,
                    bucket=_bucket(abs(value), eps_conf),
                    opposer=strongest_opposer(beta, k),
                ))
            else:
                kind = _BLANK_NO_CHANGE
                if shared_sets is not None:
                    opp = column_opposer[k]
                    if (opp is not None and k in shared_sets.get(c, ())
                            and k not in shared_sets.get(opp, ())):
                        kind = _BLANK_CONTRAST
                row_cells.append(MatrixCell(blank_kind=kind))
        rows.append(row_cells)
    return EvolutionMatrix(class_id=c, transitions=ordinals, prototypes=cols,
                           cells=rows, eps_conf=eps_conf)


# --- renderers -----------------------------------------------------------------


def render_dot(graph: AnnotatedCheckpointGraph) -> str:
    """Byte-deterministic DOT digraph; checkpoint nodes "T<i>", class-set
    source nodes labeled with the opposing classes."""
    lines = [f"// annotated checkpoint graph for class {graph.class_id}"]
    if not graph.nodes and not graph.edges:
        lines.append("digraph i2x {}")
        return "\n".join(lines) + "\n"
    lines.append("digraph i2x {")
    lines.append("  rankdir=LR;")
    for i in graph.nodes:
        span = graph.node_spans[i]
        lines.append(f'  "T{i}" [shape=box label="T{i}\\n({span[0]}->{span[1]})"];')
    source_nodes = sorted({e.sources for e in graph.edges})
    for sources in source_nodes:
        name = "cls_" + "_".join(str(s) for s in sources)
        label = ",".join(str(s) for s in sources)
        lines.append(f'  "{name}" [shape=plaintext label="{label}"];')
    for e in sorted(graph.edges, key=lambda e: (e.target, e.sources)):
        name = "cls_" + "_".join(str(s) for s in e.sources)
        label = ",".join(f"P-{k}" for k in e.prototypes)
        lines.append(f'  "{name}" -> "T{e.target}" [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def render_csv(matrix: EvolutionMatrix) -> str:
    """Header row of prototype ids, then one row per transition. Nonblank
    cells read "<sign><bucket>(vs <class>)"; blanks are "" (no change) or
    "#" (presence contrast)."""
    lines = ["checkpoint," + ",".join(f"P-{k}" for k in matrix.prototypes)]
    for row_idx, i in enumerate(matrix.transitions):
        cells = []
        for cell in matrix.cells[row_idx]:
            if cell.sign == 0:
                cells.append("#" if cell.blank_kind == _BLANK_CONTRAST else "")
            else:
                text = f"{'+' if cell.sign > 0 else '-'}{cell.bucket}"
                if cell.opposer is not None:
                    text += f"(vs {cell.opposer})"
                cells.append(text)
        lines.append(f"T{i}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def graph_to_dict(graph: AnnotatedCheckpointGraph) -> dict:
    return {
        "class": graph.class_id,
        "nodes": [
            {"ordinal": i, "iteration_from": graph.node_spans[i][0],
             "iteration_to": graph.node_spans[i][1]}
            for i in graph.nodes
        ],
        "edges": [
            {"sources": list(e.sources), "target": e.target,
             "prototypes": list(e.prototypes)}
            for e in graph.edges
        ],
    }


@dataclass
class ExplanationReport:
    """Full structured explanation for a class and/or class pair."""

    params: dict
    class_id: int | None = None
    pair: tuple | None = None
    shared: SharedPrototypeSet | None = None
    specialized: SpecializedPrototypeReport | None = None
    key_checkpoint_list: list = field(default_factory=list)
    uncertain: list = field(default_factory=list)
    graph: AnnotatedCheckpointGraph | None = None

    def to_json(self) -> str:
        doc = {"params": self.params}
        doc["class"] = self.class_id
        doc["pair"] = list(self.pair) if self.pair is not None else None
        if self.shared is not None:
            doc["shared"] = {"class": self.shared.class_id,
                             "prototypes": sorted(self.shared.prototypes)}
        if self.specialized is not None:
            doc["specialized"] = {
                "class": self.specialized.class_id,
                "subgroups": [
                    {"samples": g.sample_ids, "prototypes": sorted(g.prototypes)}
                    for g in self.specialized.subgroups
                ],
            }
        doc["key_checkpoints"] = list(self.key_checkpoint_list)
        doc["uncertain"] = [
            {
                "pair": list(f.pair),
                "prototype": f.prototype,
                "contributions": [[t, d] for t, d in f.contributions],
                "flip_count": f.flip_count,
                "supported": f.supported,
            }
            for f in self.uncertain
        ]
        if self.graph is not None:
            doc["graph"] = graph_to_dict(self.graph)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def build_report(traj: ResponsibilityTrajectory, presence: PresenceIndex | None,
                 class_id: int | None = None, pair: tuple | None = None,
                 eps_conf: float = 0.02, rho: float = 0.25, flip_min: int = 2,
                 subgroup_k: int = 4, seed: int = 0) -> ExplanationReport:
    """Assemble every artifact that applies to the requested class/pair."""
    report = ExplanationReport(
        params={"eps_conf": eps_conf, "rho": rho, "flip_min": flip_min,
                "subgroup_k": subgroup_k, "seed": seed,
                "sigma": traj.sigma, "lambda": traj.lam},
        class_id=class_id,
        pair=pair,
    )
    if class_id is not None:
        if presence is not None:
            report.shared = shared_prototypes(class_id, presence)
            report.specialized = specialized_prototypes(
                class_id, presence, report.shared, subgroup_k, seed=seed)
        report.key_checkpoint_list = key_checkpoints(traj, class_id, eps_conf)
        report.graph = build_graph(traj, class_id, eps_conf, rho)
    if pair is not None:
        report.uncertain = detect_uncertain(traj, pair, eps_conf, flip_min)
    return report
