"""Global similarity hypergraph over one schema side.

Columns whose embedding cosine reaches the threshold tau get an undirected
link; connected components of those links are the "confusable groups" --
the sets of mutually near-duplicate columns that must be contrasted
jointly rather than scored one by one. Link construction is exact
all-pairs (quadratic), delegated to the compiled kernels. The built graph
is immutable and the per-query helpers (`expand_candidates`,
`groups_within`, `source_confusable_set`) only read it, so any number of
queries can share one instance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from construm import kernels
from construm.catalog import ColumnRef, SchemaCatalog, Side, as_side
from construm.gateway import EmbeddingVector, ModelGateway

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.90


@dataclass(frozen=True)
class SimilarityLink:
    """Undirected tau-link, stored with a < b in catalog order."""

    a: ColumnRef
    b: ColumnRef
    cosine: float


@dataclass(frozen=True)
class SimilarityGroup:
    """One confusable set of columns on one schema side."""

    members: frozenset[ColumnRef]
    side: Side

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, ref: ColumnRef) -> bool:
        return ref in self.members

    def sorted_members(self) -> list[ColumnRef]:
        return sorted(self.members, key=lambda r: r.sort_key)


def embedding_text(catalog: SchemaCatalog, ref: ColumnRef, include_table: bool = True) -> str:
    """Text a column embeds as (masked names once the catalog is masked)."""
    meta = catalog.meta(ref)
    table = catalog.table(ref.table_id)
    text = f"name: {catalog.display_name(ref)}. description: {meta.description}."
    if include_table:
        text += f" table: {table.name}."
    return text


class Hypergraph:
    """Immutable tau-thresholded similarity structure for one side."""

    def __init__(self, side: Side, tau: float, columns: Sequence[ColumnRef],
                 embeddings: dict[ColumnRef, EmbeddingVector],
                 links: Sequence[SimilarityLink], groups: Sequence[SimilarityGroup]):
        self.side = side
        self.tau = tau
        self.columns = tuple(columns)
        self.embeddings = embeddings
        self.links = tuple(links)
        self.groups = tuple(groups)
        self._index = {ref: i for i, ref in enumerate(self.columns)}
        self._group_of: dict[ColumnRef, SimilarityGroup] = {}
        for g in self.groups:
            for ref in g.members:
                self._group_of[ref] = g
        self._matrix: np.ndarray | None = None

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.ascontiguousarray(
                np.stack([self.embeddings[r].values for r in self.columns])
            )
        return self._matrix

    def index_of(self, ref: ColumnRef) -> int:
        return self._index[ref]

    def group_of(self, ref: ColumnRef) -> SimilarityGroup:
        return self._group_of[ref]

    def vector(self, ref: ColumnRef) -> np.ndarray:
        return self.embeddings[ref].values

    def cosine(self, a: ColumnRef, b: ColumnRef) -> float:
        return float(np.dot(self.vector(a), self.vector(b)))


def build_hypergraph(catalog: SchemaCatalog, gateway: ModelGateway, tau: float = DEFAULT_TAU,
                     include_table: bool = True) -> Hypergraph:
    """Embed every column and take exact all-pairs tau-links and components.

    Deterministic given the embeddings: link order is row-major over the
    catalog order and groups are sorted by their smallest member.
    """
    refs = list(catalog.refs())
    if not refs:
        raise ValueError("cannot build a hypergraph over an empty catalog")
    texts = [embedding_text(catalog, r, include_table) for r in refs]
    vectors = gateway.embed_batch(texts)
    embeddings = dict(zip(refs, vectors))
    matrix = np.ascontiguousarray(np.stack([v.values for v in vectors]))
    raw_links = kernels.threshold_links(matrix, tau)
    links = [SimilarityLink(refs[i], refs[j], cos) for i, j, cos in raw_links]
    groups = extract_groups(links, refs)
    return Hypergraph(catalog.side, tau, refs, embeddings, links, groups)


def extract_groups(links: Iterable[SimilarityLink],
                   all_columns: Sequence[ColumnRef]) -> list[SimilarityGroup]:
    """Connected components of the link structure, singletons included.

    Output order is deterministic: groups sorted by their smallest member
    in catalog order.
    """
    index = {ref: i for i, ref in enumerate(all_columns)}
    pairs = []
    for link in links:
        if link.a not in index or link.b not in index:
            raise ValueError(f"link references unknown column: {link.a} -- {link.b}")
        pairs.append((index[link.a], index[link.b]))
    labels = kernels.component_labels(len(all_columns), pairs)
    by_label: dict[int, list[ColumnRef]] = {}
    for ref, label in zip(all_columns, labels):
        by_label.setdefault(label, []).append(ref)
    side = all_columns[0].side if all_columns else Side.SOURCE
    return [
        SimilarityGroup(frozenset(members), side)
        for label, members in sorted(by_label.items())
    ]


def expand_candidates(c0: Sequence[ColumnRef], hypergraph: Hypergraph,
                      tau: float | None = None, cap_total: int = 5,
                      cap_strong: int = 3) -> list[ColumnRef]:
    """Grow a shortlist with near-duplicate neighbors of its strong head.

    The first ``cap_strong`` shortlist members are the strong candidates;
    columns with cosine >= tau to any of them join the candidate set,
    highest cosine first, up to ``cap_total`` additions. Shortlist order
    is preserved and additions are appended.
    """
    if not c0:
        raise ValueError("empty shortlist")
    tau = hypergraph.tau if tau is None else tau
    strong = list(c0)[:cap_strong]
    in_c0 = set(c0)
    best: dict[ColumnRef, float] = {}
    for s in strong:
        sv = hypergraph.vector(s)
        sims = hypergraph.matrix @ sv
        for ref, cos in zip(hypergraph.columns, sims):
            if ref in in_c0:
                continue
            cos = float(cos)
            if cos >= tau and cos > best.get(ref, -2.0):
                best[ref] = cos
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0].sort_key))
    return list(c0) + [ref for ref, _ in ranked[:cap_total]]


def groups_within(candidates: Sequence[ColumnRef], hypergraph: Hypergraph) -> list[SimilarityGroup]:
    """Confusable groups restricted to one query's candidate set.

    Links are recomputed from the stored embeddings at the graph's tau,
    over just the induced subset; singletons are kept.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    sub = np.ascontiguousarray(np.stack([hypergraph.vector(r) for r in candidates]))
    raw_links = kernels.threshold_links(sub, hypergraph.tau)
    links = [SimilarityLink(candidates[i], candidates[j], cos) for i, j, cos in raw_links]
    order = sorted(candidates, key=lambda r: r.sort_key)
    pos = {ref: i for i, ref in enumerate(order)}
    pairs = [(min(pos[l.a], pos[l.b]), max(pos[l.a], pos[l.b])) for l in links]
    labels = kernels.component_labels(len(order), pairs)
    by_label: dict[int, list[ColumnRef]] = {}
    for ref, label in zip(order, labels):
        by_label.setdefault(label, []).append(ref)
    return [
        SimilarityGroup(frozenset(members), hypergraph.side)
        for _, members in sorted(by_label.items())
    ]


def source_confusable_set(s: ColumnRef, hypergraph: Hypergraph,
                          restrict_to_table: bool = True) -> SimilarityGroup:
    """The confusable set around a query column on its own side.

    The stored component containing ``s``, optionally intersected with
    ``s``'s table to avoid cross-table noise; always contains ``s``.
    """
    group = hypergraph.group_of(s)
    if restrict_to_table:
        members = frozenset(r for r in group.members if r.table_id == s.table_id) | {s}
        group = SimilarityGroup(members, group.side)
    return group


# -- persistence -------------------------------------------------------------


def save_hypergraph(hg: Hypergraph, catalog: SchemaCatalog, path):
    doc = {
        "format": 1,
        "side": hg.side.value,
        "tau": hg.tau,
        "columns": [
            {"cid": catalog.meta(r).cid, "table_id": r.table_id, "ordinal": r.ordinal}
            for r in hg.columns
        ],
        "embeddings": [hg.embeddings[r].tolist() for r in hg.columns],
        "norms": [hg.embeddings[r].norm for r in hg.columns],
        "links": [
            [hg.index_of(l.a), hg.index_of(l.b), l.cosine] for l in hg.links
        ],
        "groups": [
            sorted(hg.index_of(r) for r in g.members) for g in hg.groups
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_hypergraph(path) -> Hypergraph:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    side = as_side(doc["side"])
    columns = [ColumnRef(side, c["table_id"], int(c["ordinal"])) for c in doc["columns"]]
    embeddings = {
        ref: EmbeddingVector(values=np.asarray(vec, dtype=np.float64), norm=float(norm))
        for ref, vec, norm in zip(columns, doc["embeddings"], doc["norms"])
    }
    links = [
        SimilarityLink(columns[int(i)], columns[int(j)], float(cos))
        for i, j, cos in doc["links"]
    ]
    groups = [
        SimilarityGroup(frozenset(columns[int(i)] for i in idxs), side)
        for idxs in doc["groups"]
    ]
    return Hypergraph(side, float(doc["tau"]), columns, embeddings, links, groups)
