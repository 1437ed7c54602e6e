"""Context trees: a hierarchical summary index over one schema side.

Leaves hold spans of up to ``leaf_budget`` columns; internal nodes hold
increasingly coarse natural-language summaries, up through per-table roots
and cross-table cluster nodes to a single root. Wide tables are built in
four stages -- windowed batch summaries, a sampled global theme, an
LLM-proposed grouping plan (validated and repaired), and optional boundary
refinement for ordered tables -- recursing on any group still above the
leaf budget. Per-table trees are then merged bottom-up by agglomerative
clustering over root-summary embeddings.

A built tree is immutable. It answers two queries: the column-to-root
``lineage`` of summaries, and a budgeted ``ContextPack`` combining that
lineage with a few sibling relation snippets, truncated middle-out so the
leaf and root levels always survive.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from construm.catalog import ColumnRef, SchemaCatalog, Side, TableMeta, as_side
from construm.gateway import ChatCall, GatewayError, ModelGateway

logger = logging.getLogger(__name__)


class TreeError(Exception):
    pass


class UnknownColumnError(TreeError):
    pass


class PackBudgetError(TreeError):
    def __init__(self, budget: int, required: int):
        super().__init__(f"budget too small: {budget} chars given, {required} required")
        self.budget = budget
        self.required = required


class NodeKind(str, Enum):
    COLUMN_LEAF = "column_leaf"   # reserved: current builds always use group leaves
    GROUP_LEAF = "group_leaf"
    WITHIN_TABLE = "within_table"
    TABLE_ROOT = "table_root"
    CLUSTER = "cluster"
    DB_ROOT = "db_root"


@dataclass(frozen=True)
class TreeParams:
    window: int = 250          # columns per scan batch (W)
    leaf_budget: int = 50      # max columns per leaf (B)
    min_group: int = 10        # minimum split-group size (m)
    fan_out: int = 5           # target child groups per split (b)
    switch_budget: int = 2     # boundary moves allowed per refinement pass (s)
    cluster_threshold: float = 0.5  # cosine-distance merge cutoff (delta)
    sample_count: int = 20     # columns sampled for the global theme

    def validate(self):
        if not (self.window >= self.leaf_budget >= self.min_group >= 1):
            raise TreeError(
                f"require window >= leaf_budget >= min_group >= 1, got "
                f"{self.window}/{self.leaf_budget}/{self.min_group}"
            )
        if self.fan_out < 2:
            raise TreeError(f"fan_out must be >= 2, got {self.fan_out}")
        if not (0.0 < self.cluster_threshold < 2.0):
            raise TreeError(f"cluster_threshold must be in (0, 2), got {self.cluster_threshold}")
        if self.switch_budget < 0 or self.sample_count < 2:
            raise TreeError("switch_budget must be >= 0 and sample_count >= 2")


@dataclass(frozen=True)
class RelationCaps:
    per_column: int = 2     # snippets incident to any one sibling node
    per_leaf_min: int = 6   # requested lower bound (prompt hint, not enforced)
    per_leaf_max: int = 18  # hard cap on snippets kept per parent


@dataclass
class TreeNode:
    node_id: str
    kind: NodeKind
    summary: str
    children: tuple[str, ...] = ()
    span: tuple[str, int, int] | None = None      # (table_id, lo, hi) inclusive
    members: tuple[ColumnRef, ...] | None = None  # leaf columns


@dataclass(frozen=True)
class RelationSnippet:
    from_node: str
    to_node: str
    relation_text: str
    directed: bool = True


class ContextTree:
    def __init__(self, side: Side, root: str, nodes: dict[str, TreeNode],
                 params: TreeParams, relations: Sequence[RelationSnippet] = ()):
        self.side = side
        self.root = root
        self.nodes = nodes
        self.params = params
        self.relations = tuple(relations)
        self.parent: dict[str, str] = {}
        self.leaf_of: dict[ColumnRef, str] = {}
        for node in nodes.values():
            for child in node.children:
                if child in self.parent:
                    raise TreeError(f"node {child} has two parents")
                self.parent[child] = node.node_id
            if node.kind in (NodeKind.GROUP_LEAF, NodeKind.COLUMN_LEAF):
                for ref in node.members or ():
                    if ref in self.leaf_of:
                        raise TreeError(f"column {ref} appears under two leaves")
                    self.leaf_of[ref] = node.node_id
        if root in self.parent:
            raise TreeError("root must not have a parent")

    def node(self, node_id: str) -> TreeNode:
        return self.nodes[node_id]

    def depth(self, node_id: str) -> int:
        d = 0
        while node_id != self.root:
            node_id = self.parent[node_id]
            d += 1
        return d

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes.values()
                if n.kind in (NodeKind.GROUP_LEAF, NodeKind.COLUMN_LEAF)]

    def with_relations(self, relations: Sequence[RelationSnippet]) -> "ContextTree":
        return ContextTree(self.side, self.root, self.nodes, self.params, tuple(relations))


def lineage(tree: ContextTree, column: ColumnRef) -> list[TreeNode]:
    """Leaf-to-root path of nodes for one column (parent links only)."""
    leaf_id = tree.leaf_of.get(column)
    if leaf_id is None:
        raise UnknownColumnError(f"unknown column {column}")
    path = [tree.node(leaf_id)]
    node_id = leaf_id
    while node_id != tree.root:
        node_id = tree.parent[node_id]
        path.append(tree.node(node_id))
    return path


# -- prompt construction ------------------------------------------------------

_SUMMARY_DESC_CHARS = 120


def _column_lines(catalog: SchemaCatalog, refs: Sequence[ColumnRef]) -> str:
    lines = []
    for ref in refs:
        desc = catalog.meta(ref).description[:_SUMMARY_DESC_CHARS]
        lines.append(f"- {catalog.display_name(ref)}: {desc}")
    return "\n".join(lines)


def _span_of(refs: Sequence[ColumnRef]) -> tuple[int, int]:
    return refs[0].ordinal, refs[-1].ordinal


# -- stage 1: windowed batch summaries ---------------------------------------


def window_partition(n: int, window: int, min_group: int) -> list[tuple[int, int]]:
    """Contiguous (start, stop) windows covering 0..n; a trailing window
    shorter than ``min_group`` merges into its predecessor."""
    if n <= 0:
        return []
    bounds = list(range(0, n, window)) + [n]
    spans = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    if len(spans) > 1 and (spans[-1][1] - spans[-1][0]) < min_group:
        last = spans.pop()
        prev = spans.pop()
        spans.append((prev[0], last[1]))
    return spans


def stage1_window_summaries(catalog: SchemaCatalog, table: TableMeta,
                            window: int, gateway: ModelGateway,
                            min_group: int = 1) -> list[tuple[tuple[int, int], str]]:
    """One short LLM summary per scan window.

    Windows are contiguous ordinal ranges for ordered tables and
    fixed-size batches over the stable listing otherwise; either way they
    partition the table's columns.
    """
    refs = table.columns
    out = []
    for wi, (start, stop) in enumerate(window_partition(len(refs), window, min_group)):
        chunk = refs[start:stop]
        lo, hi = _span_of(chunk)
        prompt = (
            f"TASK: window-summary\n"
            f"TABLE: {table.name} ({table.table_id})\n"
            f"ORDERED: {'yes' if table.ordered else 'no'}\n"
            f"SPAN: {lo}..{hi}\n"
            f"COLUMNS:\n{_column_lines(catalog, chunk)}\n"
            f"Write a 1-2 sentence summary of what these columns cover."
        )
        try:
            reply = gateway.complete(ChatCall("tree_summary", prompt))
        except GatewayError as exc:
            raise TreeError(f"window {wi} ({lo}..{hi}) summary failed: {exc}") from exc
        out.append(((lo, hi), reply.text.strip()))
    return out


# -- stage 2: global theme ----------------------------------------------------


def even_sample_indices(n: int, k: int) -> list[int]:
    """Evenly spaced sample positions, first and last always included.

    ``round(i * (n - 1) / (k - 1))`` for i in 0..k-1; when k >= n every
    position is sampled exactly once.
    """
    if k >= n:
        return list(range(n))
    return [round(i * (n - 1) / (k - 1)) for i in range(k)]


def stage2_global_theme(catalog: SchemaCatalog, table: TableMeta,
                        sample_count: int, gateway: ModelGateway) -> str:
    """Theme/flow text inferred by the LLM from an even column sample."""
    if sample_count < 2:
        raise TreeError("sample_count must be >= 2")
    refs = table.columns
    sample = [refs[i] for i in even_sample_indices(len(refs), sample_count)]
    prompt = (
        f"TASK: table-theme\n"
        f"TABLE: {table.name} ({table.table_id})\n"
        f"SAMPLE COLUMNS:\n{_column_lines(catalog, sample)}\n"
        f"Describe the overall theme of this table and, if the order is "
        f"meaningful, its coarse progression, in 1-2 sentences."
    )
    return gateway.complete(ChatCall("tree_summary", prompt)).text.strip()


# -- stage 3: grouping plan ---------------------------------------------------


@dataclass(frozen=True)
class PlanGroup:
    label: str
    columns: tuple[ColumnRef, ...]  # contiguous span when the table is ordered


@dataclass(frozen=True)
class GroupingPlan:
    groups: tuple[PlanGroup, ...]
    ordered: bool


_ORDERED_GROUP_RE = re.compile(r"\[(\d+)\.\.(\d+)\]\s*=\s*([^,\n\]]+)")
_UNORDERED_GROUP_RE = re.compile(r"\{([\d,\s]+)\}\s*=\s*([^,\n]+)")


def _parse_plan(reply: str, refs: Sequence[ColumnRef], ordered: bool) -> list[PlanGroup] | None:
    by_ordinal = {r.ordinal: r for r in refs}
    if ordered:
        found = []
        for m in _ORDERED_GROUP_RE.finditer(reply):
            lo, hi, label = int(m.group(1)), int(m.group(2)), m.group(3).strip()
            found.append((lo, hi, label))
        if not found:
            return None
        found.sort()
        lo0, hi0 = refs[0].ordinal, refs[-1].ordinal
        cursor = lo0
        groups = []
        for lo, hi, label in found:
            if lo != cursor or hi < lo or hi > hi0:
                return None
            groups.append(PlanGroup(label, tuple(by_ordinal[o] for o in range(lo, hi + 1))))
            cursor = hi + 1
        if cursor != hi0 + 1:
            return None
    else:
        found = []
        for m in _UNORDERED_GROUP_RE.finditer(reply):
            try:
                positions = [int(x) for x in m.group(1).split(",") if x.strip()]
            except ValueError:
                return None
            found.append((positions, m.group(2).strip()))
        if not found:
            return None
        seen: set[int] = set()
        groups = []
        for positions, label in found:
            if any(p < 0 or p >= len(refs) or p in seen for p in positions) or not positions:
                return None
            seen.update(positions)
            groups.append(PlanGroup(label, tuple(refs[p] for p in sorted(positions))))
        if len(seen) != len(refs):
            return None
    if len(groups) < 2:
        return None  # a single group makes no progress; force fallback
    return groups


def repair_plan(groups: list[PlanGroup], min_group: int, max_groups: int,
                ordered: bool, centroids: Sequence[np.ndarray] | None = None) -> list[PlanGroup]:
    """Merge undersized groups, then enforce the group-count cap.

    Ordered tables: a scan merges each undersized group into its smaller
    adjacent neighbor (left on ties), restarting until stable. Unordered
    tables merge into the nearest-centroid group. Finally adjacent (or
    smallest) pairs merge until at most ``max_groups`` remain.
    """
    groups = list(groups)

    def merge(i: int, j: int):
        i, j = min(i, j), max(i, j)
        a, b = groups[i], groups[j]
        cols = a.columns + b.columns
        if not ordered:
            cols = tuple(sorted(cols, key=lambda r: r.sort_key))
        label = a.label if len(a.columns) >= len(b.columns) else b.label
        groups[i] = PlanGroup(label, cols)
        del groups[j]
        if centroids is not None:
            centroids[i] = centroids[i] + centroids[j]
            del centroids[j]

    changed = True
    while changed and len(groups) > 1:
        changed = False
        for i, g in enumerate(groups):
            if len(g.columns) >= min_group:
                continue
            if ordered:
                neighbors = [j for j in (i - 1, i + 1) if 0 <= j < len(groups)]
                target = min(neighbors, key=lambda j: (len(groups[j].columns), j))
            else:
                others = [j for j in range(len(groups)) if j != i]
                if centroids is not None:
                    def _cos(j):
                        a, b = centroids[i], centroids[j]
                        denom = float(np.linalg.norm(a) * np.linalg.norm(b)) or 1.0
                        return float(np.dot(a, b)) / denom
                    target = max(others, key=lambda j: (_cos(j), -j))
                else:
                    target = min(others, key=lambda j: (len(groups[j].columns), j))
            merge(i, target)
            changed = True
            break
    while len(groups) > max_groups:
        if ordered:
            i = min(range(len(groups) - 1),
                    key=lambda i: (len(groups[i].columns) + len(groups[i + 1].columns), i))
            merge(i, i + 1)
        else:
            order = sorted(range(len(groups)), key=lambda i: (len(groups[i].columns), i))
            merge(order[0], order[1])
    return groups


def uniform_split(refs: Sequence[ColumnRef], fan_out: int, min_group: int) -> list[PlanGroup]:
    """Fallback plan: near-equal spans. Sized to respect ``min_group`` when

    possible; when the span is too small for two minimum-size groups the
    size floor is relaxed (the leaf budget is the invariant that must
    hold, not the floor)."""
    n = len(refs)
    g = min(fan_out, max(2, n // min_group)) if n >= 2 * min_group else 2
    g = min(g, n)
    base, extra = divmod(n, g)
    groups = []
    start = 0
    for i in range(g):
        size = base + (1 if i < extra else 0)
        groups.append(PlanGroup(f"part {i + 1}", tuple(refs[start:start + size])))
        start += size
    return groups


def stage3_conceptual_map(catalog: SchemaCatalog, table: TableMeta,
                          window_summaries: list[tuple[tuple[int, int], str]],
                          theme: str, params: TreeParams,
                          gateway: ModelGateway) -> GroupingPlan:
    """Ask for a labeled partition of the table's columns and repair it.

    The reply must list groups as ``[lo..hi]=label`` lines (ordered) or
    ``{i,j,...}=label`` lines over listing positions (unordered). An
    unparseable or non-covering reply is re-prompted once, then the
    uniform fallback split applies.
    """
    refs = table.columns
    lo, hi = _span_of(refs)
    summary_lines = "\n".join(f"- [{a}..{b}] {s}" for (a, b), s in window_summaries)
    fmt = "[lo..hi]=label" if table.ordered else "{positions}=label (0-based listing positions)"
    base_prompt = (
        f"TASK: group-plan\n"
        f"TABLE: {table.name} ({table.table_id})\n"
        f"ORDERED: {'yes' if table.ordered else 'no'}\n"
        f"SPAN: {lo}..{hi}\n"
        f"FANOUT: {params.fan_out}\n"
        f"MIN_GROUP: {params.min_group}\n"
        f"THEME: {theme}\n"
        f"WINDOW SUMMARIES:\n{summary_lines}\n"
        f"Partition all columns into roughly {params.fan_out} labeled groups "
        f"(at most {params.fan_out * 2}), each of at least {params.min_group} "
        f"columns, one per line as {fmt}."
    )
    groups = None
    prompt = base_prompt
    for attempt in range(2):
        reply = gateway.complete(ChatCall("tree_summary", prompt))
        groups = _parse_plan(reply.text, refs, table.ordered)
        if groups is not None:
            break
        prompt = base_prompt + (
            "\nYour previous reply could not be parsed or did not cover every "
            "column exactly once. Reply with group lines only."
        )
    if groups is None:
        logger.warning("grouping plan unusable for %s %s..%s; uniform fallback",
                       table.table_id, lo, hi)
        groups = uniform_split(refs, params.fan_out, params.min_group)
    else:
        centroids = None
        if not table.ordered and any(len(g.columns) < params.min_group for g in groups):
            vecs = _member_centroid_vectors(catalog, groups, gateway)
            centroids = list(vecs)
        groups = repair_plan(groups, params.min_group, params.fan_out * 2,
                             table.ordered, centroids)
        if len(groups) < 2:
            groups = uniform_split(refs, params.fan_out, params.min_group)
    return GroupingPlan(tuple(groups), table.ordered)


def _member_centroid_vectors(catalog: SchemaCatalog, groups: Sequence[PlanGroup],
                             gateway: ModelGateway) -> list[np.ndarray]:
    from construm.graph import embedding_text

    texts = []
    spans = []
    for g in groups:
        start = len(texts)
        texts.extend(embedding_text(catalog, r) for r in g.columns)
        spans.append((start, len(texts)))
    vectors = gateway.embed_batch(texts)
    return [
        np.sum([vectors[i].values for i in range(a, b)], axis=0) for a, b in spans
    ]


# -- stage 4: boundary refinement ---------------------------------------------

_MOVE_RE = re.compile(r"MOVE\s+(\d+)\s*->\s*(\d+)")


def stage4_refine_boundaries(catalog: SchemaCatalog, table: TableMeta,
                             plan: GroupingPlan, params: TreeParams,
                             gateway: ModelGateway) -> GroupingPlan:
    """Re-scan an ordered table and let the LLM nudge group boundaries.

    At most ``switch_budget`` moves apply per pass, in scan order; a move
    that would break contiguity or the minimum group size is discarded
    (logged) and the original boundary kept.
    """
    if not plan.ordered:
        return plan
    refs = table.columns
    lo, hi = _span_of(refs)
    boundaries = [g.columns[0].ordinal for g in plan.groups[1:]]
    if not boundaries:
        return plan
    labels = [g.label for g in plan.groups]
    moves_used = 0
    for start, stop in window_partition(len(refs), params.window, params.min_group):
        w_lo, w_hi = refs[start].ordinal, refs[stop - 1].ordinal
        local = [b for b in boundaries if w_lo <= b <= w_hi]
        if not local:
            continue
        group_lines = "\n".join(
            f"[{g.columns[0].ordinal}..{g.columns[-1].ordinal}]={g.label}"
            for g in plan.groups
        )
        prompt = (
            f"TASK: boundary-check\n"
            f"TABLE: {table.name} ({table.table_id})\n"
            f"SPAN: {lo}..{hi}\n"
            f"WINDOW: {w_lo}..{w_hi}\n"
            f"BOUNDARIES: {', '.join(str(b) for b in local)}\n"
            f"GROUPS:\n{group_lines}\n"
            f"COLUMNS:\n{_column_lines(catalog, refs[start:stop])}\n"
            f"If a group should begin at a different column, reply with lines "
            f"'MOVE <old> -> <new>'; otherwise reply 'KEEP'."
        )
        reply = gateway.complete(ChatCall("tree_summary", prompt))
        for m in _MOVE_RE.finditer(reply.text):
            old, new = int(m.group(1)), int(m.group(2))
            if moves_used >= params.switch_budget:
                logger.info("boundary move %d->%d discarded: switch budget spent", old, new)
                continue
            if old not in boundaries:
                logger.info("boundary move %d->%d discarded: not a boundary", old, new)
                continue
            i = boundaries.index(old)
            prev_start = boundaries[i - 1] if i > 0 else lo
            next_start = boundaries[i + 1] if i + 1 < len(boundaries) else hi + 1
            if not (prev_start + params.min_group <= new <= next_start - params.min_group):
                logger.info("boundary move %d->%d discarded: breaks group sizes", old, new)
                continue
            boundaries[i] = new
            moves_used += 1
    by_ordinal = {r.ordinal: r for r in refs}
    edges = [lo] + boundaries + [hi + 1]
    groups = [
        PlanGroup(labels[i], tuple(by_ordinal[o] for o in range(edges[i], edges[i + 1])))
        for i in range(len(labels))
    ]
    return GroupingPlan(tuple(groups), True)


# -- per-table build ----------------------------------------------------------


def _summarize_leaf(catalog: SchemaCatalog, table: TableMeta,
                    refs: Sequence[ColumnRef], gateway: ModelGateway) -> str:
    lo, hi = _span_of(refs)
    prompt = (
        f"TASK: leaf-summary\n"
        f"TABLE: {table.name} ({table.table_id})\n"
        f"SPAN: {lo}..{hi}\n"
        f"COLUMNS:\n{_column_lines(catalog, refs)}\n"
        f"Write a 1-2 sentence summary of this span of columns."
    )
    return gateway.complete(ChatCall("tree_summary", prompt)).text.strip()


def _summarize_node(task: str, context: str, child_summaries: Sequence[str],
                    gateway: ModelGateway) -> str:
    lines = "\n".join(f"- {s}" for s in child_summaries)
    prompt = (
        f"TASK: {task}\n{context}"
        f"CHILD SUMMARIES:\n{lines}\n"
        f"Write a 1-2 sentence summary covering all of the above."
    )
    return gateway.complete(ChatCall("tree_summary", prompt)).text.strip()


def build_table_tree(catalog: SchemaCatalog, table: TableMeta, params: TreeParams,
                     gateway: ModelGateway) -> dict[str, TreeNode]:
    """Build one table's subtree; the root node id is ``tbl:<table_id>``.

    Tables at or under the leaf budget become a root plus a single group
    leaf (so "leaf" uniformly means a span of columns and lineage depths
    stay comparable); wider tables go through the staged plan-and-recurse
    path. Every internal node carries an LLM summary.
    """
    params.validate()
    nodes: dict[str, TreeNode] = {}
    root_id = f"tbl:{table.table_id}"

    def make_leaf(node_id: str, refs: Sequence[ColumnRef]) -> TreeNode:
        node = TreeNode(
            node_id=node_id, kind=NodeKind.GROUP_LEAF,
            summary=_summarize_leaf(catalog, table, refs, gateway),
            span=(table.table_id, refs[0].ordinal, refs[-1].ordinal) if table.ordered else None,
            members=tuple(refs),
        )
        nodes[node_id] = node
        return node

    def build_block(node_id: str, refs: Sequence[ColumnRef], kind: NodeKind) -> TreeNode:
        if len(refs) <= params.leaf_budget:
            return make_leaf(node_id, refs)
        view = replace(table, columns=tuple(refs))
        windows = stage1_window_summaries(catalog, view, params.window, gateway,
                                          params.min_group)
        theme = stage2_global_theme(catalog, view, min(len(refs), params.sample_count),
                                    gateway)
        plan = stage3_conceptual_map(catalog, view, windows, theme, params, gateway)
        if table.ordered:
            plan = stage4_refine_boundaries(catalog, view, plan, params, gateway)
        children = []
        for gi, group in enumerate(plan.groups):
            child = build_block(f"{node_id}.{gi}", group.columns,
                                NodeKind.WITHIN_TABLE)
            children.append(child)
        context = f"TABLE: {table.name} ({table.table_id})\nTHEME: {theme}\n"
        node = TreeNode(
            node_id=node_id, kind=kind,
            summary=_summarize_node("node-summary", context,
                                    [c.summary for c in children], gateway),
            children=tuple(c.node_id for c in children),
            span=(table.table_id, refs[0].ordinal, refs[-1].ordinal) if table.ordered else None,
        )
        nodes[node_id] = node
        return node

    n = len(table.columns)
    if n <= params.leaf_budget:
        leaf = make_leaf(f"{root_id}.0", table.columns)
        nodes[root_id] = TreeNode(
            node_id=root_id, kind=NodeKind.TABLE_ROOT,
            summary=table.description.strip() or leaf.summary,
            children=(leaf.node_id,),
            span=(table.table_id, 0, n - 1) if table.ordered else None,
        )
    else:
        top = build_block(root_id, table.columns, NodeKind.TABLE_ROOT)
        nodes[root_id] = top
    return nodes


# -- database-level clustering ------------------------------------------------


def cluster_tables(table_trees: Sequence[dict[str, TreeNode]], params: TreeParams,
                   gateway: ModelGateway, side: Side) -> ContextTree:
    """Merge per-table subtrees into one connected tree.

    Average-linkage agglomerative merging on cosine distance between
    root-summary embeddings: the nearest pair merges first (ties broken by
    the lexicographically smallest table-id pair) while the distance stays
    at or under the cutoff; whatever remains is joined under a final
    database root. A single table's root doubles as the database root.
    """
    params.validate()
    if not table_trees:
        raise TreeError("no table trees to cluster")

    def subtree_root(sub: dict[str, TreeNode]) -> str:
        children = {c for n in sub.values() for c in n.children}
        top = [nid for nid in sub if nid not in children]
        if len(top) != 1:
            raise TreeError(f"subtree has {len(top)} roots")
        return top[0]

    nodes: dict[str, TreeNode] = {}
    roots = []
    for sub in table_trees:
        roots.append(subtree_root(sub))
        nodes.update(sub)
    roots.sort()
    if len(roots) == 1:
        return ContextTree(side, roots[0], nodes, params)

    vectors = np.stack([
        v.values for v in gateway.embed_batch([nodes[r].summary for r in roots])
    ])
    dist = 1.0 - vectors @ vectors.T

    @dataclass
    class _Cluster:
        root_id: str
        items: list[int]        # indices into the original root list
        key: str                # smallest member table root id

    clusters = [_Cluster(r, [i], r) for i, r in enumerate(roots)]
    counter = 0

    def avg_distance(a: _Cluster, b: _Cluster) -> float:
        return float(np.mean([dist[i, j] for i in a.items for j in b.items]))

    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                a, b = clusters[i], clusters[j]
                ka, kb = sorted((a.key, b.key))
                cand = (avg_distance(a, b), ka, kb, i, j)
                if best is None or cand[:3] < best[:3]:
                    best = cand
        assert best is not None
        d, _, _, i, j = best
        if d > params.cluster_threshold:
            break
        a, b = clusters[i], clusters[j]
        counter += 1
        node_id = f"grp:{counter}"
        summary = _summarize_node(
            "cluster-summary", "",
            [nodes[a.root_id].summary, nodes[b.root_id].summary], gateway,
        )
        nodes[node_id] = TreeNode(
            node_id=node_id, kind=NodeKind.CLUSTER, summary=summary,
            children=tuple(sorted((a.root_id, b.root_id))),
        )
        merged = _Cluster(node_id, a.items + b.items, min(a.key, b.key))
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(merged)

    if len(clusters) == 1:
        return ContextTree(side, clusters[0].root_id, nodes, params)
    clusters.sort(key=lambda c: c.key)
    summary = _summarize_node(
        "node-summary", "",
        [nodes[c.root_id].summary for c in clusters], gateway,
    )
    root_id = "db:root"
    nodes[root_id] = TreeNode(
        node_id=root_id, kind=NodeKind.DB_ROOT, summary=summary,
        children=tuple(c.root_id for c in clusters),
    )
    return ContextTree(side, root_id, nodes, params)


# -- sibling relation annotation ----------------------------------------------


def _alias(i: int) -> str:
    letters = ""
    i += 1
    while i:
        i, rem = divmod(i - 1, 26)
        letters = chr(ord("A") + rem) + letters
    return letters


_RELATION_RE = re.compile(r"^\s*([A-Z]+)\s*->\s*([A-Z]+)\s*:\s*(.+?)\s*$", re.MULTILINE)


def annotate_sibling_relations(tree: ContextTree, parent_id: str, gateway: ModelGateway,
                               caps: RelationCaps = RelationCaps(),
                               timeout: float = 75.0) -> list[RelationSnippet]:
    """Ask for directed 1-2 sentence relations between a node's children.

    Replies use alias arrows (``A -> B: text``). Proposals naming unknown
    aliases are dropped and logged; survivors are capped in reply order at
    ``per_column`` incident snippets per sibling and ``per_leaf_max``
    total.
    """
    parent = tree.node(parent_id)
    if len(parent.children) < 2:
        return []
    aliases = {_alias(i): cid for i, cid in enumerate(parent.children)}
    sibling_lines = "\n".join(
        f"{a}={cid}: {tree.node(cid).summary}" for a, cid in aliases.items()
    )
    prompt = (
        f"TASK: sibling-relations\n"
        f"PARENT: {parent_id}\n"
        f"SIBLINGS:\n{sibling_lines}\n"
        f"Propose between {caps.per_leaf_min} and {caps.per_leaf_max} directed "
        f"relations between these parts (fewer if none exist), one per line as "
        f"'A -> B: one or two sentences'."
    )
    reply = gateway.complete(ChatCall("relation", prompt, timeout=timeout))
    incident: dict[str, int] = {}
    kept: list[RelationSnippet] = []
    for m in _RELATION_RE.finditer(reply.text):
        src, dst, text = m.group(1), m.group(2), m.group(3)
        if src not in aliases or dst not in aliases or src == dst:
            logger.info("dropping relation with unknown sibling %s -> %s", src, dst)
            continue
        if len(kept) >= caps.per_leaf_max:
            break
        from_id, to_id = aliases[src], aliases[dst]
        if incident.get(from_id, 0) >= caps.per_column or incident.get(to_id, 0) >= caps.per_column:
            continue
        kept.append(RelationSnippet(from_id, to_id, text))
        incident[from_id] = incident.get(from_id, 0) + 1
        incident[to_id] = incident.get(to_id, 0) + 1
    return kept


# -- full build ---------------------------------------------------------------


def build_context_tree(catalog: SchemaCatalog, params: TreeParams, gateway: ModelGateway,
                       annotate_relations: bool = False,
                       relation_caps: RelationCaps = RelationCaps(),
                       relation_timeout: float = 75.0,
                       workers: int = 1, partial_path=None) -> ContextTree:
    """Build the whole per-side tree: per-table subtrees, then clustering.

    Table subtrees are independent and build concurrently when ``workers``
    > 1. If a gateway error aborts the build and ``partial_path`` is set,
    completed subtrees are saved there and reused on the next attempt.
    """
    params.validate()
    done: dict[str, dict[str, TreeNode]] = {}
    if partial_path is not None and Path(partial_path).exists():
        doc = json.loads(Path(partial_path).read_text(encoding="utf-8"))
        for table_id, payload in doc.get("tables", {}).items():
            done[table_id] = {
                nid: _node_from_dict(nid, nd, catalog.side) for nid, nd in payload.items()
            }
        logger.info("resuming build: %d table subtrees loaded from %s", len(done), partial_path)

    pending = [t for t in catalog.tables if t.table_id not in done]
    try:
        if workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {
                    t.table_id: pool.submit(build_table_tree, catalog, t, params, gateway)
                    for t in pending
                }
                for table_id, fut in futures.items():
                    done[table_id] = fut.result()
        else:
            for t in pending:
                done[t.table_id] = build_table_tree(catalog, t, params, gateway)
    except (GatewayError, TreeError):
        if partial_path is not None and done:
            _save_partial(done, partial_path)
            logger.warning("build aborted; %d completed subtrees saved to %s",
                           len(done), partial_path)
        raise

    subtrees = [done[t.table_id] for t in catalog.tables]
    tree = cluster_tables(subtrees, params, gateway, catalog.side)
    if annotate_relations:
        relations: list[RelationSnippet] = []
        for node_id in sorted(tree.nodes):
            if len(tree.node(node_id).children) >= 2:
                relations.extend(annotate_sibling_relations(
                    tree, node_id, gateway, relation_caps, relation_timeout))
        tree = tree.with_relations(relations)
    if partial_path is not None:
        Path(partial_path).unlink(missing_ok=True)
    return tree


def _save_partial(done: dict[str, dict[str, TreeNode]], path):
    doc = {"tables": {
        table_id: {nid: _node_to_dict(n) for nid, n in sub.items()}
        for table_id, sub in done.items()
    }}
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


# -- context packs ------------------------------------------------------------


@dataclass(frozen=True)
class ContextPack:
    column: ColumnRef
    lineage_summaries: tuple[tuple[int, str], ...]  # (depth, summary), leaf -> root
    relation_lines: tuple[str, ...]
    rendered: str
    budget: int


def _render_pack(header: list[str], levels: list[tuple[int, str]],
                 relations: list[str]) -> str:
    lines = list(header)
    lines.append("Path to root (summaries):")
    for i, (_, summary) in enumerate(levels):
        lines.append(f"- [{i + 1}] {summary}")
    if relations:
        lines.append("Relation snippets (selected):")
        lines.extend(f"- {r}" for r in relations)
    return "\n".join(lines)


def select_relation_lines(tree: ContextTree, path: Sequence[TreeNode],
                          max_relations: int) -> list[str]:
    """Relation snippets touching the lineage, nearest the leaf first."""
    on_path = {node.node_id: i for i, node in enumerate(path)}  # 0 = leaf
    scored = []
    for order, snippet in enumerate(tree.relations):
        touches = [on_path[n] for n in (snippet.from_node, snippet.to_node) if n in on_path]
        if touches:
            scored.append((min(touches), order, snippet.relation_text))
    scored.sort()
    return [text for _, _, text in scored[:max_relations]]


def middle_out_drop_order(n_levels: int) -> list[int]:
    """Indices of interior lineage levels in drop order (center first,
    root-ward on ties); leaf (0) and root (n-1) are never dropped."""
    interior = list(range(1, n_levels - 1))
    center = (n_levels - 1) / 2
    return sorted(interior, key=lambda i: (abs(i - center), -i))


def build_context_pack(tree: ContextTree, catalog: SchemaCatalog, column: ColumnRef,
                       budget: int, max_relations: int = 3) -> ContextPack:
    """Budgeted evidence block for one column.

    Renders the column header, the leaf-to-root lineage summaries, and up
    to ``max_relations`` relation snippets. Over budget, relation snippets
    drop first (least relevant first), then interior lineage levels drop
    middle-out; the leaf and root summaries always survive. The rendered
    text never exceeds ``budget``; a budget below the minimal pack raises
    :class:`PackBudgetError` naming the required minimum.
    """
    path = lineage(tree, column)
    meta = catalog.meta(column)
    header = [f"Column: {catalog.display_name(column)}"]
    if meta.description:
        header.append(f"Description: {meta.description}")
    depth_max = len(path) - 1
    levels = [(depth_max - i, node.summary) for i, node in enumerate(path)]
    relations = select_relation_lines(tree, path, max_relations)

    minimal_levels = [levels[0]] if len(levels) == 1 else [levels[0], levels[-1]]
    minimal = len(_render_pack(header, minimal_levels, []))
    if budget < minimal:
        raise PackBudgetError(budget, minimal)

    relations = list(relations)
    while relations and len(_render_pack(header, levels, relations)) > budget:
        relations.pop()
    keep = list(range(len(levels)))
    for idx in middle_out_drop_order(len(levels)):
        if len(_render_pack(header, [levels[i] for i in keep], relations)) <= budget:
            break
        keep.remove(idx)
    kept_levels = [levels[i] for i in keep]
    rendered = _render_pack(header, kept_levels, relations)
    assert len(rendered) <= budget
    return ContextPack(
        column=column,
        lineage_summaries=tuple(kept_levels),
        relation_lines=tuple(relations),
        rendered=rendered,
        budget=budget,
    )


# -- serialization ------------------------------------------------------------


def _node_to_dict(node: TreeNode) -> dict:
    d = {"kind": node.kind.value, "summary": node.summary, "children": list(node.children)}
    if node.span is not None:
        d["span"] = [node.span[0], node.span[1], node.span[2]]
    if node.members is not None:
        d["members"] = [[r.table_id, r.ordinal] for r in node.members]
    return d


def _node_from_dict(node_id: str, d: dict, side: Side) -> TreeNode:
    span = d.get("span")
    members = d.get("members")
    return TreeNode(
        node_id=node_id,
        kind=NodeKind(d["kind"]),
        summary=d["summary"],
        children=tuple(d.get("children", ())),
        span=(span[0], int(span[1]), int(span[2])) if span else None,
        members=tuple(ColumnRef(side, m[0], int(m[1])) for m in members) if members else None,
    )


def tree_to_dict(tree: ContextTree) -> dict:
    doc = {
        "format": 1,
        "side": tree.side.value,
        "root": tree.root,
        "params": {
            "window": tree.params.window,
            "leaf_budget": tree.params.leaf_budget,
            "min_group": tree.params.min_group,
            "fan_out": tree.params.fan_out,
            "switch_budget": tree.params.switch_budget,
            "cluster_threshold": tree.params.cluster_threshold,
            "sample_count": tree.params.sample_count,
        },
        "nodes": {nid: _node_to_dict(n) for nid, n in tree.nodes.items()},
        "relations": [
            [r.from_node, r.to_node, r.relation_text] for r in tree.relations
        ],
    }
    payload = json.dumps(doc, sort_keys=True)
    doc["content_hash"] = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    return doc


def save_tree(tree: ContextTree, path):
    Path(path).write_text(json.dumps(tree_to_dict(tree), sort_keys=True), encoding="utf-8")


def load_tree(path) -> ContextTree:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    side = as_side(doc["side"])
    p = doc["params"]
    params = TreeParams(
        window=int(p["window"]), leaf_budget=int(p["leaf_budget"]),
        min_group=int(p["min_group"]), fan_out=int(p["fan_out"]),
        switch_budget=int(p["switch_budget"]),
        cluster_threshold=float(p["cluster_threshold"]),
        sample_count=int(p["sample_count"]),
    )
    nodes = {nid: _node_from_dict(nid, nd, side) for nid, nd in doc["nodes"].items()}
    relations = [RelationSnippet(a, b, t) for a, b, t in doc.get("relations", [])]
    return ContextTree(side, doc["root"], nodes, params, relations)
