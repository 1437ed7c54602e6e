import json
import math

import numpy as np
import pytest

from construm.catalog import Side
from construm.gateway import TransportError
from construm.tree import (
    ContextTree,
    GroupingPlan,
    NodeKind,
    PlanGroup,
    RelationCaps,
    TreeError,
    TreeNode,
    TreeParams,
    annotate_sibling_relations,
    build_context_tree,
    build_table_tree,
    cluster_tables,
    even_sample_indices,
    lineage,
    load_tree,
    repair_plan,
    save_tree,
    stage1_window_summaries,
    stage2_global_theme,
    stage3_conceptual_map,
    stage4_refine_boundaries,
    tree_to_dict,
    window_partition,
)
from helpers import (
    PositionalEmbeddingBackend,
    build_catalog,
    chain_bots,
    greedy_merge_oracle,
    leaf_coverage,
    make_gateway,
    random_catalog,
    table_doc,
    tree_bot,
    tree_gateway,
    unit,
)

PARAMS = TreeParams()


def ordered_catalog(n, table_id="t0", seed=0):
    return random_catalog(seed, "source", n=n, table_id=table_id)


# -- stage 1 --------------------------------------------------------------------


def test_window_partition_exact_fit():
    assert window_partition(250, 250, 10) == [(0, 250)]


def test_window_partition_short_tail_merges():
    # 251 columns: the 1-column tail is under min_group, so one window of 251
    assert window_partition(251, 250, 10) == [(0, 251)]
    assert window_partition(505, 250, 10) == [(0, 250), (250, 505)]
    assert window_partition(530, 250, 10) == [(0, 250), (250, 500), (500, 530)]


def test_window_partition_properties():
    for n in (1, 9, 10, 99, 250, 251, 499, 500, 501, 2500):
        spans = window_partition(n, 250, 10)
        assert spans[0][0] == 0 and spans[-1][1] == n
        for (a, b), (c, d) in zip(spans, spans[1:]):
            assert b == c and b > a
        if len(spans) > 1:
            assert all(b - a >= 10 for a, b in spans)
        assert all(b - a <= 250 + 10 - 1 for a, b in spans)


def test_stage1_single_window_for_250():
    cat = ordered_catalog(250)
    out = stage1_window_summaries(cat, cat.tables[0], 250, tree_gateway(), 10)
    assert len(out) == 1
    assert out[0][0] == (0, 249)
    assert out[0][1] == "S[0..249]"


def test_stage1_unordered_batches_partition():
    cat = random_catalog(1, "source", n=30, ordered=False)
    out = stage1_window_summaries(cat, cat.tables[0], 10, tree_gateway(), 1)
    assert [span for span, _ in out] == [(0, 9), (10, 19), (20, 29)]


# -- stage 2 --------------------------------------------------------------------


def test_even_sample_indices_frozen_and_properties():
    # round(i * 99 / 4) for i in 0..4
    assert even_sample_indices(100, 5) == [0, 25, 50, 74, 99]
    for n, k in [(100, 5), (37, 7), (1000, 20), (21, 20)]:
        idx = even_sample_indices(n, k)
        assert idx[0] == 0 and idx[-1] == n - 1
        assert all(a < b for a, b in zip(idx, idx[1:]))
        # each index sits within rounding distance of the exact even grid
        for i, got in enumerate(idx):
            assert abs(got - i * (n - 1) / (k - 1)) <= 0.5


def test_even_sample_clamps_to_all_columns():
    assert even_sample_indices(5, 5) == [0, 1, 2, 3, 4]
    assert even_sample_indices(5, 9) == [0, 1, 2, 3, 4]


def test_stage2_theme_is_stored_verbatim():
    cat = ordered_catalog(40)
    gw = make_gateway(rules=(), default="THEME: employment history",
                      responder=None)
    theme = stage2_global_theme(cat, cat.tables[0], 5, gw)
    assert theme == "THEME: employment history"


def test_stage2_requires_two_samples():
    cat = ordered_catalog(10)
    with pytest.raises(TreeError):
        stage2_global_theme(cat, cat.tables[0], 1, tree_gateway())


# -- stage 3 --------------------------------------------------------------------


def plan_reply_bot(reply):
    def bot(prompt):
        if "TASK: group-plan" in prompt:
            return reply
        return None
    return bot


def make_plan(cat, reply, params=PARAMS):
    gw = make_gateway(responder=chain_bots(plan_reply_bot(reply), tree_bot))
    table = cat.tables[0]
    windows = stage1_window_summaries(cat, table, params.window, gw, params.min_group)
    theme = stage2_global_theme(cat, table, 5, gw)
    return stage3_conceptual_map(cat, table, windows, theme, params, gw)


def test_stage3_valid_plan_accepted_verbatim():
    cat = ordered_catalog(250)
    plan = make_plan(cat, "groups: [0..119]=demographics, [120..249]=pensions")
    assert [(g.label, g.columns[0].ordinal, g.columns[-1].ordinal) for g in plan.groups] \
        == [("demographics", 0, 119), ("pensions", 120, 249)]


def test_stage3_undersized_group_merges_like_greedy_oracle():
    cat = ordered_catalog(250)
    plan = make_plan(cat, "[0..2]=tiny, [3..119]=a, [120..249]=b")
    sizes = [len(g.columns) for g in plan.groups]
    assert sizes == greedy_merge_oracle([3, 117, 130], m=10)
    # contiguity preserved
    cursor = 0
    for g in plan.groups:
        assert g.columns[0].ordinal == cursor
        cursor = g.columns[-1].ordinal + 1
    assert cursor == 250


def test_repair_matches_oracle_on_random_size_sequences():
    rng = np.random.default_rng(5)
    cat = ordered_catalog(400)
    refs = list(cat.refs())
    for _ in range(25):
        sizes = []
        remaining = 400
        while remaining > 0:
            s = int(rng.integers(1, 60))
            s = min(s, remaining)
            sizes.append(s)
            remaining -= s
        groups, start = [], 0
        for i, s in enumerate(sizes):
            groups.append(PlanGroup(f"g{i}", tuple(refs[start:start + s])))
            start += s
        repaired = repair_plan(groups, min_group=10, max_groups=10**9, ordered=True)
        assert [len(g.columns) for g in repaired] == greedy_merge_oracle(sizes, 10)


def test_stage3_garbage_twice_falls_back_to_uniform_split():
    cat = ordered_catalog(250)
    plan = make_plan(cat, "total nonsense")
    assert [len(g.columns) for g in plan.groups] == [50, 50, 50, 50, 50]


def test_stage3_single_group_plan_rejected():
    cat = ordered_catalog(250)
    plan = make_plan(cat, "[0..249]=everything")
    assert len(plan.groups) == 5  # fell back to the uniform split


def test_stage3_unordered_sets():
    cat = random_catalog(2, "source", n=30, ordered=False)
    reply = ("{" + ",".join(map(str, range(0, 15))) + "}=first, "
             "{" + ",".join(map(str, range(15, 30))) + "}=second")
    plan = make_plan(cat, reply)
    assert [len(g.columns) for g in plan.groups] == [15, 15]
    members = [r for g in plan.groups for r in g.columns]
    assert sorted(r.ordinal for r in members) == list(range(30))


def test_stage3_unordered_undersized_merges_into_nearest_centroid():
    cols = []
    for i in range(12):
        cols.append((f"a{i}", "alpha measurement of the first concept family"))
    for i in range(12):
        cols.append((f"b{i}", "beta reading from the second concept family"))
    for i in range(6):
        cols.append((f"c{i}", "beta reading from the second concept family too"))
    cat = build_catalog("source", [table_doc("t0", cols, ordered=False)])
    reply = ("{" + ",".join(map(str, range(0, 12))) + "}=alpha, "
             "{" + ",".join(map(str, range(12, 24))) + "}=beta, "
             "{" + ",".join(map(str, range(24, 30))) + "}=tiny")
    plan = make_plan(cat, reply)
    # the 6-member group is under min_group and joins the beta-like group
    assert sorted(len(g.columns) for g in plan.groups) == [12, 18]
    big = max(plan.groups, key=lambda g: len(g.columns))
    assert {r.ordinal for r in big.columns} == set(range(12, 30))


# -- stage 4 --------------------------------------------------------------------


def move_bot(replies):
    state = {"i": 0}

    def bot(prompt):
        if "TASK: boundary-check" in prompt:
            i = min(state["i"], len(replies) - 1)
            state["i"] += 1
            return replies[i]
        return None
    return bot


def plan_for(cat, spans):
    refs = list(cat.refs())
    groups = tuple(
        PlanGroup(f"g{i}", tuple(refs[lo:hi + 1])) for i, (lo, hi) in enumerate(spans)
    )
    return GroupingPlan(groups, True)


def spans_of(plan):
    return [(g.columns[0].ordinal, g.columns[-1].ordinal) for g in plan.groups]


def test_stage4_accepts_in_budget_move():
    cat = ordered_catalog(250)
    plan = plan_for(cat, [(0, 119), (120, 249)])
    gw = make_gateway(responder=chain_bots(move_bot(["MOVE 120 -> 118"]), tree_bot))
    out = stage4_refine_boundaries(cat, cat.tables[0], plan, PARAMS, gw)
    assert spans_of(out) == [(0, 117), (118, 249)]


def test_stage4_switch_budget_caps_applied_moves():
    cat = ordered_catalog(600, seed=1)
    plan = plan_for(cat, [(0, 149), (150, 299), (300, 449), (450, 599)])
    # three valid proposals across the scan; switch budget 2 keeps the first two
    gw = make_gateway(responder=chain_bots(
        move_bot(["MOVE 150 -> 140\nMOVE 300 -> 310", "MOVE 450 -> 460", "KEEP"]),
        tree_bot))
    out = stage4_refine_boundaries(cat, cat.tables[0], plan, PARAMS, gw)
    assert spans_of(out) == [(0, 139), (140, 309), (310, 449), (450, 599)]


def test_stage4_discards_move_violating_min_group():
    cat = ordered_catalog(250)
    plan = plan_for(cat, [(0, 119), (120, 249)])
    gw = make_gateway(responder=chain_bots(move_bot(["MOVE 120 -> 4"]), tree_bot))
    out = stage4_refine_boundaries(cat, cat.tables[0], plan, PARAMS, gw)
    assert spans_of(out) == [(0, 119), (120, 249)]
    # validity oracle: still a contiguous partition with sizes >= min_group
    sizes = [hi - lo + 1 for lo, hi in spans_of(out)]
    assert all(s >= PARAMS.min_group for s in sizes)
    assert sum(sizes) == 250


# -- per-table build -------------------------------------------------------------


def check_tree_invariants(tree, catalog, params):
    cols = leaf_coverage(tree)
    assert len(cols) == len(set(cols)) == catalog.column_count  # coverage + disjoint
    assert set(cols) == set(catalog.refs())
    for leaf in tree.leaves():
        assert 1 <= len(leaf.members) <= params.leaf_budget
    # span algebra on ordered internal nodes
    for node in tree.nodes.values():
        if node.span is None or not node.children:
            continue
        child_spans = [tree.node(c).span for c in node.children]
        assert all(s is not None for s in child_spans)
        assert child_spans[0][1] == node.span[1]
        assert child_spans[-1][2] == node.span[2]
        for a, b in zip(child_spans, child_spans[1:]):
            assert a[0] == b[0] and a[2] + 1 == b[1]
    # lineage monotonicity
    for ref in list(catalog.refs())[:: max(1, catalog.column_count // 17)]:
        path = lineage(tree, ref)
        assert path[-1].node_id == tree.root
        for child, parent in zip(path, path[1:]):
            assert tree.parent[child.node_id] == parent.node_id


def test_small_table_is_root_plus_one_leaf():
    cat = ordered_catalog(40)
    nodes = build_table_tree(cat, cat.tables[0], PARAMS, tree_gateway())
    root = nodes["tbl:t0"]
    assert root.kind is NodeKind.TABLE_ROOT
    assert len(root.children) == 1
    leaf = nodes[root.children[0]]
    assert leaf.kind is NodeKind.GROUP_LEAF and len(leaf.members) == 40


def test_single_column_table():
    cat = ordered_catalog(1)
    nodes = build_table_tree(cat, cat.tables[0], PARAMS, tree_gateway())
    leaf = nodes[nodes["tbl:t0"].children[0]]
    assert len(leaf.members) == 1


def test_wide_table_recursion_depth_and_partition():
    cat = ordered_catalog(2500)
    gw = tree_gateway()
    nodes = build_table_tree(cat, cat.tables[0], PARAMS, gw)
    tree = ContextTree(Side.SOURCE, "tbl:t0", nodes, PARAMS)
    check_tree_invariants(tree, cat, PARAMS)
    depth = max(tree.depth(leaf.node_id) for leaf in tree.leaves())
    assert depth >= 3


def test_unordered_table_build():
    cat = random_catalog(3, "source", n=120, ordered=False)
    nodes = build_table_tree(cat, cat.tables[0], PARAMS, tree_gateway())
    tree = ContextTree(Side.SOURCE, "tbl:t0", nodes, PARAMS)
    check_tree_invariants(tree, cat, PARAMS)


# -- clustering ------------------------------------------------------------------


def multi_table_catalog(sizes, seed=0):
    tables = [
        table_doc(f"t{i}", [(f"t{i}_c{j}", f"col {j} of table {i}") for j in range(n)])
        for i, n in enumerate(sizes)
    ]
    return build_catalog("source", tables)


def test_single_table_root_is_db_root():
    cat = ordered_catalog(5)
    tree = build_context_tree(cat, PARAMS, tree_gateway())
    assert tree.root == "tbl:t0"
    ref = next(cat.refs())
    path = lineage(tree, ref)
    assert [n.kind for n in path] == [NodeKind.GROUP_LEAF, NodeKind.TABLE_ROOT]
    assert len(path) == 2


def test_three_tables_cluster_then_forced_join():
    cat = multi_table_catalog([3, 3, 3])
    subtrees = [build_table_tree(cat, t, PARAMS, tree_gateway()) for t in cat.tables]
    e = np.eye(4)
    # root summaries embed as e1, e1, e3: d(T0,T1)=0 <= 0.5 merges first;
    # d(cluster, T2)=1 > 0.5 forces the final db-root join
    gw = make_gateway(responder=tree_bot,
                      embed_backend=PositionalEmbeddingBackend([[e[0], e[0], e[2]]]))
    tree = cluster_tables(subtrees, PARAMS, gw, Side.SOURCE)
    root = tree.node(tree.root)
    assert root.kind is NodeKind.DB_ROOT
    assert set(root.children) == {"grp:1", "tbl:t2"}
    assert set(tree.node("grp:1").children) == {"tbl:t0", "tbl:t1"}


def reference_agglomerative(dist, delta):
    """Independent average-linkage merger on a fixed distance matrix.

    Returns the merge list as (frozenset_a, frozenset_b) in order.
    """
    clusters = [frozenset([i]) for i in range(len(dist))]
    keys = {frozenset([i]): f"tbl:t{i}" for i in range(len(dist))}
    merges = []
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                a, b = clusters[i], clusters[j]
                d = sum(dist[x][y] for x in a for y in b) / (len(a) * len(b))
                ka, kb = sorted((keys[a], keys[b]))
                cand = (d, ka, kb, i, j)
                if best is None or cand[:3] < best[:3]:
                    best = cand
        d, _, _, i, j = best
        if d > delta:
            break
        a, b = clusters[i], clusters[j]
        merges.append((a, b))
        merged = a | b
        keys[merged] = min(keys[a], keys[b])
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)] + [merged]
    return merges


def planted_hierarchy_vectors(k=8):
    # pairs nearly parallel, quads moderately close, halves far apart:
    # nearest-pair merging reproduces a balanced binary hierarchy
    rng = np.random.default_rng(4)
    base = [unit(v) for v in np.eye(k // 2, 16)[: k // 2]]
    out = []
    for i in range(k):
        quad = i // 2
        jitter = 0.08 * rng.standard_normal(16)
        coarse = 0.35 * np.ones(16) if quad < 2 else -0.35 * np.ones(16)
        out.append(unit(2.0 * base[quad] + coarse + jitter))
    return out


def test_full_merge_matches_reference_and_depth_bound():
    k = 8
    cat = multi_table_catalog([2] * k)
    subtrees = [build_table_tree(cat, t, PARAMS, tree_gateway()) for t in cat.tables]
    vectors = planted_hierarchy_vectors(k)
    params = TreeParams(cluster_threshold=1.999)  # accept everything
    gw = make_gateway(responder=tree_bot,
                      embed_backend=PositionalEmbeddingBackend([vectors]))
    tree = cluster_tables(subtrees, params, gw, Side.SOURCE)

    mat = np.stack(vectors)
    dist = (1.0 - mat @ mat.T).tolist()
    merges = reference_agglomerative(dist, 1.999)
    assert len(merges) == k - 1  # fully merged by the reference as well

    # our cluster nodes, in creation order, merge the same member sets
    def table_indices(node_id, tree):
        out = set()
        stack = [node_id]
        while stack:
            nid = stack.pop()
            if nid.startswith("tbl:") and "." not in nid:
                out.add(int(nid.split(":t")[1]))
            stack.extend(tree.node(nid).children if nid in tree.nodes else [])
        return frozenset(out)

    for idx, (a, b) in enumerate(merges, start=1):
        node = tree.node(f"grp:{idx}")
        got = {table_indices(c, tree) for c in node.children}
        assert got == {a, b}

    depth = max(tree.depth(leaf.node_id) for leaf in tree.leaves())
    # balanced merge of 8 tables: ceil(log2 8) cluster levels above each
    # table root, whose leaf sits one below it
    assert depth == math.ceil(math.log2(k)) + 1


# -- relations -------------------------------------------------------------------


def relation_bot(reply):
    def bot(prompt):
        if "TASK: sibling-relations" in prompt:
            return reply
        return None
    return bot


def two_child_tree():
    nodes = {
        "root": TreeNode("root", NodeKind.DB_ROOT, "root", children=("a", "b")),
        "a": TreeNode("a", NodeKind.TABLE_ROOT, "summary a"),
        "b": TreeNode("b", NodeKind.TABLE_ROOT, "summary b"),
    }
    return ContextTree(Side.SOURCE, "root", nodes, PARAMS)


def test_relation_snippet_parsed_to_sibling_ids():
    tree = two_child_tree()
    gw = make_gateway(responder=relation_bot("A -> B: A defines terms used by B"))
    snippets = annotate_sibling_relations(tree, "root", gw)
    assert len(snippets) == 1
    assert (snippets[0].from_node, snippets[0].to_node) == ("a", "b")
    assert snippets[0].relation_text == "A defines terms used by B"
    assert snippets[0].directed


def test_single_child_yields_no_relations():
    nodes = {
        "root": TreeNode("root", NodeKind.DB_ROOT, "root", children=("a",)),
        "a": TreeNode("a", NodeKind.TABLE_ROOT, "summary a"),
    }
    tree = ContextTree(Side.SOURCE, "root", nodes, PARAMS)
    assert annotate_sibling_relations(tree, "root", make_gateway(default="x")) == []


def test_relation_cap_keeps_first_in_reply_order():
    children = tuple(f"c{i}" for i in range(26))
    nodes = {"root": TreeNode("root", NodeKind.DB_ROOT, "root", children=children)}
    for i, cid in enumerate(children):
        nodes[cid] = TreeNode(cid, NodeKind.TABLE_ROOT, f"summary {i}")
    tree = ContextTree(Side.SOURCE, "root", nodes, PARAMS)
    from construm.tree import _alias

    reply = "\n".join(
        f"{_alias(i)} -> {_alias(i + 1)}: rel {i}" for i in range(25)
    )
    gw = make_gateway(responder=relation_bot(reply))
    snippets = annotate_sibling_relations(tree, "root", gw, RelationCaps(per_leaf_max=18))
    assert len(snippets) == 18
    assert [s.relation_text for s in snippets] == [f"rel {i}" for i in range(18)]


def test_relation_unknown_alias_dropped():
    tree = two_child_tree()
    gw = make_gateway(responder=relation_bot("A -> Z: bogus\nB -> A: real one"))
    snippets = annotate_sibling_relations(tree, "root", gw)
    assert [(s.from_node, s.to_node) for s in snippets] == [("b", "a")]


def test_relation_per_column_cap():
    children = ("x", "y", "z")
    nodes = {"root": TreeNode("root", NodeKind.DB_ROOT, "root", children=children)}
    for cid in children:
        nodes[cid] = TreeNode(cid, NodeKind.TABLE_ROOT, cid)
    tree = ContextTree(Side.SOURCE, "root", nodes, PARAMS)
    reply = "A -> B: r1\nB -> A: r2\nA -> C: r3\nC -> A: r4"
    gw = make_gateway(responder=relation_bot(reply))
    snippets = annotate_sibling_relations(tree, "root", gw, RelationCaps(per_column=2))
    # x is saturated after two incident snippets; later ones touching it drop
    assert [(s.from_node, s.to_node) for s in snippets] == [("x", "y"), ("y", "x")]


# -- lineage ---------------------------------------------------------------------


def chain_tree(depth):
    cat = ordered_catalog(1)
    ref = next(cat.refs())
    nodes = {}
    ids = [f"n{i}" for i in range(depth)]
    for i, nid in enumerate(ids):
        children = (ids[i + 1],) if i + 1 < depth else ()
        kind = NodeKind.DB_ROOT if i == 0 else (
            NodeKind.GROUP_LEAF if i == depth - 1 else NodeKind.WITHIN_TABLE)
        nodes[nid] = TreeNode(nid, kind, f"level {i}", children=children,
                              members=(ref,) if i == depth - 1 else None)
    return ContextTree(Side.SOURCE, ids[0], nodes, PARAMS), cat, ref


def test_lineage_deep_tree_matches_ancestor_walk():
    tree, _, ref = chain_tree(5)
    path = lineage(tree, ref)
    assert len(path) == 5
    # ancestor-walk oracle from an independently built child->parent map
    parent = {}
    for node in tree.nodes.values():
        for c in node.children:
            parent[c] = node.node_id
    walk = [tree.leaf_of[ref]]
    while walk[-1] in parent:
        walk.append(parent[walk[-1]])
    assert [n.node_id for n in path] == walk
    depths = [tree.depth(n.node_id) for n in path]
    assert depths == sorted(depths, reverse=True)


def test_lineage_unknown_column():
    tree, cat, _ = chain_tree(3)
    other = random_catalog(9, "source", n=2, table_id="zz")
    with pytest.raises(TreeError, match="unknown column"):
        lineage(tree, next(other.refs()))


# -- determinism, serialization, resume -------------------------------------------


def test_build_is_deterministic_and_serializable(tmp_path):
    cat = multi_table_catalog([80, 7, 30], seed=2)
    t1 = build_context_tree(cat, PARAMS, tree_gateway())
    t2 = build_context_tree(cat, PARAMS, tree_gateway())
    assert json.dumps(tree_to_dict(t1), sort_keys=True) == \
        json.dumps(tree_to_dict(t2), sort_keys=True)
    path = tmp_path / "tree.json"
    save_tree(t1, path)
    loaded = load_tree(path)
    assert tree_to_dict(loaded) == tree_to_dict(t1)
    check_tree_invariants(loaded, cat, PARAMS)


def test_table_ids_with_separator_characters():
    cat = build_catalog("source", [
        table_doc("wave.2016:J", [(f"a{i}", f"col {i}") for i in range(4)]),
        table_doc("wave.2018:J", [(f"b{i}", f"col {i}") for i in range(4)]),
    ])
    tree = build_context_tree(cat, PARAMS, tree_gateway())
    for ref in cat.refs():
        assert lineage(tree, ref)[-1].node_id == tree.root
    check_tree_invariants(tree, cat, PARAMS)


def test_concurrent_build_matches_serial():
    cat = multi_table_catalog([60, 60, 60, 60], seed=3)
    serial = build_context_tree(cat, PARAMS, tree_gateway(), workers=1)
    parallel = build_context_tree(cat, PARAMS, tree_gateway(), workers=4)
    assert tree_to_dict(serial) == tree_to_dict(parallel)


def test_partial_save_and_resume(tmp_path):
    cat = multi_table_catalog([12, 12], seed=4)
    partial = tmp_path / "tree.json.partial"

    calls = {"fail": True}

    def flaky(prompt):
        if calls["fail"] and "t1_c" in prompt:
            raise TransportError("injected failure")
        return tree_bot(prompt)

    gw = make_gateway(responder=flaky)
    with pytest.raises(Exception):
        build_context_tree(cat, PARAMS, gw, partial_path=partial)
    assert partial.exists()
    saved = json.loads(partial.read_text())
    assert "t0" in saved["tables"] and "t1" not in saved["tables"]

    calls["fail"] = False
    resumed = build_context_tree(cat, PARAMS, make_gateway(responder=flaky),
                                 partial_path=partial)
    clean = build_context_tree(cat, PARAMS, tree_gateway())
    assert tree_to_dict(resumed) == tree_to_dict(clean)
    assert not partial.exists()
