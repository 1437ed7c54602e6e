"""Command-line entry point.

Subcommands: ``build-tree``, ``build-graph``, ``match``, ``bench
generate|run|report``, and ``report``. Configuration is layered --
built-in defaults, then a JSON config file, then environment variables
(secrets only: API key and base URL), then explicit flags -- and every run
writes its fully resolved configuration next to its outputs so a run can
be reproduced from that file alone. ``--backend scripted:<path>`` switches
the whole run to the deterministic scripted chat backend plus the hash
embedder. Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from construm import evaluation as ev
from construm import graph as graph_mod
from construm import tree as tree_mod
from construm.catalog import CatalogError, MatchQuery, SchemaCatalog, load_catalog, mask_catalog
from construm.gateway import (
    DiskCache,
    HashEmbeddingBackend,
    HttpChatBackend,
    HttpEmbeddingBackend,
    ModelGateway,
    ScriptedChatBackend,
)
from construm.pipeline import (
    MODES,
    Artifacts,
    PipelineConfig,
    llm_shortlist,
    run_match,
    shortlist,
)


class UsageError(Exception):
    """Bad flags/arguments/inputs: the user can fix these (exit 1)."""


DEFAULTS = {
    "backend": "live",
    "base_url": "https://api.openai.com/v1",
    "chat_model": "gpt-5",
    "embed_model": "text-embedding-3-small",
    "decoding": {},
    "embed_dim": 64,
    "embed_seed": 0,
    "window": 250,
    "leaf_budget": 50,
    "min_group": 10,
    "fan_out": 5,
    "switch_budget": 2,
    "delta": 0.5,
    "sample_count": 20,
    "relations": False,
    "tau": 0.90,
    "include_table_text": True,
    "mode": "full",
    "k": 20,
    "pack_budget": 1200,
    "cap_total": 5,
    "cap_strong": 3,
    "max_groups": 6,
    "max_group_members": 24,
    "decision_timeout": 90.0,
    "diff_timeout": 45.0,
    "mask_source": False,
    "mask_target": False,
    "workers": 1,
}

_SECRET_KEYS = ("api_key",)


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < environment (secrets) < explicit flags."""
    cfg = dict(DEFAULTS)
    cfg["api_key"] = None
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    if os.environ.get("CONSTRUM_API_KEY"):
        cfg["api_key"] = os.environ["CONSTRUM_API_KEY"]
    if os.environ.get("CONSTRUM_BASE_URL"):
        cfg["base_url"] = os.environ["CONSTRUM_BASE_URL"]
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def write_run_config(cfg: dict, out_dir: Path):
    safe = {k: v for k, v in cfg.items() if k not in _SECRET_KEYS}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(safe, sort_keys=True, indent=2), encoding="utf-8"
    )


def make_gateway(cfg: dict, cache_dir=None) -> ModelGateway:
    backend_spec = cfg["backend"]
    if backend_spec.startswith("scripted:"):
        script_path = backend_spec.split(":", 1)[1]
        if not Path(script_path).exists():
            raise UsageError(f"scripted backend file not found: {script_path}")
        chat = ScriptedChatBackend.from_file(script_path)
        embed = HashEmbeddingBackend(dim=cfg["embed_dim"], seed=cfg["embed_seed"])
    elif backend_spec == "live":
        chat = HttpChatBackend(cfg["base_url"], cfg["chat_model"], cfg["api_key"],
                               cfg["decoding"])
        embed = HttpEmbeddingBackend(cfg["base_url"], cfg["embed_model"], cfg["api_key"])
    elif backend_spec == "hash-only":
        chat = None
        embed = HashEmbeddingBackend(dim=cfg["embed_dim"], seed=cfg["embed_seed"])
    else:
        raise UsageError(
            f"unknown backend {backend_spec!r} (expected 'live', 'hash-only' "
            f"or 'scripted:<script path>')"
        )
    cache = DiskCache(cache_dir) if cache_dir else None
    return ModelGateway(chat_backend=chat, embed_backend=embed, cache=cache)


def _load_catalog(path, side, mask: bool) -> SchemaCatalog:
    cat = load_catalog(path, side)
    return mask_catalog(cat) if mask else cat


def tree_params(cfg: dict) -> tree_mod.TreeParams:
    return tree_mod.TreeParams(
        window=cfg["window"], leaf_budget=cfg["leaf_budget"], min_group=cfg["min_group"],
        fan_out=cfg["fan_out"], switch_budget=cfg["switch_budget"],
        cluster_threshold=cfg["delta"], sample_count=cfg["sample_count"],
    )


def pipeline_config(cfg: dict) -> PipelineConfig:
    return PipelineConfig.from_mode(
        cfg["mode"], k=cfg["k"], pack_budget=cfg["pack_budget"],
        cap_total=cfg["cap_total"], cap_strong=cfg["cap_strong"],
        max_groups=cfg["max_groups"], max_group_members=cfg["max_group_members"],
        decision_timeout=cfg["decision_timeout"], diff_timeout=cfg["diff_timeout"],
    )


# -- subcommands ----------------------------------------------------------------


def _side_mask(args, cfg) -> bool:
    if getattr(args, "mask", None) is not None:
        return bool(args.mask)
    return cfg["mask_source"] if args.side == "source" else cfg["mask_target"]


def cmd_build_tree(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    gateway = make_gateway(cfg, cache_dir=args.cache)
    catalog = _load_catalog(args.catalog, args.side, _side_mask(args, cfg))
    tree = tree_mod.build_context_tree(
        catalog, tree_params(cfg), gateway,
        annotate_relations=cfg["relations"],
        workers=cfg["workers"],
        partial_path=str(out) + ".partial",
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    tree_mod.save_tree(tree, out)
    write_run_config(cfg, out.parent)
    print(f"tree written to {out} ({len(tree.nodes)} nodes, "
          f"{len(tree.leaves())} leaves)")
    return 0


def cmd_build_graph(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    gateway = make_gateway(cfg, cache_dir=args.cache)
    catalog = _load_catalog(args.catalog, args.side, _side_mask(args, cfg))
    hg = graph_mod.build_hypergraph(catalog, gateway, tau=cfg["tau"],
                                    include_table=cfg["include_table_text"])
    out.parent.mkdir(parents=True, exist_ok=True)
    graph_mod.save_hypergraph(hg, catalog, out)
    write_run_config(cfg, out.parent)
    non_singleton = sum(1 for g in hg.groups if len(g) > 1)
    print(f"hypergraph written to {out} ({len(hg.links)} links, "
          f"{len(hg.groups)} groups, {non_singleton} non-singleton)")
    return 0


def cmd_precompute_diff(args) -> int:
    from construm.diff import precompute_blocks

    cfg = resolve_config(args)
    if not args.cache:
        raise UsageError("precompute-diff needs --cache (the reply cache to fill)")
    gateway = make_gateway(cfg, cache_dir=args.cache)
    catalog = _load_catalog(args.catalog, args.side, _side_mask(args, cfg))
    hg = graph_mod.load_hypergraph(args.graph)
    blocks = precompute_blocks(hg, catalog, None, gateway,
                               timeout=cfg["diff_timeout"],
                               max_members=cfg["max_group_members"])
    print(f"{len(blocks)} differentiation blocks cached under {args.cache}")
    return 0


def _build_artifacts(cfg: dict, source_catalog: SchemaCatalog,
                     target_catalog: SchemaCatalog, gateway: ModelGateway,
                     need_tree: bool, need_diff: bool,
                     paths: dict | None = None) -> Artifacts:
    paths = paths or {}

    def load_or(name, loader, builder):
        p = paths.get(name)
        if p:
            return loader(p)
        return builder()

    target_graph = load_or(
        "target_graph",
        graph_mod.load_hypergraph,
        lambda: graph_mod.build_hypergraph(target_catalog, gateway, cfg["tau"],
                                           cfg["include_table_text"]),
    )
    source_graph = None
    if need_diff or paths.get("source_graph"):
        source_graph = load_or(
            "source_graph",
            graph_mod.load_hypergraph,
            lambda: graph_mod.build_hypergraph(source_catalog, gateway, cfg["tau"],
                                               cfg["include_table_text"]),
        )
    source_tree = target_tree = None
    if need_tree or paths.get("source_tree") or paths.get("target_tree"):
        params = tree_params(cfg)
        source_tree = load_or(
            "source_tree", tree_mod.load_tree,
            lambda: tree_mod.build_context_tree(source_catalog, params, gateway,
                                                annotate_relations=cfg["relations"],
                                                workers=cfg["workers"]))
        target_tree = load_or(
            "target_tree", tree_mod.load_tree,
            lambda: tree_mod.build_context_tree(target_catalog, params, gateway,
                                                annotate_relations=cfg["relations"],
                                                workers=cfg["workers"]))
    return Artifacts(source_catalog, target_catalog, source_tree, target_tree,
                     source_graph, target_graph)


def _trace_row(query: MatchQuery, result, artifacts: Artifacts) -> dict:
    scat, tcat = artifacts.source_catalog, artifacts.target_catalog
    truth_cid = tcat.meta(query.ground_truth).cid if query.ground_truth else None
    return {
        "source": scat.meta(query.source).cid,
        "truth": truth_cid,
        "chosen": tcat.meta(result.chosen).cid,
        "ranked": [tcat.meta(r).cid for r in result.ranked],
        "correct": (result.chosen == query.ground_truth) if query.ground_truth else None,
        "mode": result.trace.mode,
        "llm_calls": result.trace.llm_calls,
        "total_tokens": result.trace.total_tokens,
        "latency": result.trace.latency,
        "cache_hits": result.trace.cache_hits,
        "prompt_snapshot": result.trace.prompt_snapshot,
    }


def cmd_match(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = args.cache or out_dir / "cache"
    gateway = make_gateway(cfg, cache_dir=cache_dir)
    source_catalog = _load_catalog(args.source_catalog, "source", cfg["mask_source"])
    target_catalog = _load_catalog(args.target_catalog, "target", cfg["mask_target"])
    pcfg = pipeline_config(cfg)
    paths = {
        "source_tree": args.source_tree, "target_tree": args.target_tree,
        "source_graph": args.source_graph, "target_graph": args.target_graph,
    }
    artifacts = _build_artifacts(cfg, source_catalog, target_catalog, gateway,
                                 need_tree=pcfg.use_tree, need_diff=pcfg.use_diff,
                                 paths=paths)
    if args.queries:
        queries = ev.load_benchmark(Path(args.queries).read_text(encoding="utf-8"),
                                    source_catalog, target_catalog)
    elif args.source:
        queries = [MatchQuery(source=source_catalog.resolve(args.source))]
    else:
        raise UsageError("match needs --queries or --source")
    make_shortlist = llm_shortlist if args.shortlist == "llm" else shortlist

    def run_one(q: MatchQuery):
        if not q.shortlist:
            q = q.with_shortlist(make_shortlist(q.source, artifacts, pcfg.k, gateway))
        return q, run_match(q, pcfg, artifacts, gateway)

    if cfg["workers"] > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
            outcomes = list(pool.map(run_one, queries))
    else:
        outcomes = [run_one(q) for q in queries]
    traces_dir = out_dir / "traces"
    traces_dir.mkdir(exist_ok=True)
    for i, (q, result) in enumerate(outcomes):
        row = _trace_row(q, result, artifacts)
        (traces_dir / f"q{i:04d}.json").write_text(
            json.dumps(row, sort_keys=True), encoding="utf-8")
        print(f"q{i:04d}: {row['source']} -> {row['chosen']}"
              + (f" (truth {row['truth']})" if row["truth"] else ""))
    write_run_config(cfg, out_dir)
    return 0


def _load_benchspec(path, cfg) -> tuple[ev.BenchmarkSpec, SchemaCatalog, SchemaCatalog]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read benchmark spec {path}: {exc}") from exc
    for required in ("source_catalog", "target_catalog", "pair_similarity_tau",
                     "min_separation", "verified_matches"):
        if required not in doc:
            raise UsageError(f"benchmark spec is missing {required!r}")
    base = Path(path).parent
    source = _load_catalog(base / doc["source_catalog"], "source",
                           doc.get("mask_source", cfg["mask_source"]))
    target = _load_catalog(base / doc["target_catalog"], "target",
                           doc.get("mask_target", cfg["mask_target"]))
    verified = {
        source.resolve(k): target.resolve(v)
        for k, v in doc["verified_matches"].items()
    }
    spec = ev.BenchmarkSpec(
        source_catalog=source, target_catalog=target,
        pair_similarity_tau=float(doc["pair_similarity_tau"]),
        min_separation=int(doc["min_separation"]),
        verified_matches=verified,
    )
    return spec, source, target


def cmd_bench_generate(args) -> int:
    cfg = resolve_config(args)
    gateway = make_gateway(cfg, cache_dir=args.cache)
    spec, source, target = _load_benchspec(args.benchspec, cfg)
    queries = ev.generate_benchmark(spec, gateway)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ev.save_benchmark(queries, source, target), encoding="utf-8")
    print(f"{len(queries)} queries written to {out}")
    return 0


def cmd_bench_run(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = args.cache or out_dir / "cache"
    gateway = make_gateway(cfg, cache_dir=cache_dir)
    spec, source, target = _load_benchspec(args.benchspec, cfg)
    queries = ev.load_benchmark(Path(args.bench).read_text(encoding="utf-8"),
                                source, target)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; expected one of {MODES}")
    need_tree = any(PipelineConfig.from_mode(m).use_tree for m in modes)
    need_diff = any(PipelineConfig.from_mode(m).use_diff for m in modes)
    artifacts = _build_artifacts(cfg, source, target, gateway,
                                 need_tree=need_tree, need_diff=need_diff)
    base = pipeline_config({**cfg, "mode": modes[0]})
    suite = ev.run_ablation_suite(queries, modes, artifacts, gateway,
                                  base_config=base, slice_name=args.slice)
    reports = {args.slice: {m: suite[m][0] for m in modes}}
    (out_dir / "report.md").write_text(ev.render_report(reports, "markdown"),
                                       encoding="utf-8")
    (out_dir / "report.csv").write_text(ev.render_report(reports, "csv"),
                                        encoding="utf-8")
    for mode in modes:
        report, results = suite[mode]
        tdir = out_dir / "traces" / mode
        tdir.mkdir(parents=True, exist_ok=True)
        for i, (q, r) in enumerate(zip(queries, results)):
            if r is None:
                row = {"source": source.meta(q.source).cid, "error": report.rows[i].error}
            else:
                qq = q if q.shortlist else q.with_shortlist(r.query.shortlist)
                row = _trace_row(qq, r, artifacts)
            (tdir / f"q{i:04d}.json").write_text(json.dumps(row, sort_keys=True),
                                                 encoding="utf-8")
    write_run_config(cfg, out_dir)
    print(ev.render_report(reports, "markdown"))
    return 0


def cmd_report(args) -> int:
    reports: dict[str, dict[str, ev.EvalReport]] = {}
    for run_dir in args.runs:
        csv_path = Path(run_dir) / "report.csv"
        if not csv_path.exists():
            raise UsageError(f"no report.csv under {run_dir}")
        for row in ev.parse_report_csv(csv_path.read_text(encoding="utf-8")):
            slice_name = row["slice"] if len(args.runs) == 1 else Path(run_dir).name
            reports.setdefault(slice_name, {})[row["mode"]] = ev.EvalReport(
                slice_name=slice_name, n=row["n"], acc1=row["acc1"],
                acc3=row["acc3"], acc5=row["acc5"],
                mean_llm_calls=row["llm_calls_per_query"],
                mean_tokens=row["tokens_per_query"],
                mean_latency=row["latency_s"],
            )
    print(ev.render_report(reports, args.format))
    return 0


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--backend", help="'live', 'hash-only' or 'scripted:<script path>'")
    p.add_argument("--config", help="JSON config file (defaults < file < env < flags)")
    p.add_argument("--cache", help="disk cache directory for chat replies")
    p.add_argument("--workers", type=int, help="worker pool size for parallel phases")


def _add_tree_flags(p: argparse.ArgumentParser):
    p.add_argument("--window", type=int, help="columns per scan batch (W)")
    p.add_argument("--leaf-budget", dest="leaf_budget", type=int,
                   help="max columns per leaf (B)")
    p.add_argument("--fanout", dest="fan_out", type=int, help="target child groups (b)")
    p.add_argument("--min-group", dest="min_group", type=int,
                   help="minimum split-group size (m)")
    p.add_argument("--switch-budget", dest="switch_budget", type=int,
                   help="boundary moves per refinement pass (s)")
    p.add_argument("--delta", type=float, help="table-cluster merge cutoff (cosine distance)")
    p.add_argument("--relations", action="store_const", const=True, default=None,
                   help="annotate sibling relation snippets")


def build_parser() -> _Parser:
    parser = _Parser(prog="construm",
                     description="Context packing for LLM schema matching.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("build-tree", parents=[], help="build a context tree")
    p.add_argument("--catalog", required=True)
    p.add_argument("--side", choices=["source", "target"], default="source")
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action="store_const", const=True, default=None,
                   help="mask identifiers before building")
    _add_tree_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_build_tree)

    p = sub.add_parser("build-graph", help="build a similarity hypergraph")
    p.add_argument("--catalog", required=True)
    p.add_argument("--side", choices=["source", "target"], default="target")
    p.add_argument("--tau", type=float, help="similarity link threshold")
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action="store_const", const=True, default=None,
                   help="mask identifiers before building")
    _add_common(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("precompute-diff",
                       help="generate differentiation blocks for all stored "
                            "groups offline (fills the reply cache)")
    p.add_argument("--catalog", required=True)
    p.add_argument("--side", choices=["source", "target"], default="target")
    p.add_argument("--graph", required=True, help="hypergraph file")
    p.add_argument("--mask", action="store_const", const=True, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_precompute_diff)

    p = sub.add_parser("match", help="run forced-choice matches")
    p.add_argument("--source-catalog", dest="source_catalog", required=True)
    p.add_argument("--target-catalog", dest="target_catalog", required=True)
    p.add_argument("--source-tree", dest="source_tree")
    p.add_argument("--target-tree", dest="target_tree")
    p.add_argument("--source-graph", dest="source_graph")
    p.add_argument("--target-graph", dest="target_graph")
    p.add_argument("--tree", dest="target_tree", help="alias for --target-tree")
    p.add_argument("--graph", dest="target_graph", help="alias for --target-graph")
    p.add_argument("--queries", help="benchmark-style JSON query file")
    p.add_argument("--source", help="single query column (cid or unique name)")
    p.add_argument("--shortlist", choices=["embed", "llm"], default="embed",
                   help="internal shortlist strategy when a query has none")
    p.add_argument("--mode", choices=list(MODES))
    p.add_argument("--k", type=int, help="shortlist size")
    p.add_argument("--budget", dest="pack_budget", type=int,
                   help="context pack budget (chars)")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True, help="trace output directory")
    _add_tree_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_match)

    bench = sub.add_parser("bench", help="benchmark workflows")
    bsub = bench.add_subparsers(dest="bench_command", metavar="STEP")

    p = bsub.add_parser("generate", help="generate a context-stress benchmark")
    p.add_argument("--benchspec", required=True, help="benchmark spec JSON")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bench_generate)

    p = bsub.add_parser("run", help="run modes over a benchmark")
    p.add_argument("--benchspec", required=True)
    p.add_argument("--bench", required=True, help="query list from 'bench generate'")
    p.add_argument("--modes", default="full", help="comma-separated mode list")
    p.add_argument("--slice", default="all", help="slice label for reports")
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--budget", dest="pack_budget", type=int)
    p.add_argument("--out", required=True)
    _add_tree_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench_run)

    p = bsub.add_parser("report", help="re-render reports from run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("report", help="render a report from run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        func = getattr(args, "func", None)
        if func is None:
            parser.print_usage(sys.stderr)
            return 1
        return func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CatalogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - anything else is an internal error
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
