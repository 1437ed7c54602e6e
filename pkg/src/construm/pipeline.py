"""End-to-end match orchestration for one query.

Given a source column and a shortlist of target candidates (produced here
by embedding retrieval, or supplied verbatim by an upstream matcher), the
pipeline optionally expands the candidate set with near-duplicate
neighbors, attaches budgeted context packs from the context trees, adds
source-side and candidate-side differentiation blocks, and makes exactly
one forced-choice LLM call whose reply must end with ``ANSWER: <cid>``.
Auxiliary failures (expansion, packs, differentiation) degrade gracefully
to a smaller prompt; only an unparseable decision reply aborts, after one
stricter retry.

Ablation modes gate the evidence: ``full`` uses everything, ``no_tree``
drops context packs, ``no_diff`` drops differentiation, ``llm_local`` uses
bare metadata only, and ``embed_top1`` answers with the nearest embedding
and never calls the LLM.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from construm.catalog import ColumnRef, MatchQuery, SchemaCatalog, Side
from construm.diff import (
    DEFAULT_MAX_GROUPS,
    DEFAULT_MAX_MEMBERS,
    DifferentiationBlock,
    generate_block,
    render_blocks,
    select_groups,
)
from construm.gateway import ChatCall, GatewayError, ModelGateway
from construm.graph import (
    Hypergraph,
    embedding_text,
    expand_candidates,
    groups_within,
    source_confusable_set,
)
from construm.tree import ContextPack, ContextTree, TreeError, build_context_pack

logger = logging.getLogger(__name__)

MODES = ("full", "no_tree", "no_diff", "llm_local", "embed_top1")

_MODE_FLAGS = {
    # mode: (use_tree, use_diff, use_expansion)
    "full": (True, True, True),
    "no_tree": (False, True, True),
    "no_diff": (True, False, True),
    "llm_local": (False, False, False),
    "embed_top1": (False, False, False),
}


class PipelineError(Exception):
    def __init__(self, message: str, prompt_snapshot: str = ""):
        super().__init__(message)
        self.prompt_snapshot = prompt_snapshot


class ChoiceParseError(PipelineError):
    pass


class InvalidChoiceError(PipelineError):
    pass


@dataclass
class PipelineConfig:
    mode: str = "full"
    k: int = 20
    use_tree: bool = True
    use_diff: bool = True
    use_expansion: bool = True
    pack_budget: int = 1200
    max_pack_relations: int = 3
    decision_timeout: float = 90.0
    diff_timeout: float = 45.0
    max_groups: int = DEFAULT_MAX_GROUPS
    max_group_members: int = DEFAULT_MAX_MEMBERS
    cap_total: int = 5
    cap_strong: int = 3
    restrict_source_to_table: bool = True

    @classmethod
    def from_mode(cls, mode: str, **overrides) -> "PipelineConfig":
        if mode not in _MODE_FLAGS:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        tree, diff, expansion = _MODE_FLAGS[mode]
        cfg = cls(mode=mode, use_tree=tree, use_diff=diff, use_expansion=expansion)
        return replace(cfg, **overrides)

    def validate(self):
        tree, diff, expansion = _MODE_FLAGS[self.mode]
        if (self.use_tree, self.use_diff) != (tree, diff):
            raise ValueError(
                f"mode {self.mode!r} implies use_tree={tree}, use_diff={diff}"
            )
        if self.mode in ("llm_local", "embed_top1") and self.use_expansion:
            raise ValueError(f"mode {self.mode!r} does not expand the shortlist")


@dataclass
class MatchTrace:
    llm_calls: int = 0
    total_tokens: int = 0
    latency: float = 0.0
    cache_hits: int = 0
    prompt_snapshot: str = ""
    mode: str = "full"


@dataclass
class MatchResult:
    query: MatchQuery
    chosen: ColumnRef
    ranked: tuple[ColumnRef, ...]
    trace: MatchTrace


@dataclass
class Artifacts:
    """Read-only bundle of offline-built structures one run shares."""

    source_catalog: SchemaCatalog
    target_catalog: SchemaCatalog
    source_tree: ContextTree | None = None
    target_tree: ContextTree | None = None
    source_graph: Hypergraph | None = None
    target_graph: Hypergraph | None = None


# -- shortlist ----------------------------------------------------------------


def shortlist(s: ColumnRef, artifacts: Artifacts, k: int,
              gateway: ModelGateway) -> list[ColumnRef]:
    """Top-k targets by embedding cosine to the source column's text.

    Ties break toward the smaller (table_id, ordinal); k is clamped to the
    target count. Requires the target hypergraph (it stores the target
    embeddings).
    """
    if artifacts.target_graph is None:
        raise PipelineError("shortlist requires a target hypergraph")
    hg = artifacts.target_graph
    s_vec = _source_vector(s, artifacts, gateway)
    sims = hg.matrix @ s_vec
    order = sorted(
        range(len(hg.columns)),
        key=lambda i: (-float(sims[i]), hg.columns[i].sort_key),
    )
    return [hg.columns[i] for i in order[: min(k, len(hg.columns))]]


_CANDIDATE_LIST_RE = re.compile(r"C[1-9][0-9]*")


def llm_shortlist(s: ColumnRef, artifacts: Artifacts, k: int,
                  gateway: ModelGateway) -> list[ColumnRef]:
    """Optional LLM-driven shortlist: one call over the target column list.

    Convenience for running without an upstream matcher; any cids the
    reply misses are back-filled by embedding retrieval.
    """
    tcat = artifacts.target_catalog
    meta = artifacts.source_catalog.meta(s)
    lines = "\n".join(
        f"- {tcat.meta(r).cid}: {tcat.display_name(r)}: {tcat.meta(r).description[:80]}"
        for r in tcat.refs()
    )
    prompt = (
        f"TASK: shortlist\n"
        f"Query column: {artifacts.source_catalog.display_name(s)}; "
        f"desc: {meta.description}\n"
        f"Target columns:\n{lines}\n"
        f"Reply with one line 'CANDIDATES: <cid>, <cid>, ...' naming the "
        f"{k} most plausible matches, best first."
    )
    reply = gateway.complete(ChatCall("decision", prompt))
    picked: list[ColumnRef] = []
    seen = set()
    for cid in _CANDIDATE_LIST_RE.findall(reply.text):
        try:
            ref = tcat.by_cid(cid)
        except Exception:
            continue
        if ref not in seen:
            picked.append(ref)
            seen.add(ref)
        if len(picked) >= k:
            break
    if len(picked) < k and artifacts.target_graph is not None:
        for ref in shortlist(s, artifacts, k, gateway):
            if ref not in seen:
                picked.append(ref)
                seen.add(ref)
            if len(picked) >= k:
                break
    return picked


def _source_vector(s: ColumnRef, artifacts: Artifacts, gateway: ModelGateway) -> np.ndarray:
    if artifacts.source_graph is not None and s in artifacts.source_graph.embeddings:
        return artifacts.source_graph.vector(s)
    text = embedding_text(artifacts.source_catalog, s)
    return gateway.embed_batch([text])[0].values


# -- prompt assembly ----------------------------------------------------------


def final_prompt_sections(s_display: str, s_desc: str, s_pack: ContextPack | None,
                          diff_section: str,
                          candidates: Sequence[tuple[str, str, str, ContextPack | None]],
                          ) -> list[tuple[str, str]]:
    """Ordered (name, text) sections of the decision prompt.

    Order: query block, source diff, candidate list (cid, name, desc, then
    context), candidate differentiation, answer instruction. Every prompt
    in a reduced mode is a subsequence of these sections for the same
    query.
    """
    sections: list[tuple[str, str]] = []
    query_line = f"Query column: {s_display}"
    if s_desc:
        query_line += f"; desc: {s_desc}"
    sections.append(("query", query_line))
    if s_pack is not None:
        sections.append(("query_context", "Query context:\n" + s_pack.rendered))
    source_diff, _, candidate_diff = diff_section.partition("Differentiation among candidates:")
    source_diff = source_diff.strip()
    if source_diff:
        sections.append(("source_diff", source_diff))
    sections.append(("candidates_header", "Candidates:"))
    for cid, name, desc, pack in candidates:
        sections.append((f"candidate:{cid}", f"- {cid}: name: {name}; desc: {desc}"))
        if pack is not None:
            indented = pack.rendered.replace("\n", "\n    ")
            sections.append((f"candidate_context:{cid}", f"    context: {indented}"))
    if candidate_diff.strip():
        sections.append(("candidate_diff",
                         "Differentiation among candidates:" + candidate_diff.rstrip()))
    sections.append((
        "instruction",
        "Select the single best matching target column from the candidates. "
        "End your reply with a final line: ANSWER: <cid>",
    ))
    return sections


def assemble_final_prompt(s_display: str, s_desc: str, s_pack: ContextPack | None,
                          diff_section: str,
                          candidates: Sequence[tuple[str, str, str, ContextPack | None]],
                          ) -> str:
    if not candidates:
        raise PipelineError("cannot assemble a prompt with no candidates")
    return "\n".join(
        text for _, text in final_prompt_sections(s_display, s_desc, s_pack,
                                                  diff_section, candidates)
    )


_ANSWER_RE = re.compile(r"ANSWER:\s*(C[1-9][0-9]*)")


def parse_choice(reply: str, candidates_by_cid: dict[str, ColumnRef]) -> ColumnRef:
    """Extract the chosen candidate; the last ``ANSWER: C<digits>`` wins."""
    matches = _ANSWER_RE.findall(reply)
    if not matches:
        raise ChoiceParseError("no 'ANSWER: <cid>' line in reply")
    cid = matches[-1]
    if cid not in candidates_by_cid:
        raise InvalidChoiceError(f"chosen cid {cid} is not a candidate")
    return candidates_by_cid[cid]


# -- per-query run ------------------------------------------------------------


def run_match(query: MatchQuery, config: PipelineConfig, artifacts: Artifacts,
              gateway: ModelGateway) -> MatchResult:
    """Run one forced-choice query end to end.

    Steps, in order: optional shortlist expansion, context packs for the
    query and every candidate, source-side differentiation, candidate-side
    differentiation, then a single decision call (none in ``embed_top1``).
    Returns the chosen candidate, the ranked candidate list (chosen first),
    and a trace whose counters equal the gateway's deltas for this query.
    """
    config.validate()
    if not query.shortlist:
        raise PipelineError("query has an empty shortlist")
    scat, tcat = artifacts.source_catalog, artifacts.target_catalog
    for ref in query.shortlist:
        tcat.meta(ref)  # raises on unknown candidates
    s = query.source
    before = gateway.accounting.snapshot()

    c0 = list(query.shortlist)
    candidates = c0
    if config.use_expansion and artifacts.target_graph is not None:
        try:
            candidates = expand_candidates(
                c0, artifacts.target_graph,
                cap_total=config.cap_total, cap_strong=config.cap_strong,
            )
        except Exception as exc:
            logger.warning("candidate expansion failed, keeping shortlist: %s", exc)
            candidates = c0

    if config.mode == "embed_top1":
        trace = _finish_trace(gateway, before, config.mode, "")
        return MatchResult(query, c0[0], tuple(c0), trace)

    s_pack = None
    cand_packs: dict[ColumnRef, ContextPack] = {}
    if config.use_tree:
        if artifacts.source_tree is not None:
            s_pack = _safe_pack(artifacts.source_tree, scat, s, config)
        if artifacts.target_tree is not None:
            for t in candidates:
                pack = _safe_pack(artifacts.target_tree, tcat, t, config)
                if pack is not None:
                    cand_packs[t] = pack

    blocks: list[DifferentiationBlock] = []
    if config.use_diff and artifacts.source_graph is not None:
        blocks.extend(_source_block(s, s_pack, config, artifacts, gateway))
    if config.use_diff and artifacts.target_graph is not None:
        blocks.extend(_candidate_blocks(s, candidates, cand_packs, config, artifacts, gateway))
    diff_section = render_blocks(blocks, {Side.SOURCE: scat, Side.TARGET: tcat})

    candidate_rows = [
        (tcat.meta(t).cid, tcat.display_name(t), tcat.meta(t).description,
         cand_packs.get(t))
        for t in candidates
    ]
    prompt = assemble_final_prompt(
        scat.display_name(s), scat.meta(s).description, s_pack, diff_section,
        candidate_rows,
    )
    by_cid = {tcat.meta(t).cid: t for t in candidates}

    reply = gateway.complete(ChatCall("decision", prompt, timeout=config.decision_timeout))
    try:
        chosen = parse_choice(reply.text, by_cid)
    except PipelineError as first_error:
        retry_prompt = prompt + (
            "\nReminder: end your reply with exactly one line 'ANSWER: <cid>' "
            "where <cid> is one of: " + ", ".join(sorted(by_cid)) + "."
        )
        reply = gateway.complete(
            ChatCall("decision", retry_prompt, timeout=config.decision_timeout))
        try:
            chosen = parse_choice(reply.text, by_cid)
        except PipelineError as exc:
            raise PipelineError(
                f"decision reply unusable after retry: {exc} "
                f"(first failure: {first_error})",
                prompt_snapshot=prompt,
            ) from exc

    ranked = _rank_candidates(chosen, candidates, s, artifacts, gateway)
    trace = _finish_trace(gateway, before, config.mode, prompt)
    return MatchResult(query, chosen, tuple(ranked), trace)


def _rank_candidates(chosen: ColumnRef, candidates: Sequence[ColumnRef], s: ColumnRef,
                     artifacts: Artifacts, gateway: ModelGateway) -> list[ColumnRef]:
    # chosen first; the remainder by embedding cosine when embeddings exist,
    # else prompt order (external shortlists without a graph)
    rest = [c for c in candidates if c != chosen]
    hg = artifacts.target_graph
    if hg is not None and all(c in hg.embeddings for c in rest):
        try:
            s_vec = _source_vector(s, artifacts, gateway)
            rest.sort(key=lambda c: (-float(np.dot(hg.vector(c), s_vec)), c.sort_key))
        except GatewayError:
            pass
    return [chosen] + rest


def _safe_pack(tree: ContextTree, catalog: SchemaCatalog, ref: ColumnRef,
               config: PipelineConfig) -> ContextPack | None:
    try:
        return build_context_pack(tree, catalog, ref, config.pack_budget,
                                  config.max_pack_relations)
    except (TreeError, KeyError) as exc:
        logger.warning("context pack unavailable for %s: %s", ref, exc)
        return None


def _source_block(s: ColumnRef, s_pack: ContextPack | None,
                  config: PipelineConfig, artifacts: Artifacts,
                  gateway: ModelGateway) -> list[DifferentiationBlock]:
    scat = artifacts.source_catalog
    try:
        group = source_confusable_set(s, artifacts.source_graph,
                                      config.restrict_source_to_table)
        if len(group) < 2:
            return []
        members = group.sorted_members()[: config.max_group_members]
        packs: dict[ColumnRef, ContextPack] = {}
        if config.use_tree and artifacts.source_tree is not None:
            for m in members:
                pack = _safe_pack(artifacts.source_tree, scat, m, config)
                if pack is not None:
                    packs[m] = pack
        if s_pack is not None:
            packs[s] = s_pack
        query_meta = f"{scat.display_name(s)}: {scat.meta(s).description}"
        return [generate_block(group, members, scat, packs if config.use_tree else None,
                               query_meta, gateway, config.diff_timeout)]
    except GatewayError as exc:
        logger.warning("source differentiation skipped: %s", exc)
        return []


def _candidate_blocks(s: ColumnRef, candidates: Sequence[ColumnRef],
                      cand_packs: dict[ColumnRef, ContextPack],
                      config: PipelineConfig, artifacts: Artifacts,
                      gateway: ModelGateway) -> list[DifferentiationBlock]:
    tcat = artifacts.target_catalog
    scat = artifacts.source_catalog
    try:
        groups = groups_within(candidates, artifacts.target_graph)
        try:
            s_vec = _source_vector(s, artifacts, gateway)
        except GatewayError:
            s_vec = None
        chosen = select_groups(groups, s_vec, artifacts.target_graph,
                               config.max_groups, config.max_group_members)
    except Exception as exc:
        logger.warning("candidate grouping skipped: %s", exc)
        return []
    blocks = []
    query_meta = f"{scat.display_name(s)}: {scat.meta(s).description}"
    for group, members in chosen:
        try:
            blocks.append(generate_block(
                group, members, tcat, cand_packs if config.use_tree else None,
                query_meta, gateway, config.diff_timeout))
        except GatewayError as exc:
            logger.warning("differentiation block skipped for group of %d: %s",
                           len(members), exc)
    return blocks


def _finish_trace(gateway: ModelGateway, before, mode: str, prompt: str) -> MatchTrace:
    delta = gateway.accounting.snapshot() - before
    return MatchTrace(
        llm_calls=delta.llm_calls,
        total_tokens=delta.total_tokens,
        latency=delta.latency,
        cache_hits=delta.cache_hits,
        prompt_snapshot=prompt,
        mode=mode,
    )
