"""Grouped differentiation: contrast cues for confusable columns.

Every non-singleton similarity group that survives prioritization becomes
one LLM call producing a short group summary (what the members share and
along which axes they differ) plus one cue per member. The rendered
differentiation section drops into the final decision prompt so the model
chooses by explicit comparison instead of scoring lookalikes in isolation.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from construm.catalog import ColumnRef, SchemaCatalog, Side
from construm.gateway import ChatCall, GatewayError, ModelGateway
from construm.graph import Hypergraph, SimilarityGroup
from construm.tree import ContextPack

logger = logging.getLogger(__name__)

MISSING_CUE = "no distinguishing information provided"
DEFAULT_MAX_GROUPS = 6
DEFAULT_MAX_MEMBERS = 24


@dataclass
class DifferentiationBlock:
    group: SimilarityGroup
    summary: str
    cues: dict[ColumnRef, str]
    side: Side
    members_in_prompt: tuple[ColumnRef, ...]


def select_groups(groups: Sequence[SimilarityGroup], query_vec: np.ndarray | None,
                  hypergraph: Hypergraph, max_groups: int = DEFAULT_MAX_GROUPS,
                  max_members: int = DEFAULT_MAX_MEMBERS) -> list[tuple[SimilarityGroup, tuple[ColumnRef, ...]]]:
    """Keep the most confusable non-singleton groups, members ranked.

    Priority is the maximum member cosine to the query embedding (closest
    first), ties broken by larger group then smallest member id. Oversize
    groups are truncated to their ``max_members`` highest-cosine members.
    Returns (group, ordered members) pairs; empty when no group has two or
    more members.
    """
    scored = []
    for g in groups:
        if len(g) < 2:
            continue
        members = g.sorted_members()
        if query_vec is not None:
            cos = {m: float(np.dot(hypergraph.vector(m), query_vec)) for m in members}
            members.sort(key=lambda m: (-cos[m], m.sort_key))
            priority = max(cos.values())
        else:
            priority = 0.0
        smallest = min(g.members, key=lambda r: r.sort_key)
        scored.append(((-priority, -len(g), smallest.sort_key), g, tuple(members[:max_members])))
    scored.sort(key=lambda item: item[0])
    return [(g, members) for _, g, members in scored[:max_groups]]


_SUMMARY_RE = re.compile(r"^Summary:\s*(.+?)\s*$", re.MULTILINE)
_CUE_RE = re.compile(r"^-\s*(C[1-9][0-9]*)\s*:\s*(.+?)\s*$", re.MULTILINE)


def _block_prompt(catalog: SchemaCatalog, members: Sequence[ColumnRef],
                  packs: Mapping[ColumnRef, ContextPack] | None,
                  query_meta: str, side: Side) -> str:
    lines = []
    for ref in members:
        meta = catalog.meta(ref)
        lines.append(f"- {meta.cid} ({catalog.display_name(ref)}): {meta.description}")
        if packs and ref in packs:
            ctx = packs[ref].rendered.replace("\n", "\n    ")
            lines.append(f"    context: {ctx}")
    return (
        f"TASK: differentiate\n"
        f"SIDE: {side.value}\n"
        f"QUERY: {query_meta}\n"
        f"MEMBERS:\n" + "\n".join(lines) + "\n"
        f"These columns are easy to confuse. Reply with one line "
        f"'Summary: <1-2 sentences: what they share and how they differ>' "
        f"followed by one line '- <cid>: <short distinguishing cue>' per member."
    )


def generate_block(group: SimilarityGroup, members: Sequence[ColumnRef],
                   catalog: SchemaCatalog,
                   packs: Mapping[ColumnRef, ContextPack] | None,
                   query_meta: str, gateway: ModelGateway,
                   timeout: float = 45.0) -> DifferentiationBlock:
    """One LLM call turning a confusable group into summary + per-member cues.

    Members that the reply leaves without a cue get a placeholder. A reply
    with no parseable summary is re-prompted once; if that also fails the
    block keeps a trimmed version of the reply as its summary and no cues,
    so the prompt section is still emitted. Identical groups with identical
    context hit the gateway's disk cache and cost no new tokens.
    """
    if len(members) < 2:
        raise ValueError("differentiation needs at least 2 members")
    prompt = _block_prompt(catalog, members, packs, query_meta, group.side)
    reply = gateway.complete(ChatCall("differentiation", prompt, timeout=timeout))
    parsed = _parse_block(reply.text, members, catalog)
    if parsed is None:
        retry_prompt = prompt + (
            "\nYour previous reply could not be parsed. Use exactly the "
            "'Summary:' line followed by '- <cid>: <cue>' lines."
        )
        reply = gateway.complete(ChatCall("differentiation", retry_prompt, timeout=timeout))
        parsed = _parse_block(reply.text, members, catalog)
    if parsed is None:
        logger.warning("differentiation reply unparseable for group of %d; summary only",
                       len(members))
        summary = reply.text.strip().splitlines()[0][:200]
        return DifferentiationBlock(group, summary, {}, group.side, tuple(members))
    summary, cues = parsed
    for ref in members:
        cues.setdefault(ref, MISSING_CUE)
    return DifferentiationBlock(group, summary, cues, group.side, tuple(members))


def _parse_block(text: str, members: Sequence[ColumnRef],
                 catalog: SchemaCatalog) -> tuple[str, dict[ColumnRef, str]] | None:
    m = _SUMMARY_RE.search(text)
    if not m:
        return None
    by_cid = {catalog.meta(ref).cid: ref for ref in members}
    cues: dict[ColumnRef, str] = {}
    for cm in _CUE_RE.finditer(text):
        ref = by_cid.get(cm.group(1))
        if ref is not None:
            cues[ref] = cm.group(2)
    return m.group(1), cues


def render_blocks(blocks: Sequence[DifferentiationBlock],
                  catalog_by_side: Mapping[Side, SchemaCatalog]) -> str:
    """Deterministic differentiation section for the decision prompt.

    Source-side blocks come first under a "Source diff" header, then
    candidate groups numbered #1.. in the given (priority) order. Empty
    input renders as the empty string.
    """
    if not blocks:
        return ""
    lines: list[str] = []
    source_blocks = [b for b in blocks if b.side is Side.SOURCE]
    target_blocks = [b for b in blocks if b.side is Side.TARGET]
    for block in source_blocks:
        catalog = catalog_by_side[Side.SOURCE]
        lines.append("Source diff (confusable source group):")
        lines.append(f"Summary: {block.summary}")
        lines.extend(_cue_lines(block, catalog))
    if target_blocks:
        lines.append("Differentiation among candidates:")
        catalog = catalog_by_side[Side.TARGET]
        for i, block in enumerate(target_blocks, start=1):
            cids = [catalog.meta(r).cid for r in block.members_in_prompt]
            lines.append(f"Group #{i} ({' vs '.join(cids)}): {block.summary}")
            lines.extend(_cue_lines(block, catalog))
    return "\n".join(lines)


def _cue_lines(block: DifferentiationBlock, catalog: SchemaCatalog) -> list[str]:
    return [
        f"- {catalog.meta(ref).cid}: {block.cues[ref]}"
        for ref in block.members_in_prompt
        if ref in block.cues
    ]


def precompute_blocks(hypergraph: Hypergraph, catalog: SchemaCatalog,
                      packs: Mapping[ColumnRef, ContextPack] | None,
                      gateway: ModelGateway, timeout: float = 45.0,
                      max_members: int = DEFAULT_MAX_MEMBERS) -> list[DifferentiationBlock]:
    """Offline pass generating a block for every stored non-singleton group.

    Fills the disk cache so match-time generation amortizes to cache hits.
    """
    out = []
    for g in hypergraph.groups:
        if len(g) < 2:
            continue
        members = g.sorted_members()[:max_members]
        try:
            out.append(generate_block(g, members, catalog, packs,
                                      query_meta="(offline precompute)",
                                      gateway=gateway, timeout=timeout))
        except GatewayError as exc:
            logger.warning("skipping block for group of %d: %s", len(g), exc)
    return out
