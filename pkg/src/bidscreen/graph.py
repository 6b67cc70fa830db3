"""Per-market tender graphs and their fixed attention weights.

Nodes are tenders; an edge joins two tenders of one market whenever their
bidder sets overlap (Jaccard similarity above a threshold, default: any
overlap). Each edge carries the bidder-overlap similarity and the squared
time gap between the tenders.

Attention between a node and a neighbor is the softmax-normalized product
of bidder similarity and a Gaussian temporal kernel with length-scale
``lam``:

    score(i, j) = jaccard(i, j) * exp(-(t_i - t_j)^2 / lam)

normalized over the neighborhood of i including i itself (the self-loop
score is exactly 1). The scores carry no learned weights beyond ``lam``,
so the same attention matrix applies at every propagation layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date

import numpy as np

from .data_model import Label, Tender
from .screens import DegenerateTenderError, ScreenVector, compute_screens

logger = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25


class EmptyGraphError(Exception):
    """No usable tenders remain for a market."""


def jaccard(a, b) -> float:
    """Bidder-set overlap: |a & b| / |a | b|, in [0, 1]."""
    sa, sb = set(a), set(b)
    if not sa or not sb:
        raise ValueError("jaccard requires non-empty bidder sets")
    return len(sa & sb) / len(sa | sb)


def delta_time(dt2: float, lam: float) -> float:
    """Temporal proximity factor exp(-dt2 / lam), in (0, 1]."""
    if lam <= 0:
        raise ValueError(f"temporal length-scale must be positive, got {lam}")
    if dt2 < 0:
        raise ValueError(f"squared time gap must be >= 0, got {dt2}")
    return float(np.exp(-dt2 / lam))


def edge_score(jac: float, dt2: float, lam: float) -> float:
    """Unnormalized attention score: bidder similarity times temporal factor."""
    return jac * delta_time(dt2, lam)


@dataclass(frozen=True)
class TenderNode:
    node_index: int
    tender_id: str
    market_id: str
    bidder_set: frozenset[str]
    time: float
    features: ScreenVector
    label: Label


@dataclass(frozen=True)
class Edge:
    """Undirected edge stored once with i < j."""

    i: int
    j: int
    jaccard: float
    dt2: float


@dataclass
class BlockStructure:
    """Dense similarity/time-gap matrices for one market block.

    ``jac`` has 1.0 on the diagonal (a tender shares all bidders with
    itself) and the pairwise Jaccard similarity on edges; ``mask`` marks
    edges plus the diagonal. Entries outside the mask are structural zeros.
    """

    start: int
    stop: int
    jac: np.ndarray
    dt2: np.ndarray
    mask: np.ndarray


@dataclass
class TenderGraph:
    market_id: str
    nodes: list[TenderNode]
    edges: list[Edge]
    market_slices: list[tuple[str, int, int]]
    features: np.ndarray  # (n, 9) screen matrix; replaced by with_features
    skipped: list[tuple[str, str]] = field(default_factory=list)
    _blocks: list[BlockStructure] | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def labels01(self) -> np.ndarray:
        """Per-node class codes: 0 competitive, 1 collusive, -1 unknown."""
        code = {Label.COMPETITIVE: 0, Label.COLLUSIVE: 1, Label.UNKNOWN: -1}
        return np.array([code[nd.label] for nd in self.nodes], dtype=np.int64)

    def node_markets(self) -> list[str]:
        return [nd.market_id for nd in self.nodes]

    def with_features(self, matrix: np.ndarray) -> "TenderGraph":
        """Copy of the graph carrying a replacement feature matrix.

        Structure (nodes, edges, attention blocks) is shared, so normalizing
        features never perturbs topology.
        """
        if matrix.shape != (self.n, self.features.shape[1]):
            raise ValueError(f"feature matrix shape {matrix.shape} != {(self.n, self.features.shape[1])}")
        g = replace(self, features=np.asarray(matrix, dtype=np.float64))
        g._blocks = self.blocks()
        return g

    def blocks(self) -> list[BlockStructure]:
        """Dense per-market structure, built once and shared across copies."""
        if self._blocks is None:
            self._blocks = _build_blocks(self)
        return self._blocks


def _build_blocks(g: TenderGraph) -> list[BlockStructure]:
    blocks = []
    edges_by_block: dict[int, list[Edge]] = {k: [] for k in range(len(g.market_slices))}
    bounds = [(start, stop) for _, start, stop in g.market_slices]
    for e in g.edges:
        for k, (start, stop) in enumerate(bounds):
            if start <= e.i < stop:
                if not (start <= e.j < stop):
                    raise ValueError(f"edge ({e.i},{e.j}) crosses market blocks")
                edges_by_block[k].append(e)
                break
    for k, (start, stop) in enumerate(bounds):
        m = stop - start
        jac = np.zeros((m, m), dtype=np.float64)
        dt2 = np.zeros((m, m), dtype=np.float64)
        mask = np.zeros((m, m), dtype=bool)
        np.fill_diagonal(jac, 1.0)
        np.fill_diagonal(mask, True)
        for e in edges_by_block[k]:
            a, b = e.i - start, e.j - start
            jac[a, b] = jac[b, a] = e.jaccard
            dt2[a, b] = dt2[b, a] = e.dt2
            mask[a, b] = mask[b, a] = True
        blocks.append(BlockStructure(start, stop, jac, dt2, mask))
    return blocks


def build_market_graph(
    tenders: list[Tender],
    epoch: date,
    tau: float = 0.0,
    top_k: int | None = None,
) -> TenderGraph:
    """Graph of one market: node times in fractional years since ``epoch``,
    one edge per tender pair with Jaccard similarity > ``tau``.

    ``top_k`` optionally caps each node's neighbors to its k most similar
    (an edge survives if either endpoint ranks it). Tenders whose screens
    are degenerate are excluded and listed in ``skipped``; a market with no
    usable tender raises EmptyGraphError.
    """
    market_ids = {t.market_id for t in tenders}
    if len(market_ids) > 1:
        raise ValueError(f"tenders span several markets: {sorted(market_ids)}")

    nodes: list[TenderNode] = []
    skipped: list[tuple[str, str]] = []
    for t in tenders:
        try:
            feats = compute_screens(t)
        except DegenerateTenderError as exc:
            skipped.append((t.tender_id, str(exc)))
            continue
        nodes.append(TenderNode(
            node_index=len(nodes),
            tender_id=t.tender_id,
            market_id=t.market_id,
            bidder_set=t.bidder_set(),
            time=(t.date - epoch).days / DAYS_PER_YEAR,
            features=feats,
            label=t.label,
        ))
    if skipped:
        logger.warning("market %s: dropped %d degenerate tender(s)",
                       next(iter(market_ids), "?"), len(skipped))
    if not nodes:
        raise EmptyGraphError(f"market {next(iter(market_ids), '?')!r} has no usable tenders")

    candidates: list[Edge] = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            jac = jaccard(nodes[i].bidder_set, nodes[j].bidder_set)
            if jac > tau and jac > 0.0:
                dt = nodes[i].time - nodes[j].time
                candidates.append(Edge(i, j, jac, dt * dt))

    if top_k is not None:
        per_node: dict[int, list[Edge]] = {i: [] for i in range(len(nodes))}
        for e in candidates:
            per_node[e.i].append(e)
            per_node[e.j].append(e)
        keep: set[tuple[int, int]] = set()
        for i, es in per_node.items():
            es.sort(key=lambda e: (-e.jaccard, e.dt2, e.j if e.i == i else e.i))
            for e in es[:top_k]:
                keep.add((e.i, e.j))
        candidates = [e for e in candidates if (e.i, e.j) in keep]

    features = np.stack([nd.features.as_array() for nd in nodes]) if nodes else np.zeros((0, 9))
    market_id = next(iter(market_ids)) if market_ids else ""
    return TenderGraph(
        market_id=market_id,
        nodes=nodes,
        edges=sorted(candidates, key=lambda e: (e.i, e.j)),
        market_slices=[(market_id, 0, len(nodes))],
        features=features,
        skipped=skipped,
    )


def union_graph(graphs: list[TenderGraph]) -> TenderGraph:
    """Disjoint union of per-market graphs with node indices re-based.

    Firm identifiers are market-scoped, so no cross-market edge can exist;
    the union stays block-diagonal by construction. Duplicate market ids
    are rejected.
    """
    if not graphs:
        raise ValueError("union of zero graphs")
    seen: set[str] = set()
    for g in graphs:
        for mid, _, _ in g.market_slices:
            if mid in seen:
                raise ValueError(f"duplicate market id {mid!r} in union")
            seen.add(mid)

    nodes: list[TenderNode] = []
    edges: list[Edge] = []
    slices: list[tuple[str, int, int]] = []
    skipped: list[tuple[str, str]] = []
    offset = 0
    for g in graphs:
        for nd in g.nodes:
            nodes.append(replace(nd, node_index=offset + nd.node_index))
        for e in g.edges:
            edges.append(Edge(e.i + offset, e.j + offset, e.jaccard, e.dt2))
        for mid, start, stop in g.market_slices:
            slices.append((mid, start + offset, stop + offset))
        skipped.extend(g.skipped)
        offset += g.n
    return TenderGraph(
        market_id="+".join(mid for mid, _, _ in slices),
        nodes=nodes,
        edges=edges,
        market_slices=slices,
        features=np.vstack([g.features for g in graphs]),
        skipped=skipped,
    )


def attention_block_matrices(g: TenderGraph, lam: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-block dense attention matrices and temporal factors at scale lam.

    Returns (A_blocks, delta_blocks); rows of each A block sum to 1 over the
    neighborhood (edges plus self-loop), zeros elsewhere.
    """
    if lam <= 0:
        raise ValueError(f"temporal length-scale must be positive, got {lam}")
    a_blocks, d_blocks = [], []
    for blk in g.blocks():
        delta = np.where(blk.mask, np.exp(-blk.dt2 / lam), 0.0)
        scores = blk.jac * delta
        expd = np.where(blk.mask, np.exp(scores), 0.0)
        a = expd / expd.sum(axis=1, keepdims=True)
        a_blocks.append(a)
        d_blocks.append(delta)
    return a_blocks, d_blocks


@dataclass
class AttentionMatrix:
    """Row view of the attention weights: per node, (neighbor, weight) pairs
    including the self-loop. Rows sum to 1."""

    rows: list[list[tuple[int, float]]]

    def row(self, i: int) -> list[tuple[int, float]]:
        return self.rows[i]


def attention_weights(g: TenderGraph, lam: float) -> AttentionMatrix:
    """Attention weights for every node of ``g`` at temporal scale ``lam``."""
    a_blocks, _ = attention_block_matrices(g, lam)
    rows: list[list[tuple[int, float]]] = []
    for blk, a in zip(g.blocks(), a_blocks):
        for r in range(blk.stop - blk.start):
            cols = np.nonzero(blk.mask[r])[0]
            rows.append([(int(c + blk.start), float(a[r, c])) for c in cols])
    return AttentionMatrix(rows=rows)
