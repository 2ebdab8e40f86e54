"""Synthetic tabular spaces and the flan-bench/1 interchange format.

A synthetic space samples upper-triangular cell DAGs on a fixed node count
(node 0 input, node n-1 output), prunes every node off the input-to-output
paths to the none op, and labels the remaining interior nodes with random
interior ops.  Architectures are distinct as (structure, labelling) pairs.

Accuracy is a logistic of per-op utilities plus a depth interaction term
plus optional per-arch noise, so with noise_sigma 0 it is a deterministic
function of the architecture.  Proxy vectors blend each z-normalized score
feature with a noisy z-normalized accuracy, giving every proxy a positive
rank correlation with accuracy without making any of them perfect.

Everything is seeded through tagged child streams, so regeneration is
byte-identical; export writes records sorted by arch id with sorted JSON
keys for the same reason.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import cellgraph
from ._kernels import dag_path_stats
from .cellgraph import (
    OP_INPUT,
    OP_NONE,
    OP_OUTPUT,
    RESERVED_OP_NAMES,
    CellArch,
    CellGraph,
    OpVocabulary,
)
from .encodings import (
    PATH_COUNT_CAP,
    SupplementalTable,
    score_feature_matrix,
    zscore_columns,
)
from .rng import Rng

BENCH_FORMAT = "flan-bench/1"


class BenchmarkError(ValueError):
    """Raised for infeasible specs and malformed benchmark files."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic space."""

    num_nodes: int
    vocab_size: int
    num_archs: int
    seed: int
    noise_sigma: float = 0.0
    op_utilities: tuple[float, ...] | None = None
    interaction_scale: float = 0.0

    def __post_init__(self):
        if self.num_nodes < 2:
            raise BenchmarkError(f"num_nodes must be >= 2, got {self.num_nodes}")
        if self.vocab_size < 3:
            raise BenchmarkError(
                f"vocab_size must cover the reserved ops, got {self.vocab_size}"
            )
        if self.num_archs < 1:
            raise BenchmarkError(f"num_archs must be positive, got {self.num_archs}")
        if self.noise_sigma < 0.0:
            raise BenchmarkError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.op_utilities is not None:
            utils = tuple(float(u) for u in self.op_utilities)
            if len(utils) != self.vocab_size:
                raise BenchmarkError(
                    f"op_utilities needs {self.vocab_size} entries, got {len(utils)}"
                )
            object.__setattr__(self, "op_utilities", utils)

    def utilities(self) -> np.ndarray:
        """Per-op accuracy contribution; defaults to a ramp over interior ops."""
        if self.op_utilities is not None:
            return np.asarray(self.op_utilities, dtype=np.float64)
        utils = np.zeros(self.vocab_size, dtype=np.float64)
        k = self.vocab_size - 3
        for i in range(k):
            utils[3 + i] = (i + 1) / k
        return utils


def _interior_name(i: int) -> str:
    if i < 26:
        return f"op_{chr(ord('a') + i)}"
    return f"op_{i}"


def make_vocab(space_id: int, vocab_size: int) -> OpVocabulary:
    names = RESERVED_OP_NAMES + tuple(_interior_name(i) for i in range(vocab_size - 3))
    return OpVocabulary(space_id, names)


def count_distinct_cells(num_nodes: int, vocab_size: int) -> int | None:
    """Exact count of distinct canonical cells, or None when too large to
    enumerate (more than six nodes)."""
    if num_nodes > 6:
        return None
    n = num_nodes
    k = vocab_size - 3
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    structures: set[bytes] = set()
    total = 0
    for mask in range(1 << len(pairs)):
        adj = np.zeros((n, n), dtype=np.uint8)
        for bit, (i, j) in enumerate(pairs):
            if mask >> bit & 1:
                adj[i, j] = 1
        pruned = cellgraph.prune_to_paths(adj, [OP_NONE] * n, 0, n - 1)
        if pruned is None:
            continue
        canon_adj, _ = pruned
        key = canon_adj.tobytes()
        if key in structures:
            continue
        structures.add(key)
        interior = sum(
            1
            for node in range(1, n - 1)
            if canon_adj[node].any() or canon_adj[:, node].any()
        )
        if k == 0:
            total += 1 if interior == 0 else 0
        else:
            total += k**interior
    return total


def _sample_cell(spec: SyntheticSpec, rng: Rng, space_id: int) -> CellGraph | None:
    n = spec.num_nodes
    adj = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        for j in range(i + 1, n):
            adj[i, j] = rng.randint(2)
    pruned = cellgraph.prune_to_paths(adj, [OP_NONE] * n, 0, n - 1)
    if pruned is None:
        return None
    canon_adj, ops = pruned
    ops[0] = OP_INPUT
    ops[n - 1] = OP_OUTPUT
    k = spec.vocab_size - 3
    for node in range(1, n - 1):
        active = canon_adj[node].any() or canon_adj[:, node].any()
        if not active:
            continue
        if k == 0:
            return None
        ops[node] = 3 + rng.randint(k)
    return CellGraph(canon_adj, ops, space_id)


@dataclass(frozen=True, eq=False)
class TabularBenchmark:
    """Architectures with ground-truth accuracies and optional proxy vectors."""

    name: str
    vocab: OpVocabulary
    archs: tuple[CellArch, ...]
    accuracies: dict[int, float]
    proxies: SupplementalTable | None
    metadata: dict[str, str]
    cells_per_arch: int
    num_nodes: int

    def __post_init__(self):
        object.__setattr__(self, "archs", tuple(self.archs))
        ids = [a.arch_id for a in self.archs]
        if len(set(ids)) != len(ids):
            raise BenchmarkError("duplicate arch ids")
        if set(ids) != set(self.accuracies):
            raise BenchmarkError("accuracies do not cover exactly the arch ids")
        by_id = {a.arch_id: a for a in self.archs}
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.archs)

    @property
    def space_id(self) -> int:
        return self.vocab.space_id

    @property
    def arch_ids(self) -> tuple[int, ...]:
        return tuple(a.arch_id for a in self.archs)

    def arch(self, arch_id: int) -> CellArch:
        try:
            return self._by_id[arch_id]
        except KeyError:
            raise BenchmarkError(f"unknown arch id {arch_id}") from None

    def accuracy(self, arch_id: int) -> float:
        try:
            return self.accuracies[arch_id]
        except KeyError:
            raise BenchmarkError(f"unknown arch id {arch_id}") from None

    def accuracy_vector(self, arch_ids) -> np.ndarray:
        return np.array([self.accuracy(i) for i in arch_ids], dtype=np.float64)

    def best_arch_id(self) -> int:
        """Highest accuracy, ties broken by the smaller id."""
        return min(self.accuracies, key=lambda i: (-self.accuracies[i], i))


def _arch_longest_path(arch: CellArch) -> int:
    total = 0
    for cell in arch.cells:
        src, dst = cellgraph.source_and_sink(cell)
        longest, _, _ = dag_path_stats(
            cell.active_adjacency().astype(np.uint8), src, dst, PATH_COUNT_CAP
        )
        total += int(longest)
    return total


def generate_synthetic(
    spec: SyntheticSpec, name: str | None = None, space_id: int = 0
) -> TabularBenchmark:
    """Sample a distinct-architecture benchmark from a synthetic spec."""
    vocab = make_vocab(space_id, spec.vocab_size)
    rng = Rng(spec.seed).child("gen")
    seen: set[tuple[bytes, tuple[int, ...]]] = set()
    cells: list[CellGraph] = []
    budget = 10_000 + 500 * spec.num_archs
    attempts = 0
    while len(cells) < spec.num_archs:
        if attempts >= budget:
            exact = count_distinct_cells(spec.num_nodes, spec.vocab_size)
            if exact is not None and exact < spec.num_archs:
                raise BenchmarkError(
                    f"space holds only {exact} distinct cells, "
                    f"cannot sample {spec.num_archs}"
                )
            raise BenchmarkError(
                f"gave up after {budget} attempts sampling {spec.num_archs} "
                "distinct cells; the space is too small or nearly exhausted"
            )
        attempts += 1
        cell = _sample_cell(spec, rng, space_id)
        if cell is None:
            continue
        key = (cell.adjacency.tobytes(), cell.op_ids)
        if key in seen:
            continue
        seen.add(key)
        cells.append(cell)
    archs = tuple(
        CellArch((cell,), arch_id=i) for i, cell in enumerate(cells)
    )

    utils = spec.utilities()
    noise_root = Rng(spec.seed)
    accuracies: dict[int, float] = {}
    for arch in archs:
        cell = arch.cells[0]
        base = sum(utils[op] for op in cell.op_ids) / spec.num_nodes
        depth = spec.interaction_scale * _arch_longest_path(arch) / spec.num_nodes
        noise = 0.0
        if spec.noise_sigma > 0.0:
            noise = noise_root.child("noise", arch.arch_id).normal(0.0, spec.noise_sigma)
        z = base + depth + noise
        accuracies[arch.arch_id] = 1.0 / (1.0 + math.exp(-z))

    feats = zscore_columns(score_feature_matrix(archs, vocab))
    acc_vec = np.array([accuracies[a.arch_id] for a in archs], dtype=np.float64)
    zacc = zscore_columns(acc_vec.reshape(-1, 1)).reshape(-1)
    proxy_vectors: dict[int, np.ndarray] = {}
    for row, arch in enumerate(archs):
        stream = noise_root.child("proxy", arch.arch_id)
        proxy = np.empty(feats.shape[1], dtype=np.float64)
        for k in range(feats.shape[1]):
            proxy[k] = 0.5 * feats[row, k] + 0.5 * (zacc[row] + stream.normal(0.0, 0.5))
        proxy_vectors[arch.arch_id] = proxy
    proxies = SupplementalTable("zcp", feats.shape[1], proxy_vectors)

    metadata = {
        "generator": "synthetic",
        "num_nodes": str(spec.num_nodes),
        "vocab_size": str(spec.vocab_size),
        "num_archs": str(spec.num_archs),
        "seed": str(spec.seed),
        "noise_sigma": repr(float(spec.noise_sigma)),
        "interaction_scale": repr(float(spec.interaction_scale)),
    }
    return TabularBenchmark(
        name=name or f"synthetic-n{spec.num_nodes}v{spec.vocab_size}-s{spec.seed}",
        vocab=vocab,
        archs=archs,
        accuracies=accuracies,
        proxies=proxies,
        metadata=metadata,
        cells_per_arch=1,
        num_nodes=spec.num_nodes,
    )


def export(bench: TabularBenchmark, path) -> None:
    """Write flan-bench/1 JSONL; byte-identical for equal benchmarks.

    "count" and "metadata" are extras beyond the core header keys; readers
    that do not know them can ignore them.
    """
    zcp_dim = bench.proxies.dim if bench.proxies is not None else 0
    header = {
        "format": BENCH_FORMAT,
        "name": bench.name,
        "space_id": bench.space_id,
        "num_nodes": bench.num_nodes,
        "cells_per_arch": bench.cells_per_arch,
        "ops": list(bench.vocab.op_names),
        "count": len(bench),
        "zcp_dim": zcp_dim,
        "metadata": dict(sorted(bench.metadata.items())),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for arch in sorted(bench.archs, key=lambda a: a.arch_id):
            record = {
                "id": arch.arch_id,
                "cells": [
                    {
                        "adj": c.adjacency.astype(int).tolist(),
                        "ops": list(c.op_ids),
                    }
                    for c in arch.cells
                ],
                "acc": bench.accuracy(arch.arch_id),
            }
            if bench.proxies is not None and arch.arch_id in bench.proxies.vectors:
                record["zcp"] = [
                    float(v) for v in bench.proxies.vector(arch.arch_id)
                ]
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _need(mapping: dict, key: str, line: int):
    if key not in mapping:
        raise BenchmarkError(f"missing key {key!r}", line)
    return mapping[key]


def ingest(path) -> TabularBenchmark:
    """Read and fully validate a flan-bench/1 file."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise BenchmarkError("empty benchmark file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise BenchmarkError(f"header is not valid JSON: {exc}", 1) from None
    if header.get("format") != BENCH_FORMAT:
        raise BenchmarkError(
            f"expected format {BENCH_FORMAT!r}, got {header.get('format')!r}", 1
        )
    for key in ("name", "space_id", "num_nodes", "cells_per_arch", "ops"):
        _need(header, key, 1)
    num_nodes = int(header["num_nodes"])
    cells_per_arch = int(header["cells_per_arch"])
    if cells_per_arch not in (1, 2):
        raise BenchmarkError(f"cells_per_arch must be 1 or 2, got {cells_per_arch}", 1)
    try:
        vocab = OpVocabulary(int(header["space_id"]), tuple(header["ops"]))
    except ValueError as exc:
        raise BenchmarkError(f"bad vocabulary: {exc}", 1) from None
    zcp_dim = int(header.get("zcp_dim", 0))
    if zcp_dim < 0:
        raise BenchmarkError(f"zcp_dim must be >= 0, got {zcp_dim}", 1)
    records = lines[1:]
    if "count" in header and len(records) != int(header["count"]):
        raise BenchmarkError(
            f"header promises {header['count']} records, file has {len(records)}"
        )

    archs: list[CellArch] = []
    accuracies: dict[int, float] = {}
    proxy_vectors: dict[int, np.ndarray] = {}
    seen_ids: set[int] = set()
    for offset, raw in enumerate(records):
        line = offset + 2
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BenchmarkError(f"record is not valid JSON: {exc}", line) from None
        arch_id = int(_need(rec, "id", line))
        if arch_id in seen_ids:
            raise BenchmarkError(f"duplicate arch id {arch_id}", line)
        seen_ids.add(arch_id)
        cells_raw = _need(rec, "cells", line)
        if len(cells_raw) != cells_per_arch:
            raise BenchmarkError(
                f"expected {cells_per_arch} cells, got {len(cells_raw)}", line
            )
        cells = []
        for cell_raw in cells_raw:
            adj = _need(cell_raw, "adj", line)
            ops = _need(cell_raw, "ops", line)
            if len(adj) != num_nodes or any(len(row) != num_nodes for row in adj):
                raise BenchmarkError(
                    f"adjacency must be {num_nodes}x{num_nodes}", line
                )
            if len(ops) != num_nodes:
                raise BenchmarkError(
                    f"ops must list {num_nodes} entries, got {len(ops)}", line
                )
            try:
                cell = CellGraph(adj, ops, vocab.space_id)
            except ValueError as exc:
                raise BenchmarkError(f"bad cell: {exc}", line) from None
            diag = cellgraph.validate(cell, vocab.size)
            if diag is not None:
                raise BenchmarkError(f"invalid cell: {diag}", line)
            cells.append(cell)
        try:
            arch = CellArch(tuple(cells), arch_id)
        except ValueError as exc:
            raise BenchmarkError(f"bad arch: {exc}", line) from None
        accuracy = float(_need(rec, "acc", line))
        if not math.isfinite(accuracy) or not 0.0 <= accuracy <= 1.0:
            raise BenchmarkError(f"acc must be in [0, 1], got {accuracy}", line)
        if zcp_dim > 0:
            # zcp is optional per record; lookups of archs without one fail
            # loudly at supplemental-provider time
            if "zcp" in rec:
                zcp = np.asarray(rec["zcp"], dtype=np.float64)
                if zcp.shape != (zcp_dim,):
                    raise BenchmarkError(
                        f"zcp must hold {zcp_dim} values, got shape {zcp.shape}",
                        line,
                    )
                if not np.all(np.isfinite(zcp)):
                    raise BenchmarkError("zcp contains non-finite values", line)
                proxy_vectors[arch_id] = zcp
        elif "zcp" in rec:
            raise BenchmarkError("record carries zcp but header zcp_dim is 0", line)
        archs.append(arch)
        accuracies[arch_id] = accuracy

    metadata = {
        str(k): str(v) for k, v in dict(header.get("metadata", {})).items()
    }
    proxies = (
        SupplementalTable("zcp", zcp_dim, proxy_vectors) if zcp_dim > 0 else None
    )
    return TabularBenchmark(
        name=str(header["name"]),
        vocab=vocab,
        archs=tuple(archs),
        accuracies=accuracies,
        proxies=proxies,
        metadata=metadata,
        cells_per_arch=cells_per_arch,
        num_nodes=num_nodes,
    )


def split(bench: TabularBenchmark, train_count: int, seed: int):
    """Deterministic shuffled train/test split; both sides returned sorted."""
    n = len(bench)
    if not 1 <= train_count <= n - 1:
        raise BenchmarkError(
            f"train_count must be in [1, {n - 1}] for {n} archs, got {train_count}"
        )
    ids = list(bench.arch_ids)
    Rng(seed).child("split").shuffle(ids)
    return tuple(sorted(ids[:train_count])), tuple(sorted(ids[train_count:]))
