"""Approximate nearest-neighbor index over feature vectors.

A from-scratch hierarchical navigable small world (HNSW) graph: layered
proximity lists with seeded, per-id level assignment so that builds are
reproducible and independent of reload. The metric is Euclidean distance,
matching the embedder's 1 - L2 similarity so the nearest stored vector is
the highest-predicted-similarity record. All distance ties break toward
the lower record id, everywhere.

An exhaustive full-scan search is provided as the recall oracle.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

INDEX_MAGIC = b"MIDX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class IndexConfig:
    dim: int
    max_neighbors: int = 16  # per-layer degree cap; doubled at layer 0
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_neighbors < 2:
            raise ValueError("max_neighbors must be >= 2")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")


@dataclass(frozen=True)
class QueryResult:
    record_id: int
    distance: float


class AnnIndex:
    def __init__(self, config: IndexConfig):
        self.config = config
        self._ids: list[int] = []
        self._id_to_pos: dict[int, int] = {}
        self._vectors = np.empty((0, config.dim), dtype=np.float32)
        self._levels: list[int] = []
        self._links: list[list[list[int]]] = []  # pos -> level -> neighbor positions
        self._entry = -1
        self._max_level = -1
        self._level_scale = 1.0 / math.log(config.max_neighbors)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    def _assign_level(self, record_id: int) -> int:
        # Level depends only on (seed, id): rebuilds and reloads agree.
        u = np.random.default_rng([self.config.seed, 6, record_id]).random()
        return int(-math.log(max(u, 1e-300)) * self._level_scale)

    def _dist2(self, q: np.ndarray, positions) -> np.ndarray:
        diff = self._vectors[positions] - q
        return (diff * diff).sum(axis=1)

    def _max_degree(self, level: int) -> int:
        m = self.config.max_neighbors
        return 2 * m if level == 0 else m

    def _search_layer(self, q: np.ndarray, entry_points: list[int], ef: int,
                      level: int) -> list[tuple[float, int, int]]:
        """Best-first beam search on one layer.

        Returns up to ef (dist2, id, pos) triples sorted ascending; ids
        participate in every comparison so ties resolve to lower ids.
        """
        d2 = self._dist2(q, entry_points)
        visited = set(entry_points)
        candidates = [(float(d), self._ids[p], p) for d, p in zip(d2, entry_points)]
        heapq.heapify(candidates)
        # Max-heap of current best ef: negated keys, so the worst kept
        # element (and among equals, the higher id) pops first.
        best = [(-c[0], -c[1], c[2]) for c in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)

        while candidates:
            d, i, p = heapq.heappop(candidates)
            if len(best) >= ef and (d, i) > (-best[0][0], -best[0][1]):
                break
            fresh = [n for n in self._links[p][level] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for nd, np_ in zip(self._dist2(q, fresh), fresh):
                entry = (float(nd), self._ids[np_], np_)
                if len(best) < ef:
                    heapq.heappush(candidates, entry)
                    heapq.heappush(best, (-entry[0], -entry[1], entry[2]))
                elif (entry[0], entry[1]) < (-best[0][0], -best[0][1]):
                    heapq.heappush(candidates, entry)
                    heapq.heapreplace(best, (-entry[0], -entry[1], entry[2]))
        return sorted((-d, -i, p) for d, i, p in best)

    def _greedy_descend(self, q: np.ndarray, pos: int, level: int) -> int:
        """ef=1 greedy walk toward q on one layer."""
        cur = pos
        cur_d = float(self._dist2(q, [pos])[0])
        improved = True
        while improved:
            improved = False
            links = self._links[cur][level]
            if not links:
                break
            d2 = self._dist2(q, links)
            best_i = int(np.lexsort(([self._ids[p] for p in links], d2))[0])
            nd = float(d2[best_i])
            cand = links[best_i]
            if (nd, self._ids[cand]) < (cur_d, self._ids[cur]):
                cur, cur_d = cand, nd
                improved = True
        return cur

    def _select_neighbors(self, candidates: list[tuple[float, int, int]],
                          m: int) -> list[int]:
        """Heuristic neighbor selection: keep a candidate only if it is
        closer to the query node than to every already-kept neighbor."""
        selected: list[int] = []
        for d, _, p in sorted(candidates):
            if len(selected) >= m:
                break
            if selected:
                v = self._vectors[p]
                diff = self._vectors[selected] - v
                if float((diff * diff).sum(axis=1).min()) < d:
                    continue
            selected.append(p)
        return selected

    def _prune(self, pos: int, level: int) -> None:
        links = self._links[pos][level]
        cap = self._max_degree(level)
        if len(links) <= cap:
            return
        v = self._vectors[pos]
        d2 = self._dist2(v, links)
        cands = [(float(d), self._ids[p], p) for d, p in zip(d2, links)]
        self._links[pos][level] = self._select_neighbors(cands, cap)

    def insert(self, record_id: int, vector: np.ndarray) -> None:
        """Insert one vector; degree invariants are restored by pruning."""
        record_id = int(record_id)
        if record_id in self._id_to_pos:
            raise ValueError(f"duplicate id {record_id}")
        v = np.ascontiguousarray(vector, dtype=np.float32)
        if v.shape != (self.config.dim,):
            raise ValueError(f"vector shape {v.shape} != ({self.config.dim},)")

        pos = len(self._ids)
        self._ids.append(record_id)
        self._id_to_pos[record_id] = pos
        self._vectors = np.vstack([self._vectors, v[None, :]])
        level = self._assign_level(record_id)
        self._levels.append(level)
        self._links.append([[] for _ in range(level + 1)])

        if self._entry < 0:
            self._entry = pos
            self._max_level = level
            return

        ep = self._entry
        for lc in range(self._max_level, level, -1):
            ep = self._greedy_descend(v, ep, lc)

        eps = [ep]
        for lc in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(v, eps, self.config.ef_construction, lc)
            neighbors = self._select_neighbors(found, self.config.max_neighbors)
            self._links[pos][lc] = list(neighbors)
            for n in neighbors:
                self._links[n][lc].append(pos)
                self._prune(n, lc)
            eps = [p for _, _, p in found]

        if level > self._max_level:
            self._entry = pos
            self._max_level = level

    def query(self, vector: np.ndarray, k: int, ef_search: int | None = None
              ) -> list[QueryResult]:
        """k nearest stored vectors, ascending by Euclidean distance."""
        if k < 1:
            raise ValueError("k must be >= 1")
        v = np.ascontiguousarray(vector, dtype=np.float32)
        if v.shape != (self.config.dim,):
            raise ValueError(f"query shape {v.shape} != ({self.config.dim},)")
        if not self._ids:
            return []
        ef = max(ef_search or self.config.ef_search, k)
        ep = self._entry
        for lc in range(self._max_level, 0, -1):
            ep = self._greedy_descend(v, ep, lc)
        found = self._search_layer(v, [ep], ef, 0)
        return [QueryResult(record_id=i, distance=math.sqrt(d))
                for d, i, _ in found[:k]]

    def vector_for(self, record_id: int) -> np.ndarray:
        return self._vectors[self._id_to_pos[record_id]].copy()


def build(config: IndexConfig, vectors: list[tuple[int, np.ndarray]]) -> AnnIndex:
    """Incremental construction over (id, vector) pairs in list order."""
    index = AnnIndex(config)
    seen = set()
    for record_id, _ in vectors:
        if record_id in seen:
            raise ValueError(f"duplicate id {record_id}")
        seen.add(record_id)
    for record_id, v in vectors:
        index.insert(record_id, v)
    return index


def exhaustive_query(vectors: list[tuple[int, np.ndarray]], v: np.ndarray,
                     k: int) -> list[QueryResult]:
    """Exact k-NN by full scan; ties broken by lower id. The oracle
    against which index recall is measured."""
    if not vectors:
        return []
    ids = np.array([i for i, _ in vectors], dtype=np.int64)
    mat = np.stack([np.asarray(x, dtype=np.float32) for _, x in vectors])
    q = np.ascontiguousarray(v, dtype=np.float32)
    if q.shape != (mat.shape[1],):
        raise ValueError(f"query shape {q.shape} != ({mat.shape[1]},)")
    diff = mat - q
    d2 = (diff * diff).sum(axis=1)
    order = np.lexsort((ids, d2))[:k]
    return [QueryResult(record_id=int(ids[i]), distance=math.sqrt(float(d2[i])))
            for i in order]


def save_index(path, index: AnnIndex) -> None:
    """Versioned binary graph dump; reload preserves query results exactly."""
    cfg = index.config
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<5I", INDEX_VERSION, cfg.dim, cfg.max_neighbors,
                            cfg.ef_construction, cfg.ef_search))
        f.write(struct.pack("<q", cfg.seed))
        f.write(struct.pack("<Qqi", len(index._ids), index._entry, index._max_level))
        for i, record_id in enumerate(index._ids):
            f.write(struct.pack("<QI", record_id, index._levels[i]))
        f.write(np.ascontiguousarray(index._vectors, dtype="<f4").tobytes())
        for links in index._links:
            for level_links in links:
                f.write(struct.pack("<I", len(level_links)))
                if level_links:
                    f.write(np.array(level_links, dtype="<u4").tobytes())


def load_index(path) -> AnnIndex:
    with open(path, "rb") as f:
        if f.read(4) != INDEX_MAGIC:
            raise ValueError(f"not an index file: {path}")
        version, dim, m, ef_c, ef_s = struct.unpack("<5I", f.read(20))
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        (seed,) = struct.unpack("<q", f.read(8))
        count, entry, max_level = struct.unpack("<Qqi", f.read(20))
        index = AnnIndex(IndexConfig(dim=dim, max_neighbors=m, ef_construction=ef_c,
                                     ef_search=ef_s, seed=seed))
        for _ in range(count):
            record_id, level = struct.unpack("<QI", f.read(12))
            index._ids.append(int(record_id))
            index._levels.append(int(level))
        index._id_to_pos = {rid: i for i, rid in enumerate(index._ids)}
        n = count * dim
        index._vectors = np.frombuffer(f.read(4 * n), dtype="<f4").astype(
            np.float32).reshape(count, dim)
        for i in range(count):
            links = []
            for _ in range(index._levels[i] + 1):
                (deg,) = struct.unpack("<I", f.read(4))
                if deg:
                    links.append(np.frombuffer(f.read(4 * deg),
                                               dtype="<u4").astype(int).tolist())
                else:
                    links.append([])
            index._links.append(links)
        index._entry = int(entry)
        index._max_level = int(max_level)
    return index
