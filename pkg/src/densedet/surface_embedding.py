"""Surface-embedding core: mesh, vertex embeddings, posterior, and loss.

Each mesh vertex carries a learnable D-dimensional embedding row. A pixel
with predicted embedding ``q`` is soft-assigned to vertices through a softmax
over negative squared Euclidean distances,

    p(vertex X | q) = exp(-||e_X - q||^2) / sum_Y exp(-||e_Y - q||^2),

computed with max-subtraction for stability. The integral over the surface
in the normalizer is discretized as an unweighted sum over mesh vertices
(meshes here carry no area measure). An inner-product score is available as
an alternative via ``score="dot"`` but the distance kernel is the default.

The training objective is the negative mean log-likelihood of the annotated
(pixel, vertex) correspondences, minimized; gradients for both the embedding
table and the pixel embedding field are analytic.

Mesh text format (used by the scene store and directly loadable):

    mesh V E
    <x> <y> [<z>]     (V vertex lines)
    <i> <j> <length>  (E edge lines)
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mesh:
    """A connected graph of vertices with positive edge lengths.

    ``positions`` is (V, 2) or (V, 3); ``edges`` is a list of
    ``(i, j, length)`` with ``length > 0``. Connectivity is enforced at
    construction so downstream shortest-path queries cannot fail.
    """

    positions: np.ndarray
    edges: list[tuple[int, int, float]]
    _adjacency: list[list[tuple[int, float]]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] not in (2, 3):
            raise ValueError(
                f"positions must be (V, 2) or (V, 3), got {self.positions.shape}"
            )
        v = self.positions.shape[0]
        if v < 2:
            raise ValueError(f"mesh needs at least 2 vertices, got {v}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("vertex positions must be finite")

        adjacency: list[list[tuple[int, float]]] = [[] for _ in range(v)]
        cleaned = []
        for i, j, length in self.edges:
            i, j, length = int(i), int(j), float(length)
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            if not 0 <= i < v or not 0 <= j < v:
                raise ValueError(f"edge ({i}, {j}) references a missing vertex")
            if not (math.isfinite(length) and length > 0):
                raise ValueError(f"edge ({i}, {j}) has non-positive length {length}")
            adjacency[i].append((j, length))
            adjacency[j].append((i, length))
            cleaned.append((i, j, length))
        self.edges = cleaned
        self._adjacency = adjacency

        # connectivity check (BFS from vertex 0)
        seen = np.zeros(v, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            u = stack.pop()
            for nbr, _ in adjacency[u]:
                if not seen[nbr]:
                    seen[nbr] = True
                    stack.append(nbr)
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise ValueError(f"mesh is disconnected (vertex {missing} unreachable)")

    @property
    def vertex_count(self) -> int:
        return self.positions.shape[0]


@dataclass
class EmbeddingMatrix:
    """The learnable V x D table of per-vertex embedding rows."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"embedding table must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding table contains non-finite values")

    @property
    def vertex_count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def initialize(cls, vertex_count: int, dim: int, seed: int) -> "EmbeddingMatrix":
        """Seeded i.i.d. uniform initialization in [-0.1, 0.1]."""
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-0.1, 0.1, size=(vertex_count, dim)))


@dataclass
class PixelEmbeddingField:
    """A D x P x P grid of predicted per-pixel embeddings over a region."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"field must be D x P x P, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding field contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CorrespondenceSample:
    """One supervised (pixel, vertex) pair.

    ``row``/``col`` index a pixel of whatever grid the sample is anchored in
    (an ROI grid during training, the full image in stored scenes), and
    ``source_id`` is an opaque reference to the owning image or object.
    """

    row: int
    col: int
    gt_vertex: int
    source_id: object = None


def vertex_posterior(
    embeddings: EmbeddingMatrix,
    pixel_embedding: np.ndarray,
    score: str = "sqdist",
) -> np.ndarray:
    """Posterior distribution over mesh vertices for one pixel embedding.

    Args:
        embeddings: the V x D vertex table.
        pixel_embedding: a D-vector.
        score: "sqdist" (default) scores a vertex by the negative squared
            Euclidean distance between its row and the pixel embedding;
            "dot" uses the inner product instead.

    Returns:
        A length-V probability vector (non-negative, sums to 1).
    """
    q = np.asarray(pixel_embedding, dtype=np.float64).reshape(-1)
    if q.shape[0] != embeddings.dim:
        raise ValueError(
            f"pixel embedding has dim {q.shape[0]}, table expects {embeddings.dim}"
        )
    if not np.all(np.isfinite(q)):
        raise ValueError("pixel embedding contains non-finite values")
    if score == "sqdist":
        diff = embeddings.values - q[None, :]
        scores = -np.einsum("vd,vd->v", diff, diff)
    elif score == "dot":
        scores = embeddings.values @ q
    else:
        raise ValueError(f"unknown score kind {score!r}")
    scores = scores - scores.max()
    exp = np.exp(scores)
    return exp / exp.sum()


def cse_loss(
    embeddings: EmbeddingMatrix,
    field: PixelEmbeddingField | np.ndarray,
    samples: list[CorrespondenceSample],
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative mean log-likelihood of correspondences, with analytic grads.

    Args:
        embeddings: V x D vertex table.
        field: D x P x P pixel-embedding grid; ``samples`` index into its
            spatial dimensions.
        samples: non-empty list of supervised pixel/vertex pairs.

    Returns:
        (loss, grad_table, grad_field): the scalar loss, its gradient with
        respect to every table entry (V x D), and with respect to every
        field entry (D x P x P).
    """
    grid = field.values if isinstance(field, PixelEmbeddingField) else np.asarray(field)
    grid = grid.astype(np.float64)
    if grid.ndim != 3 or grid.shape[0] != embeddings.dim:
        raise ValueError(
            f"field shape {grid.shape} incompatible with embedding dim {embeddings.dim}"
        )
    if not samples:
        raise ValueError("samples must be non-empty")
    v = embeddings.vertex_count
    _, p_rows, p_cols = grid.shape

    table = embeddings.values
    loss = 0.0
    grad_table = np.zeros_like(table)
    grad_field = np.zeros_like(grid)
    inv_n = 1.0 / len(samples)

    for s in samples:
        if not 0 <= s.gt_vertex < v:
            raise ValueError(f"gt_vertex {s.gt_vertex} outside [0, {v})")
        if not (0 <= s.row < p_rows and 0 <= s.col < p_cols):
            raise ValueError(f"pixel ({s.row}, {s.col}) outside the field grid")
        q = grid[:, s.row, s.col]
        diff = table - q[None, :]  # (V, D)
        scores = -np.einsum("vd,vd->v", diff, diff)
        m = scores.max()
        log_norm = m + np.log(np.exp(scores - m).sum())
        loss += -(scores[s.gt_vertex] - log_norm) * inv_n

        post = np.exp(scores - log_norm)
        coef = post.copy()
        coef[s.gt_vertex] -= 1.0  # d loss / d score_X
        # score_X = -||e_X - q||^2: d/d e_X = -2 diff_X, d/d q = +2 diff_X
        grad_table += (-2.0 * inv_n) * coef[:, None] * diff
        grad_field[:, s.row, s.col] += (2.0 * inv_n) * (coef[:, None] * diff).sum(axis=0)

    return float(loss), grad_table, grad_field


def geodesic_distances(mesh: Mesh, source: int) -> np.ndarray:
    """Single-source shortest-path distances along edge lengths (Dijkstra)."""
    v = mesh.vertex_count
    if not 0 <= source < v:
        raise ValueError(f"source {source} outside [0, {v})")
    dist = np.full(v, np.inf)
    dist[source] = 0.0
    done = np.zeros(v, dtype=bool)
    heap: list[tuple[float, int]] = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for nbr, length in mesh._adjacency[u]:
            nd = d + length
            if nd < dist[nbr]:
                dist[nbr] = nd
                heapq.heappush(heap, (nd, nbr))
    return dist


def expected_geodesic_error(
    posterior: np.ndarray,
    gt_vertex: int,
    mesh: Mesh,
) -> float:
    """Posterior-weighted mean geodesic distance to the true vertex.

    ``posterior`` must be a valid distribution over the mesh vertices (sum
    within 1e-6 of 1); the result is always >= 0 and is 0 exactly when all
    mass sits on ``gt_vertex``.
    """
    p = np.asarray(posterior, dtype=np.float64).reshape(-1)
    if p.shape[0] != mesh.vertex_count:
        raise ValueError(
            f"posterior length {p.shape[0]} != vertex count {mesh.vertex_count}"
        )
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("posterior is not a normalized distribution")
    if not 0 <= gt_vertex < mesh.vertex_count:
        raise ValueError(f"gt_vertex {gt_vertex} outside [0, {mesh.vertex_count})")
    return float(p @ geodesic_distances(mesh, gt_vertex))


def unit_circle_mesh(vertex_count: int) -> Mesh:
    """Closed polygon approximating the unit circle.

    Vertex k sits at angle ``2*pi*k / V``; consecutive vertices are joined by
    edges of the exact chord length, closing the loop.
    """
    if vertex_count < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {vertex_count}")
    angles = 2.0 * np.pi * np.arange(vertex_count) / vertex_count
    positions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    chord = 2.0 * math.sin(math.pi / vertex_count)
    edges = [(k, (k + 1) % vertex_count, chord) for k in range(vertex_count)]
    return Mesh(positions=positions, edges=edges)


def format_mesh(mesh: Mesh) -> str:
    """Serialize a mesh to the text format described in the module docstring."""
    lines = [f"mesh {mesh.vertex_count} {len(mesh.edges)}"]
    for row in mesh.positions:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    for i, j, length in mesh.edges:
        lines.append(f"{i} {j} {length:.17g}")
    return "\n".join(lines) + "\n"


def parse_mesh(text: str) -> Mesh:
    """Parse the mesh text format; rejects malformed headers and counts."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty mesh file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "mesh":
        raise ValueError(f"bad mesh header: {lines[0]!r}")
    try:
        v, e = int(header[1]), int(header[2])
    except ValueError as exc:
        raise ValueError(f"bad mesh header counts: {lines[0]!r}") from exc
    if len(lines) != 1 + v + e:
        raise ValueError(
            f"mesh file has {len(lines) - 1} body lines, header promises {v + e}"
        )
    positions = []
    for ln in lines[1 : 1 + v]:
        parts = ln.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"bad vertex line: {ln!r}")
        positions.append([float(x) for x in parts])
    if any(len(row) != len(positions[0]) for row in positions):
        raise ValueError("vertex lines mix 2-D and 3-D coordinates")
    edges = []
    for ln in lines[1 + v :]:
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"bad edge line: {ln!r}")
        edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return Mesh(positions=np.asarray(positions), edges=edges)


def load_mesh(path) -> Mesh:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_mesh(fh.read())


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_mesh(mesh))
