"""Triangle meshes, sparse matrices and the attention mask derived from topology.

Sparse matrix files use a plain-text coordinate format::

    rows cols nnz
    row col value      # nnz lines, 0-based indices, one entry per line

Values are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, DimensionError
from .numeric import Tensor, as_tensor, record_op

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertex_count: int
    faces: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "faces", faces)
        if self.vertex_count < 1:
            raise DataError("mesh needs at least one vertex")
        if faces.size and (faces.min() < 0 or faces.max() >= self.vertex_count):
            bad = int(np.argwhere((faces < 0) | (faces >= self.vertex_count))[0, 0])
            raise DataError(f"face {bad} has an index outside [0, {self.vertex_count})")
        degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if degenerate.any():
            raise DataError(f"face {int(np.argmax(degenerate))} repeats a vertex index")
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=np.float64)
            if pos.shape != (self.vertex_count, 3):
                raise DataError(f"positions {pos.shape} do not match {self.vertex_count} vertices")
            object.__setattr__(self, "positions", pos)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` pairs with ``i < j``."""
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Coordinate-format matrix; entries are kept sorted by (row, col)."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        r = np.asarray(self.row_idx, dtype=np.int64).ravel()
        c = np.asarray(self.col_idx, dtype=np.int64).ravel()
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not (len(r) == len(c) == len(v)):
            raise DataError("row, col and value arrays differ in length")
        if len(r) and (r.min() < 0 or r.max() >= self.rows or c.min() < 0 or c.max() >= self.cols):
            raise DataError(f"entry coordinates outside a {self.rows}x{self.cols} matrix")
        if not np.isfinite(v).all():
            raise DataError("sparse matrix has non-finite values")
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        dup = (np.diff(r) == 0) & (np.diff(c) == 0)
        if dup.any():
            i = int(np.argmax(dup))
            raise DataError(f"duplicate coordinate ({r[i]}, {c[i]})")
        object.__setattr__(self, "row_idx", r)
        object.__setattr__(self, "col_idx", c)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_csr", sp.csr_matrix((v, (r, c)), shape=(self.rows, self.cols)))

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.coo_matrix(m)
        m.sum_duplicates()
        keep = m.data != 0
        return cls(m.shape[0], m.shape[1], m.row[keep], m.col[keep], m.data[keep])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_idx, self.col_idx] = self.values
        return out

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_idx, weights=self.values, minlength=self.rows)

    def is_symmetric(self) -> bool:
        return self.rows == self.cols and (self._csr != self._csr.T).nnz == 0

    def compose(self, other: "SparseMatrix") -> "SparseMatrix":
        """Sparse-sparse product ``self @ other``."""
        if self.cols != other.rows:
            raise DimensionError(f"compose: {self.shape} @ {other.shape}")
        return SparseMatrix.from_scipy(self._csr @ other._csr)

    def check_row_stochastic(self, tol: float = ROW_SUM_TOL) -> None:
        sums = self.row_sums()
        bad = np.abs(sums - 1.0) > tol
        if bad.any():
            row = int(np.argmax(bad))
            raise DataError(f"row {row} sums to {sums[row]!r}, expected 1")


def sparse_dense_matmul(s: SparseMatrix, x) -> Tensor:
    """``S @ X`` for ``X`` shaped ``(cols, d)`` or batched ``(B, cols, d)``."""
    x = as_tensor(x)
    if x.ndim not in (2, 3) or x.shape[-2] != s.cols:
        raise DimensionError(f"sparse_dense_matmul: {s.shape} @ {x.shape}")
    csr = s.to_scipy()

    def apply(mat, arr):
        if arr.ndim == 2:
            return np.asarray(mat @ arr)
        b, n, d = arr.shape
        flat = np.ascontiguousarray(arr.transpose(1, 0, 2)).reshape(n, b * d)
        return np.asarray(mat @ flat).reshape(-1, b, d).transpose(1, 0, 2)

    csr_t = csr.T.tocsr()
    return record_op(apply(csr, x.data), (x,), lambda g: (apply(csr_t, g),))


# -- topology-derived matrices ------------------------------------------------

def build_adjacency(mesh: TriangleMesh) -> SparseMatrix:
    """Symmetric 0/1 matrix with (i, j) set when i != j share a face."""
    e = mesh.edges()
    r = np.concatenate([e[:, 0], e[:, 1]])
    c = np.concatenate([e[:, 1], e[:, 0]])
    return SparseMatrix(mesh.vertex_count, mesh.vertex_count, r, c, np.ones(len(r)))


def subdivide(mesh: TriangleMesh) -> tuple[TriangleMesh, SparseMatrix]:
    """One level of midpoint subdivision plus the matching upsampling matrix.

    Fine vertices are the original ones followed by one midpoint per edge
    (in :meth:`TriangleMesh.edges` order); every face splits into four.
    """
    n = mesh.vertex_count
    edges = mesh.edges()
    mid_of = {(int(a), int(b)): n + k for k, (a, b) in enumerate(edges)}

    def mid(a, b):
        return mid_of[(a, b) if a < b else (b, a)]

    faces = []
    for a, b, c in mesh.faces.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]

    e = len(edges)
    rows = np.concatenate([np.arange(n), np.repeat(np.arange(n, n + e), 2)])
    cols = np.concatenate([np.arange(n), edges.ravel()])
    vals = np.concatenate([np.ones(n), np.full(2 * e, 0.5)])
    up = SparseMatrix(n + e, n, rows, cols, vals)

    positions = None
    if mesh.positions is not None:
        positions = np.asarray(up.to_scipy() @ mesh.positions)
    return TriangleMesh(n + e, np.array(faces), positions), up


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Allowed token pairs for decoder self-attention over ``K`` joints then ``N`` vertices."""

    allowed: np.ndarray
    num_joints: int
    disabled_heads: tuple[int, ...] = ()

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"attention mask must be square, got {a.shape}")
        k = self.num_joints
        if not np.diag(a).all():
            raise DataError("attention mask must allow every token to attend to itself")
        if not (a[:k].all() and a[:, :k].all()):
            raise DataError("joint rows and columns of the attention mask must be fully allowed")
        vv = a[k:, k:]
        if not np.array_equal(vv, vv.T):
            raise DataError("vertex block of the attention mask is not symmetric")
        object.__setattr__(self, "allowed", a)
        object.__setattr__(self, "disabled_heads", tuple(int(h) for h in self.disabled_heads))

    @property
    def size(self) -> int:
        return self.allowed.shape[0]

    def for_heads(self, num_heads: int) -> np.ndarray:
        """``(L, L)`` when every head is masked, else ``(num_heads, L, L)``."""
        if not self.disabled_heads:
            return self.allowed
        if max(self.disabled_heads) >= num_heads:
            raise ConfigError(f"mask disables head {max(self.disabled_heads)} of {num_heads}")
        per_head = np.repeat(self.allowed[None], num_heads, axis=0)
        per_head[list(self.disabled_heads)] = True
        return per_head

    def masked_pair_count(self) -> int:
        return int((~self.allowed).sum())


def build_attention_mask(adjacency: SparseMatrix, num_joints: int, half_heads: bool = False,
                         num_heads: int = 8) -> AttentionMask:
    if adjacency.rows != adjacency.cols:
        raise DataError(f"adjacency must be square, got {adjacency.shape}")
    if not adjacency.is_symmetric():
        raise DataError("adjacency matrix is not symmetric")
    k, n = num_joints, adjacency.rows
    allowed = np.ones((k + n, k + n), dtype=bool)
    vv = adjacency.to_dense() != 0
    np.fill_diagonal(vv, True)
    allowed[k:, k:] = vv
    disabled: tuple[int, ...] = ()
    if half_heads:
        if num_heads < 2 or num_heads % 2:
            raise ConfigError(f"half-head masking needs an even head count, got {num_heads}")
        disabled = tuple(range(num_heads // 2, num_heads))
    return AttentionMask(allowed, k, disabled)


def farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point sampling starting from index 0."""
    if not 1 <= count <= len(points):
        raise ConfigError(f"cannot pick {count} of {len(points)} points")
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def joint_regressor_from_upsampling(coarse: TriangleMesh, up: SparseMatrix, num_joints: int) -> SparseMatrix:
    """A ``K x M`` regressor: each joint averages the fine vertices touching one coarse anchor.

    Anchors are chosen by farthest-point sampling on the coarse rest pose.
    """
    if coarse.positions is None:
        raise DataError("joint regressor construction needs rest positions")
    anchors = farthest_point_indices(coarse.positions, num_joints)
    csc = up.to_scipy().tocsc()
    rows, cols, vals = [], [], []
    for j, a in enumerate(anchors):
        members = csc.indices[csc.indptr[a]:csc.indptr[a + 1]]
        members = np.sort(members)
        rows += [j] * len(members)
        cols += members.tolist()
        vals += [1.0 / len(members)] * len(members)
    return SparseMatrix(num_joints, up.rows, rows, cols, vals)


@dataclass(frozen=True, eq=False)
class Topology:
    """Everything the model needs about the mesh: adjacency, U and R."""

    adjacency: SparseMatrix
    upsample: SparseMatrix
    regressor: SparseMatrix
    coarse: TriangleMesh | None = None
    fine: TriangleMesh | None = None

    def __post_init__(self):
        n = self.adjacency.rows
        if self.upsample.cols != n:
            raise DataError(f"U has {self.upsample.cols} columns but the mesh has {n} vertices")
        if self.regressor.cols != self.upsample.rows:
            raise DataError(f"R has {self.regressor.cols} columns but U has {self.upsample.rows} rows")

    @property
    def num_joints(self) -> int:
        return self.regressor.rows

    @property
    def num_vertices(self) -> int:
        return self.adjacency.rows

    @property
    def num_fine_vertices(self) -> int:
        return self.upsample.rows

    @classmethod
    def from_mesh(cls, coarse: TriangleMesh, num_joints: int) -> "Topology":
        """Subdivide once for U and derive R from farthest-point anchors."""
        fine, up = subdivide(coarse)
        reg = joint_regressor_from_upsampling(coarse, up, num_joints)
        return cls(build_adjacency(coarse), up, reg, coarse, fine)


# -- reference meshes ---------------------------------------------------------

def triangle() -> TriangleMesh:
    return TriangleMesh(3, [[0, 1, 2]], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def two_triangles() -> TriangleMesh:
    """Two triangles sharing edge (0, 1); vertices 2 and 3 are not adjacent."""
    return TriangleMesh(4, [[0, 1, 2], [1, 0, 3]],
                        [[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, -1, 0]])


def tetrahedron(radius: float = 10.0) -> TriangleMesh:
    corners = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    return TriangleMesh(4, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
                        corners * (radius / np.sqrt(3.0)))


def tetra_topology(num_joints: int = 4, radius: float = 10.0) -> Topology:
    """Small reference setup: N=10 coarse (tetrahedron subdivided once), M=34 fine."""
    coarse, _ = subdivide(tetrahedron(radius))
    return Topology.from_mesh(coarse, num_joints)


def random_topology(num_joints: int, num_vertices: int, num_fine: int, seed: int = 0) -> Topology:
    """Synthetic topology at arbitrary scale (for budgeting and benchmarks).

    The coarse mesh is a triangle strip; U rows carry 1-3 random barycentric
    weights and each joint averages 8 random fine vertices.
    """
    if num_vertices < 3:
        raise ConfigError("need at least 3 vertices")
    rng = np.random.default_rng(seed)
    i = np.arange(num_vertices - 2)
    strip = TriangleMesh(num_vertices, np.stack([i, i + 1, i + 2], axis=1))
    rows, cols, vals = [], [], []
    for r in range(num_fine):
        k = int(rng.integers(1, 4))
        c = np.sort(rng.choice(num_vertices, size=k, replace=False))
        w = rng.random(k) + 0.1
        w /= w.sum()
        rows += [r] * k
        cols += c.tolist()
        vals += w.tolist()
    up = SparseMatrix(num_fine, num_vertices, rows, cols, vals)
    rows, cols = [], []
    per_joint = min(8, num_fine)
    for j in range(num_joints):
        c = np.sort(rng.choice(num_fine, size=per_joint, replace=False))
        rows += [j] * per_joint
        cols += c.tolist()
    reg = SparseMatrix(num_joints, num_fine, rows, cols, np.full(len(rows), 1.0 / per_joint))
    return Topology(build_adjacency(strip), up, reg, strip, None)


# -- file formats ---------------------------------------------------------------

def save_matrix(path, s: SparseMatrix) -> None:
    lines = [f"{s.rows} {s.cols} {s.nnz}"]
    lines += [f"{r} {c} {v!r}" for r, c, v in zip(s.row_idx.tolist(), s.col_idx.tolist(), s.values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_matrix(path, expected_shape: Sequence[int] | None = None, row_stochastic: bool = False) -> SparseMatrix:
    """Read a coordinate-format file; ``row_stochastic`` enforces the U row-sum invariant."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read matrix file {path}: {exc}") from None
    body = [ln for ln in lines if ln.strip()]
    if not body:
        raise DataError(f"{path}: empty matrix file")
    try:
        rows, cols, nnz = (int(t) for t in body[0].split())
    except ValueError:
        raise DataError(f"{path}: header must be 'rows cols nnz', got {body[0]!r}") from None
    if len(body) - 1 != nnz:
        raise DataError(f"{path}: header promises {nnz} entries, found {len(body) - 1}")
    r = np.empty(nnz, dtype=np.int64)
    c = np.empty(nnz, dtype=np.int64)
    v = np.empty(nnz)
    for k, ln in enumerate(body[1:]):
        parts = ln.split()
        try:
            if len(parts) != 3:
                raise ValueError
            r[k], c[k], v[k] = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise DataError(f"{path}: malformed entry on line {k + 2}: {ln!r}") from None
    m = SparseMatrix(rows, cols, r, c, v)
    if expected_shape is not None and tuple(expected_shape) != m.shape:
        raise DataError(f"{path}: expected shape {tuple(expected_shape)}, got {m.shape}")
    if row_stochastic:
        m.check_row_stochastic()
    return m


def read_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records (1-based, triangles only)."""
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "f" and len(parts) != 4:
            raise DataError(f"{path}:{lineno}: only triangular faces are supported")
        try:
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse {raw!r}") from None
    if not verts:
        raise DataError(f"{path}: no vertices")
    return TriangleMesh(len(verts), np.array(faces, dtype=np.int64).reshape(-1, 3), np.array(verts))


def write_obj(path, mesh: TriangleMesh) -> None:
    if mesh.positions is None:
        raise DataError("OBJ output needs vertex positions")
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.positions.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    """ASCII PLY 1.0 with float vertices and optional triangle faces."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property double x", "property double y", "property double z",
             f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
