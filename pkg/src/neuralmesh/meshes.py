"""Triangle meshes and the geometry utilities the reconstruction needs.

Covers icosphere construction, Loop subdivision (with attribute stencils),
area-weighted vertex normals, uniform-Laplacian differential coordinates,
adjacent-face pairs, area-uniform surface sampling, chamfer distance, and
PLY/OBJ file IO.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import diagnostics

FEATURE_DIM = 64


class MeshError(ValueError):
    """Invalid topology or malformed mesh file."""


@dataclass
class TriangleMesh:
    """Vertices, CCW outward faces, and optional per-vertex attributes."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    diffuse: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshError(
                f"face index {int(self.faces.max())} out of range for "
                f"{len(self.vertices)} vertices"
            )
        if self.faces.size and self.faces.min() < 0:
            raise MeshError("negative face index")
        for name in ("normals", "features", "diffuse"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                if len(arr) != len(self.vertices):
                    raise MeshError(
                        f"{name} has {len(arr)} rows for {len(self.vertices)} vertices"
                    )
                setattr(self, name, arr)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.normals is None else self.normals.copy(),
            None if self.features is None else self.features.copy(),
            None if self.diffuse is None else self.diffuse.copy(),
        )


@dataclass
class EdgeTopology:
    """Unique edges, their adjacent faces, face pairs, and one-rings."""

    edges: np.ndarray            # (E, 2) vertex ids, lo < hi
    edge_faces: np.ndarray       # (E, 2) face ids, -1 when boundary
    face_pairs: np.ndarray       # (P, 2) adjacent face ids (interior edges)
    neighbors: np.ndarray        # flat one-ring neighbor vertex ids
    neighbor_offsets: np.ndarray # (V+1,) CSR offsets into neighbors
    degrees: np.ndarray          # (V,)
    is_closed: bool = field(default=False)

    def one_ring(self, v: int) -> np.ndarray:
        return self.neighbors[self.neighbor_offsets[v]:self.neighbor_offsets[v + 1]]


def build_topology(mesh: TriangleMesh) -> EdgeTopology:
    """Derive edge/one-ring structure; rejects non-manifold edges."""
    faces = mesh.faces
    nv = mesh.num_vertices
    raw = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces), dtype=np.int64), 3)
    lo = raw.min(axis=1)
    hi = raw.max(axis=1)
    key = lo.astype(np.int64) * nv + hi
    order = np.argsort(key, kind="stable")
    key_s, fid_s = key[order], fid[order]
    uniq, start, counts = np.unique(key_s, return_index=True, return_counts=True)
    if counts.max(initial=0) > 2:
        bad = uniq[np.argmax(counts)]
        raise MeshError(f"non-manifold edge ({bad // nv}, {bad % nv}) shared by {counts.max()} faces")
    edges = np.stack([uniq // nv, uniq % nv], axis=1).astype(np.int32)
    edge_faces = np.full((len(uniq), 2), -1, dtype=np.int64)
    edge_faces[:, 0] = fid_s[start]
    two = counts == 2
    edge_faces[two, 1] = fid_s[start[two] + 1]
    face_pairs = edge_faces[two].astype(np.int32)

    # one-rings from the undirected edge list
    src = np.concatenate([edges[:, 0], edges[:, 1]]).astype(np.int64)
    dst = np.concatenate([edges[:, 1], edges[:, 0]]).astype(np.int64)
    order = np.argsort(src, kind="stable")
    src, dst = src[order], dst[order]
    degrees = np.bincount(src, minlength=nv)
    offsets = np.zeros(nv + 1, dtype=np.int64)
    np.cumsum(degrees, out=offsets[1:])
    return EdgeTopology(
        edges=edges,
        edge_faces=edge_faces,
        face_pairs=face_pairs,
        neighbors=dst.astype(np.int32),
        neighbor_offsets=offsets,
        degrees=degrees.astype(np.int64),
        is_closed=bool(two.all()) and len(uniq) > 0,
    )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

MAX_ICOSPHERE_LEVEL = 8


def make_icosphere(level: int) -> TriangleMesh:
    """Icosahedron subdivided ``level`` times, vertices on the unit sphere."""
    if level < 0:
        raise MeshError("subdivision level must be >= 0")
    if level > MAX_ICOSPHERE_LEVEL:
        raise MeshError(f"icosphere level {level} exceeds cap {MAX_ICOSPHERE_LEVEL}")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int32,
    )
    for _ in range(level):
        verts, faces = _midpoint_split(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriangleMesh(verts, faces)


def _midpoint_split(verts: np.ndarray, faces: np.ndarray):
    """Split each face into four via edge midpoints (no smoothing)."""
    nv = len(verts)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    lo, hi = pairs.min(axis=1), pairs.max(axis=1)
    key = lo.astype(np.int64) * nv + hi
    uniq, inverse = np.unique(key, return_inverse=True)
    mids = 0.5 * (verts[uniq // nv] + verts[uniq % nv])
    mid_ids = (nv + np.arange(len(uniq))).astype(np.int64)
    e01, e12, e20 = np.split(mid_ids[inverse], 3)
    v0, v1, v2 = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([v0, e01, e20], axis=1),
            np.stack([v1, e12, e01], axis=1),
            np.stack([v2, e20, e12], axis=1),
            np.stack([e01, e12, e20], axis=1),
        ]
    ).astype(np.int32)
    return np.concatenate([verts, mids]), new_faces


def loop_subdivide(mesh: TriangleMesh, topology: Optional[EdgeTopology] = None) -> TriangleMesh:
    """One round of Loop subdivision; attributes follow the same stencils."""
    topo = topology or build_topology(mesh)
    if not topo.is_closed:
        raise MeshError("loop subdivision requires a closed manifold mesh")
    verts, faces = mesh.vertices, mesh.faces
    nv, ne = len(verts), len(topo.edges)

    attrs = [verts]
    for arr in (mesh.features, mesh.diffuse):
        if arr is not None:
            attrs.append(arr)
    stacked = np.concatenate(attrs, axis=1)

    # odd (edge) points: 3/8 each endpoint + 1/8 each opposite vertex
    e = topo.edges.astype(np.int64)
    f0 = mesh.faces[topo.edge_faces[:, 0]]
    f1 = mesh.faces[topo.edge_faces[:, 1]]

    def opposite(tri):
        opp = tri.sum(axis=1) - e[:, 0] - e[:, 1]
        return opp

    o0, o1 = opposite(f0.astype(np.int64)), opposite(f1.astype(np.int64))
    odd = (
        0.375 * (stacked[e[:, 0]] + stacked[e[:, 1]])
        + 0.125 * (stacked[o0] + stacked[o1])
    )

    # even points: (1 - k*beta) v + beta * sum(one ring)
    k = topo.degrees.astype(np.float64)
    beta = (0.625 - (0.375 + 0.25 * np.cos(2.0 * np.pi / k)) ** 2) / k
    ring_sum = np.zeros_like(stacked)
    np.add.at(ring_sum, _neighbor_src(topo), stacked[topo.neighbors])
    even = (1.0 - k * beta)[:, None] * stacked + beta[:, None] * ring_sum

    new_stacked = np.concatenate([even, odd])

    # face split using edge ids
    key = e[:, 0] * nv + e[:, 1]
    lookup = {int(kv): i for i, kv in enumerate(key)}

    def eid(a, b):
        lo = np.minimum(a, b).astype(np.int64)
        hi = np.maximum(a, b).astype(np.int64)
        return np.array([lookup[int(x)] for x in lo * nv + hi], dtype=np.int64) + nv

    v0, v1, v2 = faces[:, 0].astype(np.int64), faces[:, 1].astype(np.int64), faces[:, 2].astype(np.int64)
    e01, e12, e20 = eid(v0, v1), eid(v1, v2), eid(v2, v0)
    new_faces = np.concatenate(
        [
            np.stack([v0, e01, e20], axis=1),
            np.stack([v1, e12, e01], axis=1),
            np.stack([v2, e20, e12], axis=1),
            np.stack([e01, e12, e20], axis=1),
        ]
    ).astype(np.int32)

    cols = np.cumsum([3] + [a.shape[1] for a in attrs[1:]])
    pieces = np.split(new_stacked, cols[:-1], axis=1) if len(attrs) > 1 else [new_stacked]
    out = TriangleMesh(pieces[0], new_faces)
    i = 1
    if mesh.features is not None:
        out.features = pieces[i]
        i += 1
    if mesh.diffuse is not None:
        out.diffuse = np.clip(pieces[i], 0.0, 1.0)
    assert out.num_vertices == nv + ne and out.num_faces == 4 * len(faces)
    return out


def _neighbor_src(topo: EdgeTopology) -> np.ndarray:
    return np.repeat(
        np.arange(len(topo.degrees), dtype=np.int64),
        np.diff(topo.neighbor_offsets),
    )


# ---------------------------------------------------------------------------
# differential quantities
# ---------------------------------------------------------------------------


def face_normals(mesh: TriangleMesh, normalized: bool = True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalized:
        length = np.linalg.norm(n, axis=1, keepdims=True)
        bad = length[:, 0] < 1e-14
        if bad.any():
            diagnostics.count("degenerate_faces", int(bad.sum()))
        n = np.where(bad[:, None], 0.0, n / np.maximum(length, 1e-14))
    return n


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    fn = face_normals(mesh, normalized=False)  # magnitude = 2 * area
    acc = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], fn)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    degenerate = length[:, 0] < 1e-14
    if degenerate.any():
        diagnostics.count("degenerate_vertex_normals", int(degenerate.sum()))
    return np.where(degenerate[:, None], 0.0, acc / np.maximum(length, 1e-14))


def laplacian_deltas(mesh: TriangleMesh, topology: Optional[EdgeTopology] = None) -> np.ndarray:
    """Differential coordinates: vertex minus mean of its one-ring."""
    topo = topology or build_topology(mesh)
    if (topo.degrees == 0).any():
        raise MeshError("isolated vertex has no one-ring")
    ring_sum = np.zeros_like(mesh.vertices)
    np.add.at(ring_sum, _neighbor_src(topo), mesh.vertices[topo.neighbors])
    return mesh.vertices - ring_sum / topo.degrees[:, None]


def adjacent_face_pairs(mesh: TriangleMesh, topology: Optional[EdgeTopology] = None) -> np.ndarray:
    """Face-id pairs sharing an interior edge."""
    topo = topology or build_topology(mesh)
    return topo.face_pairs


# ---------------------------------------------------------------------------
# sampling and metrics
# ---------------------------------------------------------------------------


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalized=False), axis=1)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """n points uniform by area; deterministic per seed."""
    if n < 1:
        raise MeshError("need at least one sample")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise MeshError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    fidx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    u = 1.0 - r1
    v = r1 * (1.0 - r2)
    w = 1.0 - u - v
    tri = mesh.vertices[mesh.faces[fidx]]
    return u[:, None] * tri[:, 0] + v[:, None] * tri[:, 1] + w[:, None] * tri[:, 2]


def chamfer_distance(a: TriangleMesh, b: TriangleMesh, n: int = 20000, seed: int = 0) -> float:
    """Mean of the two one-sided nearest-neighbor means over area-uniform samples.

    Both meshes are sampled with the same seed, so the value is exactly
    symmetric in its arguments.
    """
    pa = sample_surface(a, n, seed)
    pb = sample_surface(b, n, seed)
    d_ab, _ = cKDTree(pb).query(pa, workers=-1)
    d_ba, _ = cKDTree(pa).query(pb, workers=-1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with positions, normals, 8-bit colors, faces."""
    path = str(path)
    if not path.lower().endswith(".ply"):
        raise MeshError(f"unsupported output format for {path!r} (use .ply)")
    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    if mesh.diffuse is not None:
        colors = np.clip(np.rint(mesh.diffuse * 255.0), 0, 255).astype(np.uint8)
    else:
        colors = np.full((mesh.num_vertices, 3), 200, dtype=np.uint8)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.num_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {mesh.num_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vdtype = np.dtype(
        [("xyz", "<f4", (3,)), ("n", "<f4", (3,)), ("rgb", "u1", (3,))]
    )
    vdata = np.empty(mesh.num_vertices, dtype=vdtype)
    vdata["xyz"] = mesh.vertices.astype(np.float32)
    vdata["n"] = normals.astype(np.float32)
    vdata["rgb"] = colors
    fdtype = np.dtype([("cnt", "u1"), ("idx", "<i4", (3,))])
    fdata = np.empty(mesh.num_faces, dtype=fdtype)
    fdata["cnt"] = 3
    fdata["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vdata.tobytes())
        fh.write(fdata.tobytes())


def load_mesh(path) -> TriangleMesh:
    path = str(path)
    lower = path.lower()
    if lower.endswith(".obj"):
        return _load_obj(path)
    if lower.endswith(".ply"):
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format for {path!r}")


def _load_obj(path: str) -> TriangleMesh:
    verts: list = []
    faces: list = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {token!r}") from None
                    if i < 0:
                        i = len(verts) + 1 + i
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):  # fan triangulation
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise MeshError(f"{path}: no vertices found")
    varr = np.asarray(verts, dtype=np.float64)
    farr = np.asarray(faces, dtype=np.int64) if faces else np.zeros((0, 3), dtype=np.int64)
    if farr.size:
        bad_rows = (farr < 0).any(axis=1) | (farr >= len(varr)).any(axis=1)
        if bad_rows.any():
            bad = int(np.argmax(bad_rows))
            raise MeshError(f"{path}: face {bad} references vertex outside 1..{len(varr)}")
    return TriangleMesh(varr, farr)


_PLY_SCALARS = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "char": ("i1", 1), "int8": ("i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def _load_ply(path: str) -> TriangleMesh:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file (missing header)")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]
    fmt = next((l.split()[1] for l in header if l.startswith("format")), None)
    if fmt != "binary_little_endian":
        raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
    elements: list = []  # (name, count, [(prop_name, dtype, size) or list-prop])
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError(f"{path}: line {lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                if parts[1] not in _PLY_SCALARS:
                    raise MeshError(f"{path}: line {lineno}: unsupported type {parts[1]!r}")
                elements[-1][2].append(("scalar", parts[1], parts[2]))

    verts = normals = colors = None
    faces = None
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            fields = []
            for p in props:
                if p[0] != "scalar":
                    raise MeshError(f"{path}: list property on vertices unsupported")
                dt, _ = _PLY_SCALARS[p[1]]
                fields.append((p[2], dt))
            dtype = np.dtype(fields)
            nbytes = dtype.itemsize * count
            if offset + nbytes > len(body):
                raise MeshError(
                    f"{path}: truncated vertex data at byte {end + 11 + offset}"
                )
            rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            offset += nbytes
            names = dtype.names
            if not all(c in names for c in "xyz"):
                raise MeshError(f"{path}: vertex element lacks x/y/z")
            verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            if all(n in names for n in ("nx", "ny", "nz")):
                normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
            if all(c in names for c in ("red", "green", "blue")):
                colors = (
                    np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64)
                    / 255.0
                )
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshError(f"{path}: face element must be a single list property")
            cnt_dt, _ = _PLY_SCALARS[props[0][1]]
            idx_dt, idx_sz = _PLY_SCALARS[props[0][2]]
            cnt_sz = _PLY_SCALARS[props[0][1]][1]
            out = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                if offset + cnt_sz > len(body):
                    raise MeshError(f"{path}: truncated face data at byte {end + 11 + offset}")
                k = int(np.frombuffer(body, dtype=cnt_dt, count=1, offset=offset)[0])
                offset += cnt_sz
                if k != 3:
                    raise MeshError(f"{path}: face {i} has {k} vertices (triangles only)")
                if offset + 3 * idx_sz > len(body):
                    raise MeshError(f"{path}: truncated face data at byte {end + 11 + offset}")
                out[i] = np.frombuffer(body, dtype=idx_dt, count=3, offset=offset)
                offset += 3 * idx_sz
            faces = out
        else:
            raise MeshError(f"{path}: unsupported element {name!r}")
    if verts is None or faces is None:
        raise MeshError(f"{path}: missing vertex or face element")
    if faces.size and faces.max() >= len(verts):
        bad = int(np.argmax(faces.max(axis=1) >= len(verts)))
        raise MeshError(
            f"{path}: face {bad} references vertex {int(faces[bad].max())} "
            f"but only {len(verts)} vertices exist"
        )
    return TriangleMesh(verts, faces, normals=normals, diffuse=colors)
