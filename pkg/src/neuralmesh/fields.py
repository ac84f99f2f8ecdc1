"""The trainable fields: deformation/geometry network, specular shader,
normal predictor, plus checkpoint serialization.

The geometry network maps a point (with its hash encoding) to a deformation
offset, a geometric feature vector, and a baked diffuse color.  The shader
predicts the view-dependent specular residual per pixel.  The normal
predictor regularizes the learned features by reproducing rasterized normals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encodings import SH_DIM, HashGrid
from .meshes import TriangleMesh

HIDDEN_GEOMETRY = 256
HIDDEN_SHADER = 64
HIDDEN_NORMALNET = 256
FEATURE_DIM = 64


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint data."""


@dataclass(frozen=True)
class PipelineFlags:
    """Which pipeline pieces are wired in (ablation settings a..e)."""

    use_geometry_mlp: bool = True
    use_features: bool = True
    use_baking: bool = True
    use_feature_reg: bool = True

    def __post_init__(self):
        if self.use_features and not self.use_geometry_mlp:
            raise ValueError("geometric features require the geometry network")

    @classmethod
    def from_setting(cls, setting: str) -> "PipelineFlags":
        table = {
            "a": cls(False, False, False, False),
            "b": cls(True, False, True, False),
            "c": cls(True, True, True, False),
            "d": cls(True, True, True, True),
            "e": cls(True, True, False, True),
        }
        if setting not in table:
            raise ValueError(f"unknown ablation setting {setting!r} (use a..e)")
        return table[setting]

    @property
    def has_diffuse_branch(self) -> bool:
        # without baking, a separate branch network predicts the diffuse term
        return self.use_geometry_mlp and not self.use_baking

    def shader_input_dim(self, grid_dim: int, feature_dim: int = FEATURE_DIM) -> int:
        if not self.use_geometry_mlp:
            return grid_dim + 3 + SH_DIM  # encoded position, normal, view SH
        dim = 3 + 3 + SH_DIM + 3  # position, normal, view SH, diffuse
        if self.use_features:
            dim += feature_dim
        return dim

    def diffuse_branch_input_dim(self, feature_dim: int = FEATURE_DIM) -> int:
        return 3 + (feature_dim if self.use_features else 0) + 3  # x, z, n


class Linear:
    """Dense layer; fan-in-scaled uniform init, zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


class GeometryField:
    """Deformation network: residual MLP over (position, hash encoding).

    Heads: deformation (zero-initialized, so the field starts as the
    identity), geometric feature, and sigmoid diffuse color.
    """

    def __init__(
        self,
        grid: HashGrid,
        feature_dim: int = FEATURE_DIM,
        with_features: bool = True,
        with_diffuse: bool = True,
        dtype=np.float32,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.grid = grid
        self.feature_dim = feature_dim
        h = HIDDEN_GEOMETRY
        self.proj = Linear(3 + grid.output_dim, h, rng, dtype)
        self.res1 = Linear(h, h, rng, dtype)
        self.res2 = Linear(h, h, rng, dtype)
        self.head_deform = Linear(h, 3, rng, dtype, zero_init=True)
        self.head_feature = Linear(h, feature_dim, rng, dtype) if with_features else None
        self.head_diffuse = Linear(h, 3, rng, dtype) if with_diffuse else None

    def trunk(self, points: Tensor) -> Tensor:
        enc = self.grid.encode(points)
        h0 = ad.relu(self.proj(ad.concat([points, enc], axis=-1)))
        inner = ad.relu(self.res2(ad.relu(self.res1(h0))))
        return ad.add(h0, inner)

    def __call__(self, points: Tensor):
        h = self.trunk(points)
        offsets = self.head_deform(h)
        features = self.head_feature(h) if self.head_feature else None
        diffuse = ad.sigmoid(self.head_diffuse(h)) if self.head_diffuse else None
        return offsets, features, diffuse

    def parameters(self) -> list[Tensor]:
        params = self.grid.parameters() + self.proj.parameters()
        params += self.res1.parameters() + self.res2.parameters()
        params += self.head_deform.parameters()
        if self.head_feature:
            params += self.head_feature.parameters()
        if self.head_diffuse:
            params += self.head_diffuse.parameters()
        return params


class VertexOffsetField:
    """Per-vertex offsets as raw parameters (no network)."""

    def __init__(self, num_vertices: int, dtype=np.float32):
        self.offsets = Tensor(np.zeros((num_vertices, 3), dtype=dtype), requires_grad=True)

    def __call__(self, points: Tensor):
        if points.shape[0] != self.offsets.shape[0]:
            raise ValueError(
                f"offset table holds {self.offsets.shape[0]} vertices, "
                f"queried with {points.shape[0]}"
            )
        return ad.scale(self.offsets, 1.0), None, None

    def parameters(self) -> list[Tensor]:
        return [self.offsets]


class AppearanceShader:
    """Two-hidden-layer MLP with sigmoid color output."""

    def __init__(self, in_dim: int, dtype=np.float32, rng=None):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.l0 = Linear(in_dim, HIDDEN_SHADER, rng, dtype)
        self.l1 = Linear(HIDDEN_SHADER, HIDDEN_SHADER, rng, dtype)
        self.l2 = Linear(HIDDEN_SHADER, 3, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"shader expects {self.in_dim} inputs, got {x.shape[-1]}")
        return ad.sigmoid(self.l2(ad.relu(self.l1(ad.relu(self.l0(x))))))

    def parameters(self) -> list[Tensor]:
        return self.l0.parameters() + self.l1.parameters() + self.l2.parameters()


class NormalPredictor:
    """Predicts unit normals from positions and geometric features."""

    def __init__(self, feature_dim: int = FEATURE_DIM, dtype=np.float32, rng=None):
        rng = rng or np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.l0 = Linear(3 + feature_dim, HIDDEN_NORMALNET, rng, dtype)
        self.l1 = Linear(HIDDEN_NORMALNET, HIDDEN_NORMALNET, rng, dtype)
        self.l2 = Linear(HIDDEN_NORMALNET, 3, rng, dtype)

    def __call__(self, positions: Tensor, features: Tensor) -> Tensor:
        if features.shape[-1] != self.feature_dim:
            raise ValueError(
                f"normal predictor expects {self.feature_dim}-dim features, "
                f"got {features.shape[-1]}"
            )
        x = ad.concat([positions, features], axis=-1)
        raw = self.l2(ad.relu(self.l1(ad.relu(self.l0(x)))))
        return ad.l2_normalize(raw)

    def parameters(self) -> list[Tensor]:
        return self.l0.parameters() + self.l1.parameters() + self.l2.parameters()


# ---------------------------------------------------------------------------
# tape-level mesh geometry
# ---------------------------------------------------------------------------


def face_normals_t(vertices: Tensor, faces: np.ndarray, normalized: bool = True) -> Tensor:
    a = ad.gather(vertices, faces[:, 0])
    b = ad.gather(vertices, faces[:, 1])
    c = ad.gather(vertices, faces[:, 2])
    n = ad.cross3(ad.subtract(b, a), ad.subtract(c, a))
    return ad.l2_normalize(n) if normalized else n


def vertex_normals_t(vertices: Tensor, faces: np.ndarray) -> Tensor:
    """Area-weighted vertex normals as a differentiable expression."""
    fn = face_normals_t(vertices, faces, normalized=False)
    stacked = ad.concat([fn, fn, fn], axis=0)
    idx = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]]).astype(np.int64)
    acc = ad.scatter_add(stacked, idx, vertices.shape[0])
    return ad.l2_normalize(acc)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------


def eval_geometry(field, points: np.ndarray):
    """Evaluate the geometry field at points, returning plain arrays."""
    with ad.no_grad():
        offsets, features, diffuse = field(Tensor(np.asarray(points)))
    return (
        offsets.data,
        None if features is None else features.data,
        None if diffuse is None else diffuse.data,
    )


def deform_mesh(field, initial: TriangleMesh) -> TriangleMesh:
    """Apply the deformation field to a mesh; topology is untouched."""
    offsets, features, diffuse = eval_geometry(field, initial.vertices)
    out = TriangleMesh(
        initial.vertices + offsets,
        initial.faces.copy(),
        features=features,
        diffuse=diffuse,
    )
    from .meshes import vertex_normals

    out.normals = vertex_normals(out)
    return out


def shader_inputs(
    flags: PipelineFlags,
    position: Tensor,
    normal: Tensor,
    sh_view: Tensor,
    feature: Optional[Tensor] = None,
    diffuse: Optional[Tensor] = None,
    encoded_position: Optional[Tensor] = None,
) -> Tensor:
    """Assemble the shader input row for the active wiring."""
    if not flags.use_geometry_mlp:
        assert encoded_position is not None
        return ad.concat([encoded_position, normal, sh_view], axis=-1)
    parts = [position]
    if flags.use_features:
        assert feature is not None
        parts.append(feature)
    parts += [normal, sh_view]
    assert diffuse is not None
    parts.append(diffuse)
    return ad.concat(parts, axis=-1)


def shade_specular(shader: AppearanceShader, position, normal, sh_view,
                   feature=None, diffuse=None, flags: PipelineFlags | None = None) -> Tensor:
    """Per-pixel specular prediction from g-buffer rows and encoded view dirs."""
    flags = flags or PipelineFlags()
    x = shader_inputs(flags, position, normal, sh_view, feature, diffuse)
    return shader(x)


def predict_normals(pred: NormalPredictor, positions, features) -> Tensor:
    return pred(positions, features)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NMR1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelBundle:
    """Everything a trained scene needs to render again."""

    flags: PipelineFlags
    geometry: GeometryField | VertexOffsetField
    shader: AppearanceShader
    grid: HashGrid
    normal_net: Optional[NormalPredictor]
    diffuse_branch: Optional[AppearanceShader]
    init_vertices: np.ndarray
    init_faces: np.ndarray

    def geometry_parameters(self) -> list[Tensor]:
        params = list(self.geometry.parameters())
        if not self.flags.use_geometry_mlp:
            params += self.grid.parameters()  # grid feeds the shader directly
        if self.normal_net is not None:
            params += self.normal_net.parameters()
        return params

    def appearance_parameters(self) -> list[Tensor]:
        params = list(self.shader.parameters())
        if self.diffuse_branch is not None:
            params += self.diffuse_branch.parameters()
        return params

    def init_mesh(self) -> TriangleMesh:
        return TriangleMesh(self.init_vertices.copy(), self.init_faces.copy())


def build_bundle(
    flags: PipelineFlags,
    init_mesh: TriangleMesh,
    rng: np.random.Generator,
    dtype=np.float32,
    feature_dim: int = FEATURE_DIM,
) -> ModelBundle:
    grid = HashGrid(dtype=dtype, rng=rng)
    if flags.use_geometry_mlp:
        geometry = GeometryField(
            grid,
            feature_dim=feature_dim,
            with_features=flags.use_features,
            with_diffuse=flags.use_baking,
            dtype=dtype,
            rng=rng,
        )
    else:
        geometry = VertexOffsetField(init_mesh.num_vertices, dtype=dtype)
    shader = AppearanceShader(flags.shader_input_dim(grid.output_dim, feature_dim), dtype, rng)
    normal_net = NormalPredictor(feature_dim, dtype, rng) if flags.use_feature_reg else None
    branch = (
        AppearanceShader(flags.diffuse_branch_input_dim(feature_dim), dtype, rng)
        if flags.has_diffuse_branch
        else None
    )
    return ModelBundle(
        flags=flags,
        geometry=geometry,
        shader=shader,
        grid=grid,
        normal_net=normal_net,
        diffuse_branch=branch,
        init_vertices=init_mesh.vertices.copy(),
        init_faces=init_mesh.faces.copy(),
    )


def _linear_records(prefix: str, layer: Linear):
    return [(f"{prefix}_w", layer.w.data), (f"{prefix}_b", layer.b.data)]


def _shader_records(prefix: str, shader: AppearanceShader):
    recs = []
    for i, layer in enumerate((shader.l0, shader.l1, shader.l2)):
        recs += _linear_records(f"{prefix}/l{i}", layer)
    return recs


def bundle_records(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    f = bundle.flags
    records = [
        (
            "meta/flags",
            np.array(
                [f.use_geometry_mlp, f.use_features, f.use_baking, f.use_feature_reg],
                dtype=np.float32,
            ),
        ),
        (
            "meta/hash",
            np.array(
                [
                    bundle.grid.levels,
                    bundle.grid.table_size,
                    bundle.grid.features,
                    bundle.grid.resolutions[0],
                    bundle.grid.resolutions[-1],
                    bundle.grid.bounds[0],
                    bundle.grid.bounds[1],
                ],
                dtype=np.float32,
            ),
        ),
        ("mesh/init_vertices", bundle.init_vertices),
        ("mesh/init_faces", bundle.init_faces.astype(np.float32)),
        ("hash/tables", bundle.grid.tables.data),
    ]
    if isinstance(bundle.geometry, GeometryField):
        g = bundle.geometry
        records += _linear_records("geometry/proj", g.proj)
        records += _linear_records("geometry/res1", g.res1)
        records += _linear_records("geometry/res2", g.res2)
        records += _linear_records("geometry/head_deform", g.head_deform)
        if g.head_feature:
            records += _linear_records("geometry/head_feature", g.head_feature)
        if g.head_diffuse:
            records += _linear_records("geometry/head_diffuse", g.head_diffuse)
    else:
        records.append(("geometry/vertex_offsets", bundle.geometry.offsets.data))
    records += _shader_records("appearance", bundle.shader)
    if bundle.diffuse_branch is not None:
        records += _shader_records("appearance/diffuse", bundle.diffuse_branch)
    if bundle.normal_net is not None:
        for i, layer in enumerate((bundle.normal_net.l0, bundle.normal_net.l1, bundle.normal_net.l2)):
            records += _linear_records(f"normalnet/l{i}", layer)
    return records


def save_checkpoint(bundle: ModelBundle, path) -> None:
    records = bundle_records(bundle)
    with open(str(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def read_records(path) -> dict[str, np.ndarray]:
    with open(str(path), "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    count = struct.unpack("<I", take(4, "record count"))[0]
    records = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        rank = struct.unpack("<I", take(4, f"{name} rank"))[0]
        dims = [struct.unpack("<I", take(4, f"{name} dims"))[0] for _ in range(rank)]
        n = int(np.prod(dims)) if dims else 1
        payload = take(4 * n, f"{name} payload")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return records


def _load_linear(layer: Linear, records, prefix, path):
    for suffix, tensor in (("_w", layer.w), ("_b", layer.b)):
        key = prefix + suffix
        if key not in records:
            raise CheckpointError(f"{path}: missing record {key!r}")
        arr = records[key]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: record {key!r} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.dtype)


def _load_shader(shader: AppearanceShader, records, prefix, path):
    for i, layer in enumerate((shader.l0, shader.l1, shader.l2)):
        _load_linear(layer, records, f"{prefix}/l{i}", path)


def load_checkpoint(path) -> ModelBundle:
    records = read_records(path)
    for key in ("meta/flags", "meta/hash", "mesh/init_vertices", "mesh/init_faces"):
        if key not in records:
            raise CheckpointError(f"{path}: missing record {key!r}")
    fl = records["meta/flags"]
    flags = PipelineFlags(*(bool(round(float(x))) for x in fl[:4]))
    hv = records["meta/hash"]
    init_mesh = TriangleMesh(
        records["mesh/init_vertices"].astype(np.float64),
        records["mesh/init_faces"].astype(np.int32),
    )
    rng = np.random.default_rng(0)
    bundle = build_bundle(flags, init_mesh, rng)
    expect = (
        bundle.grid.levels, bundle.grid.table_size, bundle.grid.features,
        bundle.grid.resolutions[0], bundle.grid.resolutions[-1],
    )
    got = tuple(int(round(float(x))) for x in hv[:5])
    if got != expect:
        raise CheckpointError(f"{path}: hash-grid layout {got} differs from build {expect}")
    bundle.grid.tables.data = records["hash/tables"].astype(np.float32)
    if flags.use_geometry_mlp:
        g = bundle.geometry
        _load_linear(g.proj, records, "geometry/proj", path)
        _load_linear(g.res1, records, "geometry/res1", path)
        _load_linear(g.res2, records, "geometry/res2", path)
        _load_linear(g.head_deform, records, "geometry/head_deform", path)
        if g.head_feature:
            _load_linear(g.head_feature, records, "geometry/head_feature", path)
        if g.head_diffuse:
            _load_linear(g.head_diffuse, records, "geometry/head_diffuse", path)
    else:
        arr = records.get("geometry/vertex_offsets")
        if arr is None:
            raise CheckpointError(f"{path}: missing record 'geometry/vertex_offsets'")
        bundle.geometry = VertexOffsetField(len(arr))
        bundle.geometry.offsets.data = arr.astype(np.float32)
    _load_shader(bundle.shader, records, "appearance", path)
    if bundle.diffuse_branch is not None:
        _load_shader(bundle.diffuse_branch, records, "appearance/diffuse", path)
    if bundle.normal_net is not None:
        for i, layer in enumerate((bundle.normal_net.l0, bundle.normal_net.l1, bundle.normal_net.l2)):
            _load_linear(layer, records, f"normalnet/l{i}", path)
    return bundle


def compose_transfer(geometry_from: ModelBundle, appearance_from: ModelBundle,
                     mode: str = "specular") -> ModelBundle:
    """Geometry of one scene with the appearance of another.

    ``mode='specular'`` keeps the geometry scene's baked diffuse colors and
    swaps only the specular shader; ``mode='specular+diffuse'`` also swaps the
    diffuse head of the geometry network.
    """
    if mode not in ("specular", "specular+diffuse"):
        raise ValueError(f"unknown transfer mode {mode!r}")
    a, b = geometry_from, appearance_from
    expected = a.flags.shader_input_dim(a.grid.output_dim)
    if b.shader.in_dim != expected:
        raise CheckpointError(
            f"appearance shader expects {b.shader.in_dim} inputs but the "
            f"geometry scene provides {expected} (feature dimensions differ)"
        )
    if a.flags.has_diffuse_branch and b.diffuse_branch is None:
        raise CheckpointError(
            "geometry scene renders through a diffuse branch network but the "
            "appearance scene has none"
        )
    out = ModelBundle(
        flags=a.flags,
        geometry=a.geometry,
        shader=b.shader,
        grid=a.grid,
        normal_net=a.normal_net,
        diffuse_branch=b.diffuse_branch if a.flags.has_diffuse_branch else None,
        init_vertices=a.init_vertices,
        init_faces=a.init_faces,
    )
    if mode == "specular+diffuse":
        if not (
            isinstance(a.geometry, GeometryField)
            and isinstance(b.geometry, GeometryField)
            and a.geometry.head_diffuse
            and b.geometry.head_diffuse
        ):
            raise CheckpointError("both scenes need baked diffuse heads for this mode")
        a.geometry.head_diffuse.w.data = b.geometry.head_diffuse.w.data.copy()
        a.geometry.head_diffuse.b.data = b.geometry.head_diffuse.b.data.copy()
    return out
