"""Input encodings: trainable multi-resolution hash grid and real spherical harmonics.

Both encoders are built from tape primitives, so they are differentiable with
respect to the hash-table entries and the input coordinates without any
special-cased backward rules.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import diagnostics

_PRIMES = np.array([2654435761, 805459861, 3674653429], dtype=np.uint64)


class HashGrid:
    """Multi-resolution trainable feature grid with spatial hashing.

    Each of ``levels`` resolutions owns ``table_size`` feature rows inside one
    shared parameter tensor.  A query point is mapped to its cell per level,
    the 8 corner entries are fetched (hashed, or addressed directly when the
    level's lattice fits in the table), and trilinearly blended.  Outputs of
    all levels concatenate to a ``levels * features`` vector.
    """

    def __init__(
        self,
        levels: int = 16,
        coarsest: int = 16,
        finest: int = 2048,
        table_size: int = 2**15,
        features: int = 2,
        bounds: tuple[float, float] = (-1.5, 1.5),
        dtype=np.float32,
        rng: np.random.Generator | None = None,
    ):
        if levels < 2:
            raise ValueError("need at least two levels")
        self.levels = levels
        self.table_size = table_size
        self.features = features
        self.bounds = (float(bounds[0]), float(bounds[1]))
        growth = np.exp(np.log(finest / coarsest) / (levels - 1))
        res = np.floor(coarsest * growth ** np.arange(levels)).astype(np.int64)
        res[0], res[-1] = coarsest, finest
        if (np.diff(res) <= 0).any():
            raise ValueError("level resolutions must be strictly increasing")
        self.resolutions = res
        rng = rng or np.random.default_rng(0)
        init = rng.uniform(-1e-4, 1e-4, size=(levels * table_size, features))
        self.tables = ad.Tensor(init.astype(dtype), requires_grad=True)
        self.dtype = dtype

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def parameters(self) -> list[ad.Tensor]:
        return [self.tables]

    def _corner_indices(self, i0: np.ndarray, level: int) -> np.ndarray:
        """Table rows for the 8 cell corners of each point: (N, 8)."""
        n = int(self.resolutions[level])
        offs = np.array(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
             [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
            dtype=np.int64,
        )
        corners = i0[:, None, :] + offs[None, :, :]  # (N, 8, 3)
        if (n + 1) ** 3 <= self.table_size:
            idx = (
                corners[..., 0]
                + (n + 1) * (corners[..., 1] + (n + 1) * corners[..., 2])
            )
        else:
            c = corners.astype(np.uint64)
            h = (
                (c[..., 0] * _PRIMES[0])
                ^ (c[..., 1] * _PRIMES[1])
                ^ (c[..., 2] * _PRIMES[2])
            )
            idx = (h % np.uint64(self.table_size)).astype(np.int64)
        return idx + level * self.table_size

    def encode(self, points: ad.Tensor) -> ad.Tensor:
        """Encode (N, 3) points to (N, levels * features)."""
        lo, hi = self.bounds
        raw = points.data
        clamped = np.clip(raw, lo, hi)
        inside = ((raw >= lo) & (raw <= hi)).astype(raw.dtype)
        if (inside != 1.0).any():
            diagnostics.count("hash_clamped_points")
        # points outside the box contribute the clamped constant with zero grad
        x = ad.add(
            ad.multiply(points, ad.const(inside)),
            ad.const(clamped * (1.0 - inside)),
        )
        outs = []
        for level in range(self.levels):
            n = float(self.resolutions[level])
            span = hi - lo
            g_data = (clamped - lo) * (n / span)
            i0 = np.minimum(g_data.astype(np.int64), int(n) - 1)
            i0 = np.maximum(i0, 0)
            idx = self._corner_indices(i0, level)  # (N, 8)

            # trilinear weights as tape expressions of x
            g = ad.scale(
                ad.add(x, ad.const(np.full((1, 3), -lo, dtype=raw.dtype))), n / span
            )
            f = ad.subtract(g, ad.const(i0.astype(raw.dtype)))  # (N, 3) in [0, 1]
            fx, fy, fz = (ad.gather(f, [c], axis=-1) for c in range(3))
            one = ad.const(np.asarray(1.0, dtype=raw.dtype))
            gx, gy, gz = (ad.subtract(one, t) for t in (fx, fy, fz))
            wx = [gx, fx, gx, fx, gx, fx, gx, fx]
            wy = [gy, gy, fy, fy, gy, gy, fy, fy]
            wz = [gz, gz, gz, gz, fz, fz, fz, fz]

            entries = ad.gather(self.tables, idx.reshape(-1))  # (8N, F)
            weights = ad.concat(
                [
                    ad.multiply(ad.multiply(wx[c], wy[c]), wz[c])
                    for c in range(8)
                ],
                axis=-1,
            )  # (N, 8)
            weights_rows = ad.reshape(weights, (weights.shape[0] * 8, 1))
            level_out = ad.sum_groups(ad.multiply(entries, weights_rows), 8)
            outs.append(level_out)
        return ad.concat(outs, axis=-1)


# ---------------------------------------------------------------------------
# real spherical harmonics, bands 0..3 (16 values)
# ---------------------------------------------------------------------------

SH_DIM = 16

_C0 = 0.28209479177387814  # 0.5 * sqrt(1 / pi)
_C1 = 0.4886025119029199   # sqrt(3 / (4 pi))
_C2 = (
    1.0925484305920792,   # sqrt(15 / (4 pi))      : xy, yz, xz
    0.31539156525252005,  # 0.25 * sqrt(5 / pi)    : 3z^2 - 1
    0.5462742152960396,   # 0.25 * sqrt(15 / pi)   : x^2 - y^2
)
_C3 = (
    0.5900435899266435,   # 0.25 * sqrt(35 / (2 pi)) : y (3x^2 - y^2)
    2.890611442640554,    # 0.5  * sqrt(105 / pi)    : xyz
    0.4570457994644658,   # 0.25 * sqrt(21 / (2 pi)) : y (5z^2 - 1)
    0.3731763325901154,   # 0.25 * sqrt(7 / pi)      : z (5z^2 - 3)
    1.445305721320277,    # 0.25 * sqrt(105 / pi)    : z (x^2 - y^2)
)


def sh_encode(dirs: ad.Tensor) -> ad.Tensor:
    """Real SH basis values for bands 0..3 of (N, 3) directions.

    Inputs are renormalized; deviations beyond 1e-4 are counted as warnings.
    """
    norms = np.linalg.norm(dirs.data, axis=-1)
    if np.abs(norms - 1.0).max(initial=0.0) > 1e-4:
        diagnostics.count("sh_non_unit_inputs")
    v = ad.l2_normalize(dirs)
    x, y, z = (ad.gather(v, [c], axis=-1) for c in range(3))
    xx, yy, zz = ad.square(x), ad.square(y), ad.square(z)
    xy, yz, xz = ad.multiply(x, y), ad.multiply(y, z), ad.multiply(x, z)
    dtype = dirs.dtype
    ones = ad.const(np.ones((dirs.shape[0], 1), dtype=dtype))
    terms = [
        ad.scale(ones, _C0),
        ad.scale(y, _C1),
        ad.scale(z, _C1),
        ad.scale(x, _C1),
        ad.scale(xy, _C2[0]),
        ad.scale(yz, _C2[0]),
        ad.scale(ad.add(ad.scale(zz, 3.0), ad.scale(ones, -1.0)), _C2[1]),
        ad.scale(xz, _C2[0]),
        ad.scale(ad.subtract(xx, yy), _C2[2]),
        ad.scale(ad.multiply(y, ad.subtract(ad.scale(xx, 3.0), yy)), _C3[0]),
        ad.scale(ad.multiply(xy, z), _C3[1]),
        ad.scale(ad.multiply(y, ad.add(ad.scale(zz, 5.0), ad.scale(ones, -1.0))), _C3[2]),
        ad.scale(ad.multiply(z, ad.add(ad.scale(zz, 5.0), ad.scale(ones, -3.0))), _C3[3]),
        ad.scale(ad.multiply(x, ad.add(ad.scale(zz, 5.0), ad.scale(ones, -1.0))), _C3[2]),
        ad.scale(ad.multiply(z, ad.subtract(xx, yy)), _C3[4]),
        ad.scale(ad.multiply(x, ad.subtract(xx, ad.scale(yy, 3.0))), _C3[0]),
    ]
    return ad.concat(terms, axis=-1)
