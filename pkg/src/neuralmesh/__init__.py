"""Multi-view triangle-mesh reconstruction with neural deformation and baked shading.

The package reconstructs a triangle mesh with per-vertex diffuse colors and a
small view-dependent specular network from posed images and masks.  The heavy
pieces are a tape-based reverse-mode autodiff engine (`autodiff`), mesh
utilities (`meshes`), trainable input encodings (`encodings`), the three
networks (`fields`), a differentiable deferred-shading software rasterizer
(`raster`), the loss terms (`losses`), the optimization loop (`training`),
dataset ingestion and synthesis (`datasets`), and a CLI (`cli`).
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "meshes",
    "encodings",
    "fields",
    "raster",
    "losses",
    "training",
    "datasets",
    "cli",
)


def __getattr__(name):
    # Lazy imports keep `python -m neuralmesh.cli` able to set thread env vars
    # before numpy loads.
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
