"""Run configuration: one JSON tree covering filter, scene, corruption and output.

Every key has a default, unknown keys are rejected at every level, and
:meth:`RunConfig.to_dict` writes the fully resolved tree so a run can be
reproduced from its saved config alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .filter import FilterConfig
from .harness import DepthField, SyntheticScene
from .observation import CharbonnierParams, PixelGrid


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    width: int = 32
    height: int = 32
    focal: float | None = None
    K: list | None = None
    depth: DepthField = field(default_factory=DepthField)
    twist: tuple = (0.0, 0.008, 0.0, 0.1, 0.02, 0.01)

    def grid(self) -> PixelGrid:
        if self.K is not None:
            return PixelGrid(self.width, self.height, np.asarray(self.K, dtype=float))
        return PixelGrid.synthetic(self.width, self.height, self.focal)

    def scene(self, seed: int = 0) -> SyntheticScene:
        focal = self.focal
        if self.K is not None:
            focal = float(self.grid().K[0, 0])
            if not np.allclose(self.grid().K, PixelGrid.synthetic(self.width, self.height, focal).K):
                raise ConfigError("synthetic scenes need a centred pinhole K")
        return SyntheticScene(self.width, self.height, focal, self.depth, tuple(self.twist), seed)


@dataclass
class CorruptionConfig:
    """Perturbations applied to synthetic flow (all in pixels)."""

    noise_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    # Outlier vector length as a multiple of the sequence's median flow length.
    outlier_magnitude: float = 10.0


@dataclass
class InputConfig:
    """How flow sequences are read.

    ``format`` is ``flo`` (``flow_NNNN.flo``) or ``kitti`` (16-bit flow PNGs
    with intrinsics from ``calibration``).  When a ``backward/`` folder holds
    backward flows, pixels failing the forward-backward check at
    ``consistency_tau_px`` are treated as outliers.
    """

    format: str = "flo"
    calibration: str | None = None
    use_backward: bool = True
    consistency_tau_px: float = 1.0


@dataclass
class EvalConfig:
    exclusion_px: float | None = None
    pixel_scale: float | None = None
    use_fb_mask: bool = True


@dataclass
class OutputConfig:
    figures: bool = True
    colormap: str = "magma"
    dpi: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    frames: int = 20
    metric: str = "coordinate"
    filter: FilterConfig = field(default_factory=FilterConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    input: InputConfig = field(default_factory=InputConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.metric != "coordinate":
            raise ConfigError("only the 'coordinate' metric is implemented")
        if self.input.format not in ("flo", "kitti"):
            raise ConfigError("input.format must be 'flo' or 'kitti'")
        if not self.input.consistency_tau_px > 0:
            raise ConfigError("input.consistency_tau_px must be positive")
        c = self.corruption
        if c.noise_sigma_px < 0 or not 0 <= c.outlier_fraction <= 1 or c.outlier_magnitude < 0:
            raise ConfigError("corruption parameters out of range")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            return _build(cls, data, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return _dump(self)


_NESTED = {
    (RunConfig, "filter"): FilterConfig,
    (RunConfig, "scene"): SceneConfig,
    (RunConfig, "corruption"): CorruptionConfig,
    (RunConfig, "input"): InputConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "output"): OutputConfig,
    (SceneConfig, "depth"): DepthField,
    (FilterConfig, "charbonnier"): CharbonnierParams,
}
_TUPLES = {(SceneConfig, "twist"), (DepthField, "slope")}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where.rstrip('.') or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where.rstrip('.') or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, f"{where}{key}.")
        elif (cls, key) in _TUPLES:
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _dump(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        # Diagonal weight matrices are written back as their diagonals.
        if obj.ndim == 2 and np.array_equal(obj, np.diag(np.diag(obj))):
            obj = np.diag(obj)
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [_dump(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config(path) -> RunConfig:
    from .io import read_json

    return RunConfig.from_dict(read_json(path))
