"""Fan-beam acquisition geometry.

Flat equispaced detector, circular source trajectory, square image grid
centered on the isocenter. All lengths in cm. A geometry validates itself
on construction: the detector must cover at least 95% of the image circle
for every view (objects are constrained to that fraction of the circle),
and the source must sit outside the image circle.

Presets (clinical physical lengths at every scale; detector/view counts
scale with the image grid):

    fullscale  512 image, 640 views, 640 detectors
    ablation   208 image, 320 views, 320 detectors
    desk       64 image, 128 views, 128 detectors
"""

import math
from dataclasses import dataclass, replace

MU_WATER = 0.192  # 1/cm at the reference energy


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FanBeamGeometry:
    image_size: int
    pixel_spacing: float
    num_views: int
    num_detectors: int
    detector_spacing: float
    source_distance: float  # source to isocenter
    detector_distance: float  # source to detector line
    angular_range: float = 360.0  # degrees

    def __post_init__(self):
        if self.image_size < 2 or self.num_views < 1 or self.num_detectors < 2:
            raise GeometryError(f"degenerate geometry: {self}")
        if min(self.pixel_spacing, self.detector_spacing) <= 0:
            raise GeometryError("spacings must be positive")
        if self.detector_distance <= self.source_distance:
            raise GeometryError("detector must sit beyond the isocenter")
        r = self.image_radius
        if self.source_distance <= r:
            raise GeometryError(
                f"source distance {self.source_distance} inside image circle radius {r:.3f}"
            )
        cover = self.covered_radius
        if cover < 0.95 * r:
            raise GeometryError(
                f"detector covers impact parameters up to {cover:.3f} cm "
                f"but the image circle needs {0.95 * r:.3f} cm: widen the detector"
            )

    # -- derived quantities -------------------------------------------
    @property
    def image_radius(self):
        """Radius of the inscribed image circle (cm)."""
        return 0.5 * self.image_size * self.pixel_spacing

    @property
    def covered_radius(self):
        """Largest ray impact parameter measured by the outermost bin."""
        u = 0.5 * (self.num_detectors - 1) * self.detector_spacing
        return (
            self.source_distance * u / math.hypot(u, self.detector_distance)
        )

    @property
    def view_angles(self):
        import numpy as np

        step = math.radians(self.angular_range) / self.num_views
        return np.arange(self.num_views) * step

    @property
    def sinogram_shape(self):
        return (self.num_detectors, self.num_views)

    def with_views(self, num_views):
        return replace(self, num_views=num_views)


_PRESETS = {
    "fullscale": FanBeamGeometry(
        image_size=512,
        pixel_spacing=40.0 / 512,
        num_views=640,
        num_detectors=640,
        detector_spacing=0.132,
        source_distance=59.5,
        detector_distance=119.0,
    ),
    "ablation": FanBeamGeometry(
        image_size=208,
        pixel_spacing=40.0 / 208,
        num_views=320,
        num_detectors=320,
        detector_spacing=0.265,
        source_distance=59.5,
        detector_distance=119.0,
    ),
    "desk": FanBeamGeometry(
        image_size=64,
        pixel_spacing=40.0 / 64,
        num_views=128,
        num_detectors=128,
        detector_spacing=0.665,
        source_distance=59.5,
        detector_distance=119.0,
    ),
}


def preset(name):
    try:
        return _PRESETS[name]
    except KeyError:
        raise GeometryError(
            f"unknown geometry preset {name!r}; have {sorted(_PRESETS)}"
        ) from None


def preset_names():
    return sorted(_PRESETS)


def mu_to_hu(mu):
    """Attenuation (1/cm) to Hounsfield units anchored at water."""
    return 1000.0 * (mu - MU_WATER) / MU_WATER


def hu_to_mu(hu):
    return MU_WATER * (1.0 + hu / 1000.0)
