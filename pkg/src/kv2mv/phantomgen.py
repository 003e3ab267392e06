"""Synthetic paired kVCT/MVCT patient volumes with controllable metal streaks.

Each patient is a stack of layered-ellipse slices (soft tissue, bone, air
cavities) labeled head/neck/body.  A band of head slices near the chin can
carry metal inserts; those kV slices are pushed through a sinogram round trip
whose metal-trace bins are nonlinearly saturated, which reconstructs into the
familiar bright/dark streaks.  MV volumes keep the same geometry but with
compressed contrast, subdued metal, and no streaks, so they act as the clean
training target.

HU anchors: air -1000, soft tissue ~40, bone 700-1400, metal >= 3000.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from kv2mv import projops
from kv2mv.dataio import HUVolume

HU_AIR = -1000.0
HU_SOFT = 40.0
KV_ARTIFACT_HU = 2000.0
MV_ARTIFACT_HU = 1000.0

# MV contrast model: soft tissue keeps 85% of its kV contrast around water,
# bone is compressed harder (high-energy beams see far less photoelectric
# absorption), and metal reads just below the MV artifact threshold so that
# MV volumes never trip it.
MV_SOFT_SLOPE = 0.85
MV_BONE_SLOPE = 0.45
MV_BONE_KNEE = 300.0
MV_METAL_HU = 900.0

SATURATION_PERCENTILE = 60.0


class PhantomSpecError(ValueError):
    """Raised when a PhantomSpec field violates its constraints."""


@dataclass
class PhantomSpec:
    """Knobs for one synthetic patient cohort."""

    image_size: int = 64
    n_slices: int = 30
    region_fractions: tuple = (0.4, 0.3, 0.3)  # head, neck, body
    n_implants: int = 2
    implant_hu: float = 8000.0
    artifact_severity: float = 0.8
    anatomy_seed_jitter: float = 1.0
    noise_sigma_hu: float = 12.0
    implant_slice_fraction: float = 0.15  # of head+neck slices
    misalign_max_px: int = 2  # in-plane rigid offset injected into the MV volume

    def validate(self):
        if self.image_size < 16 or self.image_size % 2 != 0:
            raise PhantomSpecError(f"image_size must be even and >= 16, got {self.image_size}")
        if self.n_slices < 1:
            raise PhantomSpecError(f"n_slices must be >= 1, got {self.n_slices}")
        if len(self.region_fractions) != 3 or any(f < 0 for f in self.region_fractions):
            raise PhantomSpecError(f"region_fractions must be 3 non-negative values, got {self.region_fractions}")
        if abs(sum(self.region_fractions) - 1.0) > 1e-9:
            raise PhantomSpecError(f"region_fractions must sum to 1, got sum {sum(self.region_fractions)}")
        if self.n_implants < 0:
            raise PhantomSpecError(f"n_implants must be >= 0, got {self.n_implants}")
        if self.n_implants > 0 and self.implant_hu < 3000:
            raise PhantomSpecError(f"implant_hu must be >= 3000, got {self.implant_hu}")
        if not 0.0 <= self.artifact_severity <= 1.0:
            raise PhantomSpecError(f"artifact_severity must be in [0,1], got {self.artifact_severity}")
        if self.noise_sigma_hu < 0:
            raise PhantomSpecError(f"noise_sigma_hu must be >= 0, got {self.noise_sigma_hu}")
        if not 0.0 <= self.implant_slice_fraction <= 1.0:
            raise PhantomSpecError(
                f"implant_slice_fraction must be in [0,1], got {self.implant_slice_fraction}"
            )
        if self.misalign_max_px < 0:
            raise PhantomSpecError(f"misalign_max_px must be >= 0, got {self.misalign_max_px}")

    def default_n_angles(self):
        return 3 * self.image_size


@dataclass
class Sinogram:
    """Line integrals [n_angles x n_detectors] at angles uniform in [0, pi)."""

    values: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.angles.shape[0]:
            raise ValueError("sinogram values must be [n_angles x n_detectors]")
        if self.angles.shape[0] < 1:
            raise ValueError("need at least one projection angle")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")


@dataclass
class PatientVolumePair:
    """Aligned kV/MV volumes plus the generator's ground-truth masks."""

    patient_id: str
    kv: HUVolume
    mv: HUVolume
    body_mask: np.ndarray  # [n_slices, d, d] bool
    region_labels: list
    implant_masks: np.ndarray  # [n_slices, d, d] bool
    mv_offset: tuple = (0, 0, 0)  # injected (dz, dy, dx) misalignment of mv


def uniform_angles(n_angles: int) -> np.ndarray:
    return np.linspace(0.0, np.pi, n_angles, endpoint=False)


def forward_project(image: np.ndarray, n_angles: int) -> Sinogram:
    """Discrete parallel-beam Radon transform of a square image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {image.shape}")
    if n_angles < 1:
        raise ValueError(f"n_angles must be >= 1, got {n_angles}")
    angles = uniform_angles(n_angles)
    n_det = projops.detector_count(image.shape[0])
    values = projops.splat_project(image, angles, n_det)
    return Sinogram(values=values, angles=angles)


def _ramp_hann_filter(padded_size: int) -> np.ndarray:
    # Ramp built from its spatial-domain form (avoids the DC bias of a plain
    # |f| sampling), then apodized with a Hann window.
    n = np.concatenate(
        (
            np.arange(1, padded_size / 2 + 1, 2, dtype=int),
            np.arange(padded_size / 2 - 1, 0, -2, dtype=int),
        )
    )
    f = np.zeros(padded_size)
    f[0] = 0.25
    f[1::2] = -1.0 / (np.pi * n) ** 2
    fourier_filter = 2.0 * np.real(np.fft.fft(f))
    fourier_filter *= np.fft.fftshift(np.hanning(padded_size))
    return fourier_filter


def fbp_reconstruct(sino: Sinogram, image_size: int, return_meta: bool = False):
    """Filtered back projection (ramp + Hann, linear interpolation).

    Approximate inverse of :func:`forward_project`. With ``return_meta`` the
    reconstruction is returned together with a flags dict; fewer than 16
    angles sets ``degraded_angular_sampling`` (and warns).
    """
    values = sino.values
    n_angles, n_det = values.shape
    meta = {"degraded_angular_sampling": n_angles < 16}
    if meta["degraded_angular_sampling"]:
        warnings.warn(
            f"FBP with {n_angles} angles is severely undersampled", RuntimeWarning, stacklevel=2
        )
    padded = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    filt = _ramp_hann_filter(padded)
    spectra = np.fft.fft(values, n=padded, axis=1) * filt[np.newaxis, :]
    filtered = np.real(np.fft.ifft(spectra, axis=1))[:, :n_det]
    recon = projops.backproject(filtered, sino.angles, image_size)
    recon *= np.pi / (2.0 * n_angles)
    if return_meta:
        return recon, meta
    return recon


def metal_trace(implant_mask: np.ndarray, angles: np.ndarray, n_det: int) -> np.ndarray:
    """Boolean sinogram mask of bins whose rays intersect the implant."""
    footprint = projops.splat_project(implant_mask.astype(np.float64), angles, n_det)
    return footprint > 1e-9


def corrupt_and_reconstruct(
    image: np.ndarray,
    implant_mask: np.ndarray,
    severity: float,
    n_angles: int,
    return_meta: bool = False,
):
    """Sinogram round trip with nonlinear saturation of the metal trace.

    Trace bins above the trace's 60th percentile v_sat are compressed to
    v_sat + (v - v_sat) * (1 - severity), mimicking beam attenuation through
    metal; FBP then spreads the inconsistency into streaks. severity=0 (or an
    empty implant mask) leaves the sinogram untouched, so the output equals
    the plain round trip bit for bit.
    """
    image = np.asarray(image, dtype=np.float64)
    implant_mask = np.asarray(implant_mask, dtype=bool)
    if implant_mask.shape != image.shape:
        raise ValueError("implant_mask shape must match image")
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must be in [0,1], got {severity}")
    has_metal = bool(implant_mask.any())
    if has_metal and image[implant_mask].min() < KV_ARTIFACT_HU:
        raise ValueError("implant pixels must carry >= 2000 HU in the input image")

    sino = forward_project(image, n_angles)
    meta = {"no_metal_trace": False}
    if severity > 0.0 and not has_metal:
        meta["no_metal_trace"] = True
    elif severity > 0.0:
        trace = metal_trace(implant_mask, sino.angles, sino.values.shape[1])
        trace_values = sino.values[trace]
        v_sat = np.percentile(trace_values, SATURATION_PERCENTILE)
        hot = trace & (sino.values > v_sat)
        sino.values[hot] = v_sat + (sino.values[hot] - v_sat) * (1.0 - severity)
    recon = fbp_reconstruct(sino, image.shape[0])
    if return_meta:
        return recon, meta
    return recon


# ---------------------------------------------------------------------------
# anatomy construction
# ---------------------------------------------------------------------------


def _ellipse_mask(d, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[0:d, 0:d].astype(np.float64)
    y = yy - cy
    x = xx - cx
    if angle != 0.0:
        ca, sa = np.cos(angle), np.sin(angle)
        x, y = ca * x + sa * y, -sa * x + ca * y
    return (x / rx) ** 2 + (y / ry) ** 2 <= 1.0


def region_slice_counts(n_slices, region_fractions):
    """Largest-remainder allocation of slices to (head, neck, body)."""
    raw = np.array(region_fractions) * n_slices
    counts = np.floor(raw).astype(int)
    rem = n_slices - counts.sum()
    order = np.argsort(-(raw - counts))
    for i in range(rem):
        counts[order[i]] += 1
    return tuple(int(c) for c in counts)


@dataclass
class _PatientGeometry:
    body_ry: float
    body_rx: float
    center_dy: float
    center_dx: float
    bone_hu: float
    soft_structures: list = field(default_factory=list)


def _draw_geometry(rng, spec):
    d = spec.image_size
    j = spec.anatomy_seed_jitter
    geom = _PatientGeometry(
        body_ry=d * (0.36 + 0.03 * j * rng.uniform(-1, 1)),
        body_rx=d * (0.32 + 0.03 * j * rng.uniform(-1, 1)),
        center_dy=d * 0.01 * j * rng.uniform(-1, 1),
        center_dx=d * 0.01 * j * rng.uniform(-1, 1),
        bone_hu=rng.uniform(900.0, 1400.0),
    )
    for _ in range(rng.integers(1, 4)):
        geom.soft_structures.append(
            (
                rng.uniform(-0.15, 0.15),  # cy offset, fraction of body_ry
                rng.uniform(-0.2, 0.2),
                rng.uniform(0.08, 0.2),  # radii, fraction of body radii
                rng.uniform(0.08, 0.2),
                rng.uniform(-30.0, 90.0),  # HU offset from soft tissue
            )
        )
    return geom


def _build_clean_slice(d, geom, region, z_frac, rng):
    """Layered-ellipse anatomy for one slice. Returns (hu image, body mask)."""
    cy = (d - 1) / 2.0 + geom.center_dy
    cx = (d - 1) / 2.0 + geom.center_dx
    # regions taper differently: the neck is narrower than the head
    scale = {"head": 1.0, "neck": 0.68, "body": 1.12}[region]
    ry = geom.body_ry * scale * (0.94 + 0.1 * z_frac)
    rx = geom.body_rx * scale * (0.94 + 0.1 * z_frac)
    body = _ellipse_mask(d, cy, cx, ry, rx)
    hu = np.full((d, d), HU_AIR)
    hu[body] = HU_SOFT

    for scy, scx, sry, srx, dhu in geom.soft_structures:
        m = _ellipse_mask(d, cy + scy * ry, cx + scx * rx, sry * ry * 2.2, srx * rx * 2.2)
        hu[m & body] = HU_SOFT + dhu

    if region == "head":
        # skull: elliptical shell hugging the body outline
        outer = _ellipse_mask(d, cy, cx, ry * 0.92, rx * 0.92)
        inner = _ellipse_mask(d, cy, cx, ry * 0.78, rx * 0.78)
        hu[outer & ~inner] = geom.bone_hu
        # a sinus-like air pocket
        m = _ellipse_mask(d, cy + 0.25 * ry, cx, ry * 0.10, rx * 0.14)
        hu[m & inner] = HU_AIR
    elif region == "neck":
        # vertebral body and airway
        m = _ellipse_mask(d, cy + 0.35 * ry, cx, ry * 0.16, rx * 0.18)
        hu[m & body] = geom.bone_hu
        m = _ellipse_mask(d, cy - 0.20 * ry, cx, ry * 0.12, rx * 0.12)
        hu[m & body] = HU_AIR
    else:
        # torso: spine plus two lung-ish air pockets
        m = _ellipse_mask(d, cy + 0.45 * ry, cx, ry * 0.14, rx * 0.14)
        hu[m & body] = geom.bone_hu
        for side in (-1, 1):
            m = _ellipse_mask(d, cy - 0.1 * ry, cx + side * 0.45 * rx, ry * 0.3, rx * 0.28)
            hu[m & body] = HU_AIR

    hu = ndimage.gaussian_filter(hu, sigma=0.7)
    return hu, body


def _implant_centers(rng, cy, cx, ry, rx, n_implants):
    """Metal inserts sit on the dental arch in the lower half of the head."""
    centers = []
    arc = np.linspace(-0.8, 0.8, max(n_implants, 1))
    for k in range(n_implants):
        phi = arc[k] + rng.uniform(-0.08, 0.08)
        centers.append(
            (
                cy + 0.40 * ry * np.cos(phi * 0.9) + rng.uniform(-0.6, 0.6),
                cx + 0.48 * rx * np.sin(phi) + rng.uniform(-0.6, 0.6),
            )
        )
    return centers


def mv_contrast_map(hu: np.ndarray) -> np.ndarray:
    """kV HU -> MV HU: reduced soft-tissue contrast, strongly compressed bone."""
    out = HU_SOFT + MV_SOFT_SLOPE * (hu - HU_SOFT)
    knee_mv = HU_SOFT + MV_SOFT_SLOPE * (MV_BONE_KNEE - HU_SOFT)
    high = hu > MV_BONE_KNEE
    out[high] = knee_mv + MV_BONE_SLOPE * (hu[high] - MV_BONE_KNEE)
    return out


def _to_hu_int16(stack: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(stack), -1024, 32767).astype(np.int16)


def _shift_volume(vox: np.ndarray, offset, fill=-1000):
    """Shift volume content by integer (dz, dy, dx), filling exposed edges."""
    out = np.full_like(vox, fill)
    src = []
    dst = []
    for ax, off in enumerate(offset):
        n = vox.shape[ax]
        if abs(off) >= n:
            return out
        if off >= 0:
            src.append(slice(0, n - off))
            dst.append(slice(off, n))
        else:
            src.append(slice(-off, n))
            dst.append(slice(0, n + off))
    out[tuple(dst)] = vox[tuple(src)]
    return out


def generate_patient(spec: PhantomSpec, seed: int) -> PatientVolumePair:
    """Build one aligned (kV, MV) volume pair. Pure function of (spec, seed).

    Implant-bearing kV slices go through the corrupting sinogram round trip;
    everything else is composed directly in image space.  The MV volume is
    streak-free by construction and, when ``spec.misalign_max_px > 0``, is
    shifted in-plane by a random integer offset for the alignment stage to
    recover.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B76326D]))
    d = spec.image_size
    n_head, n_neck, n_body = region_slice_counts(spec.n_slices, spec.region_fractions)
    regions = ["head"] * n_head + ["neck"] * n_neck + ["body"] * n_body

    # implant band: the last head slices (teeth area), sized so the artifact
    # fraction of head+neck slices tracks implant_slice_fraction
    band = set()
    if spec.n_implants > 0 and n_head > 0:
        band_size = max(1, round(spec.implant_slice_fraction * (n_head + n_neck)))
        band_size = min(band_size, n_head)
        band = set(range(n_head - band_size, n_head))

    geom = _draw_geometry(rng, spec)
    n_angles = spec.default_n_angles()

    kv = np.empty((spec.n_slices, d, d), dtype=np.float64)
    mv = np.empty_like(kv)
    body_mask = np.empty((spec.n_slices, d, d), dtype=bool)
    implant_masks = np.zeros((spec.n_slices, d, d), dtype=bool)

    for z, region in enumerate(regions):
        z_frac = z / max(spec.n_slices - 1, 1)
        clean, body = _build_clean_slice(d, geom, region, z_frac, rng)
        body_mask[z] = body
        imask = np.zeros((d, d), dtype=bool)
        if z in band:
            cy = (d - 1) / 2.0 + geom.center_dy
            cx = (d - 1) / 2.0 + geom.center_dx
            scale = 1.0 * (0.94 + 0.1 * z_frac)
            r_imp = max(1.6, d / 40.0)
            for icy, icx in _implant_centers(
                rng, cy, cx, geom.body_ry * scale, geom.body_rx * scale, spec.n_implants
            ):
                imask |= _ellipse_mask(d, icy, icx, r_imp, r_imp)
            imask &= body
        implant_masks[z] = imask

        kv_slice = clean.copy()
        if imask.any():
            kv_slice[imask] = spec.implant_hu
            kv_slice = corrupt_and_reconstruct(
                kv_slice, imask, spec.artifact_severity, n_angles
            )
        mv_slice = mv_contrast_map(clean)
        if imask.any():
            mv_slice[imask] = MV_METAL_HU

        kv[z] = kv_slice + rng.normal(0.0, spec.noise_sigma_hu, (d, d))
        mv[z] = mv_slice + rng.normal(0.0, spec.noise_sigma_hu, (d, d))

    mv_offset = (0, 0, 0)
    if spec.misalign_max_px > 0:
        m = spec.misalign_max_px
        mv_offset = (0, int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
    mv_shifted = _shift_volume(mv, mv_offset, fill=HU_AIR)

    patient_id = f"p{seed:05d}"
    spacing = (1.0, 1.0)
    kv_vol = HUVolume(
        patient_id=patient_id,
        modality="kVCT",
        voxels=_to_hu_int16(kv),
        pixel_spacing_mm=spacing,
        slice_thickness_mm=2.0,
    )
    mv_vol = HUVolume(
        patient_id=patient_id,
        modality="MVCT",
        voxels=_to_hu_int16(mv_shifted),
        pixel_spacing_mm=spacing,
        slice_thickness_mm=2.0,
    )
    return PatientVolumePair(
        patient_id=patient_id,
        kv=kv_vol,
        mv=mv_vol,
        body_mask=body_mask,
        region_labels=regions,
        implant_masks=implant_masks,
        mv_offset=mv_offset,
    )
