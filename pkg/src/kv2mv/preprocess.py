"""Alignment, HU normalization, masking, and artifact classification.

The pipeline order is fixed: rigid align MV onto the kV grid, resample if the
grids differ, classify artifact slices on raw HU, then normalize to [-1, 1]
and force the background to -1.  Classification must see raw HU because the
thresholds (2000 kVCT / 1000 MVCT) are defined there; the function signatures
make that hard to get backwards.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from kv2mv.dataio import HUVolume

LOWER_HU = -1000.0
UPPER_HU = {"kVCT": 2000.0, "MVCT": 1000.0}
BODY_THRESHOLD_HU = -500.0


@dataclass
class NormalizationSpec:
    lower_hu: float = LOWER_HU
    upper_hu_kv: float = UPPER_HU["kVCT"]
    upper_hu_mv: float = UPPER_HU["MVCT"]

    def upper(self, modality):
        return {"kVCT": self.upper_hu_kv, "MVCT": self.upper_hu_mv}[modality]


@dataclass
class SlicePair:
    """One aligned, normalized (kV, MV) training sample."""

    kv: np.ndarray  # [d, d] float32 in [-1, 1]
    mv: np.ndarray
    body_mask: np.ndarray  # [d, d] bool
    region: str  # head or neck; body slices never become pairs
    is_artifact: bool
    patient_id: str
    slice_index: int

    def validate(self):
        for name, img in (("kv", self.kv), ("mv", self.mv)):
            if img.shape != self.body_mask.shape:
                raise ValueError(f"{name} shape {img.shape} != mask {self.body_mask.shape}")
            if img.min() < -1.0 or img.max() > 1.0:
                raise ValueError(f"{name} outside [-1,1]")
            bg = img[~self.body_mask]
            if bg.size and not np.all(bg == -1.0):
                raise ValueError(f"{name} background not identically -1")
        if self.region not in ("head", "neck"):
            raise ValueError(f"pair region must be head or neck, got {self.region!r}")


def normalize(slice_hu, modality, spec: NormalizationSpec = None):
    """Clip HU to the modality window and map affinely onto [-1, 1]."""
    spec = spec or NormalizationSpec()
    arr = np.asarray(slice_hu, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("NaN HU values in input slice")
    lo, hi = spec.lower_hu, spec.upper(modality)
    clipped = np.clip(arr, lo, hi)
    return (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)


def apply_body_mask(norm_slice, body_mask):
    """Standardize everything outside the body segmentation to -1."""
    norm_slice = np.asarray(norm_slice)
    body_mask = np.asarray(body_mask, dtype=bool)
    if norm_slice.shape != body_mask.shape:
        raise ValueError(f"shape mismatch: {norm_slice.shape} vs {body_mask.shape}")
    out = norm_slice.copy()
    out[~body_mask] = -1.0
    return out


def classify_artifact(slice_hu, modality) -> bool:
    """True iff the raw slice strictly exceeds its modality's HU threshold."""
    return bool(np.asarray(slice_hu).max() > UPPER_HU[modality])


def derive_body_mask(mv_slice_hu) -> np.ndarray:
    """Body segmentation from an aligned MV slice: threshold, fill, largest blob.

    Stands in for the clinician-provided segmentation; the MV side is used
    because it is streak-free by construction.
    """
    rough = np.asarray(mv_slice_hu) > BODY_THRESHOLD_HU
    if not rough.any():
        return np.zeros_like(rough, dtype=bool)
    filled = ndimage.binary_fill_holes(rough)
    labels, n = ndimage.label(filled)
    if n == 0:
        return np.zeros_like(rough, dtype=bool)
    largest = 1 + np.argmax(ndimage.sum_labels(filled, labels, index=range(1, n + 1)))
    return labels == largest


def _shift_volume(vox, offset, fill):
    out = np.full_like(vox, fill)
    src, dst = [], []
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


def rigid_align(moving: HUVolume, fixed: HUVolume, max_shift: int = 8):
    """Exhaustive integer-translation alignment maximizing NCC over body voxels.

    Scores every 3-D shift within +-max_shift via FFT cross-correlations
    against the fixed volume's central crop, restricted to its non-air voxels.
    Returns (aligned volume, corrective shift), where applying the shift to
    ``moving`` produced the aligned volume; edge voxels exposed by the shift
    are filled with -1000 HU.
    """
    if moving.voxels.shape != fixed.voxels.shape:
        raise ValueError(
            f"grid mismatch: moving {moving.voxels.shape} vs fixed {fixed.voxels.shape}"
        )
    mov = moving.voxels.astype(np.float64)
    fix = fixed.voxels.astype(np.float64)
    if np.ptp(mov) == 0 or np.ptp(fix) == 0:
        raise ValueError("zero variance: cannot align constant volumes")

    margins = tuple(min(max_shift, (s - 1) // 2) for s in fix.shape)
    crop = tuple(slice(m, s - m) for m, s in zip(margins, fix.shape))
    fix_c = fix[crop]
    body = fix_c > BODY_THRESHOLD_HU
    if not body.any():
        body = np.ones_like(fix_c, dtype=bool)
    m = body.astype(np.float64)

    n = m.sum()
    s_f = (fix_c * m).sum()
    s_ff = (fix_c**2 * m).sum()
    var_f = s_ff - s_f**2 / n
    if var_f <= 0:
        raise ValueError("zero variance: fixed volume is constant over the body region")

    s_m = signal.correlate(mov, m, mode="valid", method="fft")
    s_mm = signal.correlate(mov**2, m, mode="valid", method="fft")
    s_mf = signal.correlate(mov, fix_c * m, mode="valid", method="fft")
    var_m = np.maximum(s_mm - s_m**2 / n, 0.0)
    denom = np.sqrt(var_m * var_f)
    ncc = np.where(denom > 1e-9, (s_mf - s_m * s_f / n) / np.maximum(denom, 1e-9), -np.inf)

    k = np.unravel_index(np.argmax(ncc), ncc.shape)
    shift = tuple(int(mi - ki) for mi, ki in zip(margins, k))
    aligned = HUVolume(
        patient_id=moving.patient_id,
        modality=moving.modality,
        voxels=_shift_volume(moving.voxels, shift, fill=-1000),
        pixel_spacing_mm=moving.pixel_spacing_mm,
        slice_thickness_mm=moving.slice_thickness_mm,
    )
    return aligned, shift


def resample_to_grid(vol: HUVolume, target_spacing_mm, target_dims) -> HUVolume:
    """Bilinear in-plane resampling, nearest-neighbor across slices.

    Pixel centers sit at (i + 0.5) * spacing, so the physical extent is
    preserved to within one voxel.  Identity grids return the volume unchanged.
    """
    if any(s <= 0 for s in target_spacing_mm):
        raise ValueError("target spacing must be positive")
    n_t, d_t = target_dims
    same_grid = (
        tuple(target_spacing_mm) == tuple(vol.pixel_spacing_mm)
        and (vol.n_slices, vol.voxels.shape[1]) == (n_t, d_t)
        and vol.voxels.shape[1] == vol.voxels.shape[2]
    )
    if same_grid:
        return HUVolume(
            patient_id=vol.patient_id,
            modality=vol.modality,
            voxels=vol.voxels.copy(),
            pixel_spacing_mm=vol.pixel_spacing_mm,
            slice_thickness_mm=vol.slice_thickness_mm,
        )

    sp_in = vol.pixel_spacing_mm
    ys = ((np.arange(d_t) + 0.5) * target_spacing_mm[0]) / sp_in[0] - 0.5
    xs = ((np.arange(d_t) + 0.5) * target_spacing_mm[1]) / sp_in[1] - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])

    z_in = np.rint(np.linspace(0, vol.n_slices - 1, n_t) if n_t > 1 else [0.0]).astype(int)
    z_in = np.clip(z_in, 0, vol.n_slices - 1)

    out = np.empty((n_t, d_t, d_t), dtype=np.float64)
    src = vol.voxels.astype(np.float64)
    for zo, zi in enumerate(z_in):
        out[zo] = ndimage.map_coordinates(src[zi], coords, order=1, mode="nearest").reshape(
            d_t, d_t
        )
    return HUVolume(
        patient_id=vol.patient_id,
        modality=vol.modality,
        voxels=np.clip(np.rint(out), -1024, 32767).astype(np.int16),
        pixel_spacing_mm=tuple(target_spacing_mm),
        slice_thickness_mm=vol.slice_thickness_mm,
    )


def preprocess_patient(kv_vol: HUVolume, mv_vol: HUVolume, region_labels, max_shift: int = 8):
    """Full per-patient chain: align, resample, classify, normalize, mask.

    Returns (pairs, kv_flags, mv_flags, shift); pairs cover head/neck slices
    only, while the flag lists span every slice of the volume.
    """
    mv_res = mv_vol
    if tuple(mv_vol.pixel_spacing_mm) != tuple(kv_vol.pixel_spacing_mm) or (
        mv_vol.voxels.shape != kv_vol.voxels.shape
    ):
        mv_res = resample_to_grid(
            mv_vol, kv_vol.pixel_spacing_mm, (kv_vol.n_slices, kv_vol.voxels.shape[1])
        )
    mv_aligned, shift = rigid_align(mv_res, kv_vol, max_shift=max_shift)

    kv_flags = [classify_artifact(kv_vol.voxels[z], "kVCT") for z in range(kv_vol.n_slices)]
    mv_flags = [classify_artifact(mv_aligned.voxels[z], "MVCT") for z in range(kv_vol.n_slices)]

    pairs = []
    for z, region in enumerate(region_labels):
        if region == "body":
            continue
        mask = derive_body_mask(mv_aligned.voxels[z])
        kv_n = apply_body_mask(normalize(kv_vol.voxels[z], "kVCT"), mask)
        mv_n = apply_body_mask(normalize(mv_aligned.voxels[z], "MVCT"), mask)
        pair = SlicePair(
            kv=kv_n.astype(np.float32),
            mv=mv_n.astype(np.float32),
            body_mask=mask,
            region=region,
            is_artifact=bool(kv_flags[z] or mv_flags[z]),
            patient_id=kv_vol.patient_id,
            slice_index=z,
        )
        pair.validate()
        pairs.append(pair)
    return pairs, kv_flags, mv_flags, shift
