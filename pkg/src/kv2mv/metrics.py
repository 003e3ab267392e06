"""Masked evaluation metrics and Table-style aggregation.

PSNR and SSIM are computed over the body mask only, so the background (forced
to -1 on both sides) never inflates scores.  Aggregation groups per-slice
records into one row per (loss configuration, training dataset) and reports
the artifact-subset mean next to the whole-set mean, the convention used
throughout the result tables.
"""

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 100.0
DATA_RANGE = 2.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsRecord:
    patient_id: str
    slice_index: int
    is_artifact: bool
    psnr_db: float
    ssim: float
    dataset_tag: str  # training dataset of the evaluated model: D_All or D_Art
    split: str  # Tr / Val / Ts
    loss_spec_id: str
    psnr_capped: bool = False


def masked_psnr(pred, gt, body_mask, data_range: float = DATA_RANGE) -> float:
    """PSNR restricted to mask pixels; identical content caps at +100 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    body_mask = np.asarray(body_mask, dtype=bool)
    if not body_mask.any():
        raise ValueError("empty mask: masked PSNR undefined")
    err = (pred - gt)[body_mask]
    mse = float(np.mean(err**2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP_DB))


def _gauss_kernel_1d():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return g / g.sum()


def ssim_map(pred, gt, data_range: float = DATA_RANGE) -> np.ndarray:
    """Full-size SSIM map matching the loss-side convention (mirror padding)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    k = _gauss_kernel_1d()

    def blur(x):
        out = ndimage.correlate1d(x, k, axis=0, mode="mirror")
        return ndimage.correlate1d(out, k, axis=1, mode="mirror")

    mu_x, mu_y = blur(pred), blur(gt)
    var_x = blur(pred * pred) - mu_x**2
    var_y = blur(gt * gt) - mu_y**2
    cov = blur(pred * gt) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )


def masked_ssim(pred, gt, body_mask) -> float:
    """Mean of the global SSIM map over mask pixels."""
    body_mask = np.asarray(body_mask, dtype=bool)
    if not body_mask.any():
        raise ValueError("empty mask: masked SSIM undefined")
    return float(ssim_map(pred, gt)[body_mask].mean())


def slice_record(
    pred, gt, body_mask, *, patient_id, slice_index, is_artifact, dataset_tag, split, loss_spec_id
) -> MetricsRecord:
    psnr = masked_psnr(pred, gt, body_mask)
    return MetricsRecord(
        patient_id=patient_id,
        slice_index=slice_index,
        is_artifact=bool(is_artifact),
        psnr_db=psnr,
        ssim=masked_ssim(pred, gt, body_mask),
        dataset_tag=dataset_tag,
        split=split,
        loss_spec_id=loss_spec_id,
        psnr_capped=bool(psnr >= PSNR_CAP_DB),
    )


def _mean(values):
    # sorted so the result is exactly permutation-invariant over records
    return float(np.mean(np.sort(values))) if values else None


def aggregate(records) -> list:
    """One row per (loss_spec_id, dataset_tag) with artifact and overall means.

    PSNR means skip capped (identical-image) slices; the counts column keeps
    them visible.  SSIM means use every slice.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    groups = {}
    for r in records:
        groups.setdefault((r.loss_spec_id, r.dataset_tag), []).append(r)
    rows = []
    for (loss_id, tag) in sorted(groups):
        rs = groups[(loss_id, tag)]
        art = [r for r in rs if r.is_artifact]
        rows.append(
            {
                "loss_spec_id": loss_id,
                "dataset_tag": tag,
                "psnr_art": _mean([r.psnr_db for r in art if not r.psnr_capped]),
                "ssim_art": _mean([r.ssim for r in art]),
                "psnr_all": _mean([r.psnr_db for r in rs if not r.psnr_capped]),
                "ssim_all": _mean([r.ssim for r in rs]),
                "n_slices": len(rs),
                "n_artifact": len(art),
                "n_capped": sum(r.psnr_capped for r in rs),
            }
        )
    return rows


REPORT_COLUMNS = [
    "loss_spec_id",
    "dataset_tag",
    "psnr_art",
    "ssim_art",
    "psnr_all",
    "ssim_all",
    "n_slices",
    "n_artifact",
    "n_capped",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report_csv(rows, path, columns=None):
    columns = columns or REPORT_COLUMNS
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def write_records(records, path):
    with open(path, "w") as f:
        json.dump([asdict(r) for r in records], f, indent=1)


def read_records(path):
    with open(path) as f:
        raw = json.load(f)
    return [MetricsRecord(**r) for r in raw]
