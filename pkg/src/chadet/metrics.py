"""MAE / RMSE (mm) and iMAE / iRMSE (1/km) over a validity mask."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)

INVERSE_EPS = 1e-6


@dataclass(frozen=True)
class MetricsReport:
    mae_mm: float
    rmse_mm: float
    imae_per_km: float
    irmse_per_km: float
    n_valid: int
    n_inverse_skipped: int = 0

    def as_table(self) -> str:
        rows = [("MAE", self.mae_mm, "mm"), ("RMSE", self.rmse_mm, "mm"),
                ("iMAE", self.imae_per_km, "1/km"), ("iRMSE", self.irmse_per_km, "1/km")]
        lines = [f"{'metric':<8}{'value':>14}  unit"]
        lines += [f"{name:<8}{value:>14.3f}  {unit}" for name, value, unit in rows]
        lines.append(f"{'pixels':<8}{self.n_valid:>14d}")
        return "\n".join(lines)

    def as_kv(self) -> str:
        return "\n".join(f"{k}={v!r}" if isinstance(v, int) else f"{k}={v:.6f}" for k, v in asdict(self).items())


def compute_metrics(pred, gt, valid_mask=None) -> MetricsReport:
    """Errors of ``pred`` against ``gt`` (both meters) over ``valid_mask``.

    Inverse-depth terms skip pixels with pred <= 1e-6 m and log how many.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    mask = (gt > 0) if valid_mask is None else np.asarray(valid_mask).astype(bool)
    mask = np.broadcast_to(mask, gt.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("compute_metrics: empty validity mask")
    p, g = pred[mask], gt[mask]
    if (g <= 0).any():
        raise ValueError("compute_metrics: ground truth must be positive on the mask")
    err = p - g
    mae = np.abs(err).mean() * 1000.0
    rmse = np.sqrt((err ** 2).mean()) * 1000.0
    ok = p > INVERSE_EPS
    skipped = int((~ok).sum())
    if skipped:
        log.warning("compute_metrics: %d pixels with pred <= %g m skipped in inverse metrics", skipped, INVERSE_EPS)
    if ok.any():
        ierr = 1.0 / p[ok] - 1.0 / g[ok]
        imae = np.abs(ierr).mean() * 1000.0
        irmse = np.sqrt((ierr ** 2).mean()) * 1000.0
    else:
        imae = irmse = float("nan")
    return MetricsReport(float(mae), float(rmse), float(imae), float(irmse), n, skipped)
