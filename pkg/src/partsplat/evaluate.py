"""Quantitative evaluation: 3-D track metrics, flow end-point error and image
quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyMask, LengthMismatch
from .imageops import psnr, ssim

ACC_THRESHOLDS_CM = (1.0, 2.0, 4.0, 8.0, 16.0)
SURVIVAL_CUTOFF_CM = 50.0


@dataclass
class TrackReport:
    """Tracking summary in centimeters.

    mte_cm: median error over all (track, frame) samples; acc: mean fraction
    under the standard thresholds; surv: fraction of samples on tracks that
    have never exceeded the 50 cm cutoff at or before that frame.
    errors_cm is the full (frames, tracks) error table."""

    mte_cm: float
    acc: float
    acc_per_threshold: dict
    surv: float
    errors_cm: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mte_cm": self.mte_cm,
            "acc": self.acc,
            "acc_per_threshold": {f"{t:g}": v for t, v in self.acc_per_threshold.items()},
            "surv": self.surv,
        }


def trajectory_metrics(est_tracks: np.ndarray, gt_tracks: np.ndarray) -> TrackReport:
    """Compare aligned (frames, tracks, 3) center series in meters.

    A track dies at its first frame with error > 50 cm and stays dead; Surv is
    the fraction of live (track, frame) samples.
    """
    est = np.asarray(est_tracks, dtype=float)
    gt = np.asarray(gt_tracks, dtype=float)
    if est.shape != gt.shape or est.ndim != 3 or est.shape[2] != 3:
        raise LengthMismatch(f"track shapes differ: {est.shape} vs {gt.shape}")
    err_cm = np.linalg.norm(est - gt, axis=2) * 100.0

    acc_per = {th: float((err_cm < th).mean()) for th in ACC_THRESHOLDS_CM}
    alive = np.maximum.accumulate(err_cm, axis=0) <= SURVIVAL_CUTOFF_CM
    return TrackReport(
        mte_cm=float(np.median(err_cm)),
        acc=float(np.mean(list(acc_per.values()))),
        acc_per_threshold=acc_per,
        surv=float(alive.mean()),
        errors_cm=err_cm,
    )


def flow_epe(est_flow: np.ndarray, gt_flow: np.ndarray, mask: np.ndarray) -> float:
    """Mean L2 flow difference (px) over masked pixels."""
    est = np.asarray(est_flow, dtype=float)
    gt = np.asarray(gt_flow, dtype=float)
    sel = np.asarray(mask, dtype=bool)
    if est.shape != gt.shape or est.shape[:-1] != sel.shape or est.shape[-1] != 2:
        raise DimensionMismatch(
            f"flow/mask shapes inconsistent: {est.shape}, {gt.shape}, {sel.shape}"
        )
    if not sel.any():
        raise EmptyMask("no masked pixels")
    diff = est[sel] - gt[sel]
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def image_metrics(rendered: np.ndarray, observed: np.ndarray) -> dict:
    """PSNR (dB, +inf for identical images) and mean-channel SSIM on [0, 1]
    images."""
    return {
        "psnr": psnr(rendered, observed),
        "ssim": ssim(np.asarray(rendered, float), np.asarray(observed, float)),
    }
