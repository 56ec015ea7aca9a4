"""Evaluation: relative L2, Darcy level error rate, residual moments, sweeps."""
from __future__ import annotations

import csv
import io

import numpy as np

DARCY_LEVELS = (3.0, 12.0)


def relative_l2(pred: np.ndarray, truth: np.ndarray, skip_zero_norm: bool = False) -> float:
    """Mean over samples of ||pred - truth||_2 / ||truth||_2.

    Inputs are (B, ...) batches; each sample's norms run over its remaining
    axes. Zero-norm truth is rejected unless ``skip_zero_norm`` drops those
    samples (degenerate all-zero sources do occur at tiny dataset sizes).
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    axes = tuple(range(1, truth.ndim))
    denom = np.sqrt(np.sum(truth**2, axis=axes))
    if np.any(denom == 0):
        if not skip_zero_norm or np.all(denom == 0):
            raise ValueError("zero-norm truth sample")
        keep = denom > 0
        pred, truth, denom = pred[keep], truth[keep], denom[keep]
    num = np.sqrt(np.sum((pred - truth) ** 2, axis=axes))
    return float(np.mean(num / denom))


def darcy_error_rate(pred_a: np.ndarray, truth_a: np.ndarray) -> float:
    """Fraction of pixels on the wrong side of the {3, 12} midpoint."""
    pred_a, truth_a = np.asarray(pred_a), np.asarray(truth_a)
    if not np.all(np.isin(truth_a, DARCY_LEVELS)):
        raise ValueError("truth must take values in {3, 12}")
    threshold = sum(DARCY_LEVELS) / 2.0
    return float(np.mean((pred_a > threshold) != (truth_a > threshold)))


def residual_moments(r: np.ndarray) -> tuple[float, float]:
    """Sample skewness and excess kurtosis over all entries; (0, 0) for
    (near-)constant fields."""
    r = np.asarray(r, dtype=float).reshape(-1)
    m = r.mean()
    c = r - m
    m2 = np.mean(c**2)
    if m2 < 1e-300 or np.unique(r).size < 2:
        return 0.0, 0.0
    skew = float(np.mean(c**3) / m2**1.5)
    kurt = float(np.mean(c**4) / m2**2 - 3.0)
    return skew, kurt


def format_csv(header: list[str], rows: list[tuple], comments: list[str] | None = None) -> str:
    """CSV text with 6-significant-digit floats, LF endings, '#' comments."""
    buf = io.StringIO()
    for line in comments or []:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def noise_sweep(model, testset: np.ndarray, pde, fractions, sigma_levels,
                steps: int = 20, seed: int = 0, task: str = "forward",
                max_samples: int | None = None) -> list[tuple]:
    """Mean relative L2 over a (corruption fraction, noise sigma) grid.

    Observations are corrupted out-of-distribution; conditioning masks stay
    full. Rows: (fraction, sigma, relative_l2).
    """
    from .datagen import corrupt_observations
    from .diffusion import karras_schedule, sample, sample_task_masks

    data = testset[:max_samples] if max_samples else testset
    b, _, h, w = data.shape
    obs_channel, target_channel = (0, 1) if task == "forward" else (1, 0)
    rng = np.random.default_rng(seed)
    ma, mu = sample_task_masks(task, (h, w), rng)
    masks = np.broadcast_to(np.stack([ma, mu]), data.shape).copy()
    schedule = karras_schedule(steps)

    rows = []
    for frac in fractions:
        for sig in sigma_levels:
            x_obs = data.copy()
            if frac > 0:
                x_obs[:, obs_channel] = corrupt_observations(
                    data[:, obs_channel : obs_channel + 1], frac, sig, seed=seed
                )[:, 0]
            x_obs[:, target_channel] = 0.0
            pred, _ = sample(model, x_obs, masks, pde, schedule, seed=seed,
                             replace_observed=(frac == 0))
            err = relative_l2(pred[:, target_channel], data[:, target_channel])
            rows.append((float(frac), float(sig), err))
    return rows
