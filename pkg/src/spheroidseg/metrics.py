"""
Per-image segmentation scores and dataset summaries.

``P`` is the predicted mask and ``T`` the manual (target) mask; both are 2-D
boolean arrays on the same grid.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import equivalent_diameter, label_components, measure

__all__ = [
    "SegEval",
    "MetricSummary",
    "jcd",
    "relative_diff",
    "delta_r",
    "delta_r_from_areas",
    "classify",
    "evaluate_image",
    "summarize",
    "binomial_sem",
    "lower_median",
]


@dataclass(frozen=True)
class SegEval:
    jcd: float
    dd: float
    cd: float
    delta_r_um: float
    invalid: bool
    additional: bool
    matched_component_area_px: int
    d_T_um: float
    d_P_um: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    median: float
    std: float
    n: int
    sem_binomial: Optional[float] = None


def _check_pair(P: np.ndarray, T: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=bool)
    T = np.asarray(T, dtype=bool)
    if P.shape != T.shape:
        raise ValueError(f"mask shapes differ: {P.shape} vs {T.shape}")
    if not T.any():
        raise ValueError("target mask is empty")
    return P, T


def jcd(P: np.ndarray, T: np.ndarray) -> float:
    """Jaccard distance ``1 - |P & T| / |P | T|``."""
    P, T = _check_pair(P, T)
    inter = int(np.count_nonzero(P & T))
    union = int(np.count_nonzero(P | T))
    return 1.0 - inter / union


def relative_diff(c_pred: float, c_true: float) -> float:
    if c_true <= 0:
        raise ValueError("reference value must be positive")
    return abs(c_pred - c_true) / c_true


def delta_r_from_areas(mismatch_px: float, target_px: float) -> float:
    """Thickness (px) of a ring around a disk of area ``target_px`` whose
    area equals ``mismatch_px``."""
    d_t = equivalent_diameter(target_px)
    return math.sqrt(mismatch_px / math.pi + d_t * d_t / 4.0) - d_t / 2.0


def delta_r(P: np.ndarray, T: np.ndarray, scale_um_per_px: float = 1.0) -> float:
    """Average radial error in µm (px when ``scale_um_per_px`` is 1)."""
    P, T = _check_pair(P, T)
    mismatch = int(np.count_nonzero(P ^ T))
    return delta_r_from_areas(mismatch, int(np.count_nonzero(T))) * scale_um_per_px


def classify(
    P_components: Sequence[np.ndarray], T: np.ndarray
) -> Tuple[Optional[np.ndarray], bool, bool]:
    """Apply the largest-component rule and flag invalid / additional detections.

    Returns ``(matched, invalid, additional)``.  ``matched`` is the largest
    predicted component, or ``None`` when nothing was predicted.  The image is
    invalid when the matched component misses ``T`` entirely; it carries an
    additional detection when it is valid and some other component misses
    ``T`` entirely.
    """
    T = np.asarray(T, dtype=bool)
    if len(P_components) == 0:
        return None, True, False
    matched = np.asarray(P_components[0], dtype=bool)
    if not (matched & T).any():
        return matched, True, False
    additional = any(not (np.asarray(c, dtype=bool) & T).any() for c in P_components[1:])
    return matched, False, additional


def _components_overlap(P: np.ndarray, T: np.ndarray):
    # same outcome as classify() without materialising one mask per component
    labels, order, areas = label_components(P)
    if not order:
        return None, True, False, 0
    hit = np.zeros(labels.max() + 1, dtype=bool)
    hit[np.unique(labels[T])] = True
    matched = labels == order[0]
    if not hit[order[0]]:
        return matched, True, False, areas[0]
    additional = any(not hit[i] for i in order[1:])
    return matched, False, additional, areas[0]


def evaluate_image(P: np.ndarray, T: np.ndarray, scale_um_per_px: float = 1.0) -> SegEval:
    """Score a prediction against the manual segmentation.

    JCD, DD, CD and the radial error use the largest predicted component
    only.  For an invalid prediction JCD, DD and CD are 1 and the radial
    error is that of an empty prediction.
    """
    P, T = _check_pair(P, T)
    matched, invalid, additional, area = _components_overlap(P, T)
    t_meas = measure(T, scale_um_per_px)
    # the target's own equivalent diameter uses its full pixel count
    t_area = int(np.count_nonzero(T))
    d_t = equivalent_diameter(t_area, scale_um_per_px)
    if invalid:
        d_p = equivalent_diameter(area, scale_um_per_px) if matched is not None else 0.0
        return SegEval(
            jcd=1.0,
            dd=1.0,
            cd=1.0,
            delta_r_um=delta_r_from_areas(t_area, t_area) * scale_um_per_px,
            invalid=True,
            additional=False,
            matched_component_area_px=int(area),
            d_T_um=d_t,
            d_P_um=d_p,
        )
    p_meas = measure(matched, scale_um_per_px)
    d_p = equivalent_diameter(area, scale_um_per_px)
    return SegEval(
        jcd=jcd(matched, T),
        dd=relative_diff(d_p, d_t),
        cd=relative_diff(p_meas.circularity, t_meas.circularity),
        delta_r_um=delta_r(matched, T, scale_um_per_px),
        invalid=False,
        additional=additional,
        matched_component_area_px=int(area),
        d_T_um=d_t,
        d_P_um=d_p,
    )


def lower_median(values: Sequence[float]) -> float:
    """Median; for an even count the lower of the two middle elements."""
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


def binomial_sem(k: int, n: int) -> float:
    p = k / n
    return math.sqrt(p * (1.0 - p) / n)


def _summary(values: List[float]) -> MetricSummary:
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return MetricSummary(mean=mean, median=lower_median(values), std=math.sqrt(var), n=n)


def summarize(evals: Iterable[SegEval]) -> Dict[str, MetricSummary]:
    """Mean, lower median and population std of JCD, DD, CD and radial error;
    ISF/ASF as fractions with their binomial standard error."""
    evals = list(evals)
    if not evals:
        raise ValueError("nothing to summarize")
    n = len(evals)
    out = {
        name: _summary([float(getattr(e, attr)) for e in evals])
        for name, attr in (("jcd", "jcd"), ("dd", "dd"), ("cd", "cd"), ("delta_r_um", "delta_r_um"))
    }
    for name, attr in (("isf", "invalid"), ("asf", "additional")):
        k = sum(bool(getattr(e, attr)) for e in evals)
        flags = [1.0 if getattr(e, attr) else 0.0 for e in evals]
        base = _summary(flags)
        out[name] = MetricSummary(
            mean=k / n, median=base.median, std=base.std, n=n, sem_binomial=binomial_sem(k, n)
        )
    return out
