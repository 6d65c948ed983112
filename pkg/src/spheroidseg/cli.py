"""
Batch command-line front end.

    spheroidseg segment DATASET --model m.onnx --out-dir out/
    spheroidseg otsu DATASET --erode 2 --polarity dark --out-dir out/
    spheroidseg eval PRED_DIR TRUTH_DIR --out-dir out/
    spheroidseg growth out/measures.csv --eval out/eval.csv --out-dir out/
    spheroidseg compare-observers jcd_wide.csv --out-dir out/
    spheroidseg augment DATASET --masks masks/ --seed 0 --out-dir aug/

Every per-image result is keyed by image id and written in id order, so the
output files do not depend on the worker count.  Timestamps only ever go to
``run.log``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import multiprocessing
import os
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .baseline import OtsuParams, otsu_segment
from .dataset import (
    DatasetIndex,
    Record,
    format_day,
    load_dataset,
    parse_stem,
    read_csv,
    write_csv,
)
from .geometry import (
    PolygonChain,
    label_components,
    measure,
    trace_border,
)
from .imgio import (
    DEFAULT_SCALE_UM_PER_PX,
    TRANSFORMS,
    GrayImage,
    augment,
    load_image,
    load_mask,
    render_overlay,
    save_image,
    save_mask,
    save_rgb,
    to_8bit,
)
from .infer import ModelConfig, Segmentation, load_model, segment
from .metrics import SegEval, evaluate_image, summarize
from .stats import BlockMatrix, dunn_bonferroni, friedman, rank_treatments

log = logging.getLogger("spheroidseg")

PRED_COLOR = (0, 0, 255)  # blue
TRUTH_COLOR = (0, 255, 0)  # green
SIZE_SPLIT_UM = 400.0

SEGMENT_COLUMNS = [
    "image_id",
    "spheroid_id",
    "day",
    "source",
    "width",
    "height",
    "scale_um_per_px",
    "area_px",
    "perimeter_px",
    "diameter_um",
    "volume_um3",
    "circularity",
    "n_components",
    "error",
]
EVAL_COLUMNS = [
    "image_id",
    "spheroid_id",
    "day",
    "jcd",
    "dd",
    "cd",
    "delta_r_um",
    "invalid",
    "additional",
    "d_T_um",
    "d_P_um",
]
GROWTH_COLUMNS = ["spheroid_id", "day", "diameter_um", "volume_um3", "circularity", "source"]


# ---------------------------------------------------------------------
# worker pool
# ---------------------------------------------------------------------
_WORKER: Dict[str, object] = {}


def _init_worker(method: str, config: Optional[dict], otsu: Optional[dict], out_dir: str) -> None:
    _WORKER.clear()
    _WORKER["method"] = method
    _WORKER["out_dir"] = Path(out_dir)
    if method == "model":
        _WORKER["session"] = load_model(ModelConfig(**config))
    else:
        _WORKER["otsu"] = OtsuParams(**otsu)


def _pool_map(fn: Callable, items: Sequence, workers: int, initializer=None, initargs=()) -> List:
    """Ordered map over ``items`` with ``workers`` processes (in-process for 1)."""
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(
        max_workers=min(workers, len(items)), mp_context=ctx, initializer=initializer, initargs=initargs
    ) as pool:
        return list(pool.map(fn, items))


def default_workers() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------
# segment / otsu
# ---------------------------------------------------------------------
def _chains_json(image_id: str, chains: Sequence[PolygonChain]) -> str:
    return json.dumps({"image_id": image_id, "chains": [c.to_json() for c in chains]})


def _truth_chains(mask: np.ndarray) -> List[PolygonChain]:
    labels, order, _ = label_components(mask)
    return [trace_border(labels == i) for i in order]


def _otsu_segmentation(img8: GrayImage, params: OtsuParams) -> Segmentation:
    mask = otsu_segment(img8, params)
    chains = [trace_border(mask)] if mask.any() else []
    meas = measure(mask, img8.scale_um_per_px) if mask.any() else None
    return Segmentation(mask=mask, chains=chains, measure=meas)


def _segment_record(rec: Record) -> dict:
    method = _WORKER["method"]
    out_dir: Path = _WORKER["out_dir"]
    row = {
        "image_id": rec.image_id,
        "spheroid_id": rec.spheroid_id,
        "day": format_day(rec.day),
        "source": method,
        "scale_um_per_px": rec.scale_um_per_px,
        "error": "",
    }
    if not rec.image.is_file():
        row["error"] = "missing_file"
        return row
    try:
        img = load_image(rec.image, rec.scale_um_per_px)
        img8 = to_8bit(img)
        if method == "model":
            seg = segment(_WORKER["session"], img8)
        else:
            seg = _otsu_segmentation(img8, _WORKER["otsu"])
        save_mask(seg.mask, out_dir / "masks" / f"{rec.image_id}.png")
        (out_dir / "chains").mkdir(parents=True, exist_ok=True)
        (out_dir / "chains" / f"{rec.image_id}.json").write_text(_chains_json(rec.image_id, seg.chains))
        contours = []
        if rec.mask is not None and rec.mask.is_file():
            truth = load_mask(rec.mask, img.shape)
            contours += [(c, TRUTH_COLOR) for c in _truth_chains(truth)]
        contours += [(c, PRED_COLOR) for c in seg.chains]
        save_rgb(render_overlay(img8, contours), out_dir / "overlays" / f"{rec.image_id}.png")
    except Exception as exc:  # one bad frame must not stop a 10^5-image run
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return row
    row.update(width=img.width, height=img.height, n_components=len(seg.chains))
    if seg.measure is not None:
        row.update(
            area_px=seg.measure.area_px,
            perimeter_px=seg.measure.perimeter_px,
            diameter_um=seg.measure.diameter_um,
            volume_um3=seg.measure.volume_um3,
            circularity=seg.measure.circularity,
        )
    return row


def segment_dataset(
    index: DatasetIndex,
    out_dir,
    method: str = "model",
    config: Optional[ModelConfig] = None,
    otsu: Optional[OtsuParams] = None,
    workers: int = 1,
) -> Tuple[List[dict], int]:
    """Segment every record; returns ``(rows, exit_code)``.

    Exit code 0 means every image was processed, 2 that at least one failed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if method == "model":
        if config is None:
            raise ValueError("model segmentation needs a ModelConfig")
        load_model(config)  # fail fast, before any worker starts
        cfg = asdict(config)
        initargs = ("model", cfg, None, str(out_dir))
    else:
        initargs = ("otsu", None, asdict(otsu or OtsuParams()), str(out_dir))
    rows = _pool_map(_segment_record, list(index), workers, _init_worker, initargs)
    rows.sort(key=lambda r: r["image_id"])
    write_csv(out_dir / "measures.csv", SEGMENT_COLUMNS, rows)
    failed = [{"image_id": r["image_id"], "error": r["error"]} for r in rows if r["error"]]
    report = {
        "command": method,
        "n_images": len(rows),
        "n_ok": len(rows) - len(failed),
        "n_failed": len(failed),
        "errors": failed,
    }
    (out_dir / "summary.json").write_text(json.dumps(report, indent=2) + "\n")
    lines = [f"{method}: {report['n_ok']}/{report['n_images']} images segmented"]
    lines += [f"  {e['image_id']}: {e['error']}" for e in failed]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    for e in failed:
        log.warning("%s failed: %s", e["image_id"], e["error"])
    return rows, (2 if failed else 0)


# ---------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------
def _mask_files(directory: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(Path(directory).glob("*.png"))}


def _eval_pair(args) -> dict:
    image_id, pred_path, truth_path, scale = args
    sid, day = parse_stem(image_id)
    row = {"image_id": image_id, "spheroid_id": sid, "day": format_day(day)}
    try:
        truth = load_mask(truth_path)
        pred = load_mask(pred_path, truth.shape)
        ev = evaluate_image(pred, truth, scale)
    except Exception as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    d = ev.as_dict()
    d["invalid"], d["additional"] = bool(ev.invalid), bool(ev.additional)
    row.update(d)
    return row


def _summary_dict(evals: List[SegEval]) -> dict:
    out = {}
    for name, s in summarize(evals).items():
        if s.sem_binomial is None:
            out[name] = {"mean": s.mean, "median": s.median, "std": s.std, "n": s.n}
        else:
            out[name] = {"fraction": s.mean, "sem_binomial": s.sem_binomial, "n": s.n}
    return out


def evaluate_dirs(pred_dir, truth_dir, out_dir, scale: float = DEFAULT_SCALE_UM_PER_PX, workers: int = 1) -> dict:
    """Score prediction masks against truth masks matched by file stem."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preds, truths = _mask_files(pred_dir), _mask_files(truth_dir)
    common = sorted(set(preds) & set(truths))
    unmatched_pred = sorted(set(preds) - set(truths))
    unmatched_truth = sorted(set(truths) - set(preds))
    for name in unmatched_pred + unmatched_truth:
        log.warning("no counterpart for %s; skipped", name)
    jobs = [(i, preds[i], truths[i], scale) for i in common]
    rows = _pool_map(_eval_pair, jobs, workers)
    good = [r for r in rows if "error" not in r]
    errors = [{"image_id": r["image_id"], "error": r["error"]} for r in rows if "error" in r]
    write_csv(
        out_dir / "eval.csv",
        EVAL_COLUMNS,
        good,
        comments=[f"scale_um_per_px: {scale}"],
    )
    evals = [
        SegEval(**{k: r[k] for k in SegEval.__dataclass_fields__}) for r in good
    ]
    summary = {
        "n_evaluated": len(good),
        "unmatched_predictions": unmatched_pred,
        "unmatched_truths": unmatched_truth,
        "errors": errors,
        "conventions": {"std": "population (ddof=0)", "median": "lower middle element for even n"},
        "metrics": _summary_dict(evals) if evals else {},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    srows = []
    for name, m in summary["metrics"].items():
        srows.append({"metric": name, **m})
    write_csv(
        out_dir / "summary.csv",
        ["metric", "mean", "median", "std", "fraction", "sem_binomial", "n"],
        srows,
        comments=["std: population (ddof=0); median: lower middle element for even n"],
    )
    (out_dir / "summary.txt").write_text(_format_eval_summary(summary))
    return summary


def _format_eval_summary(summary: dict) -> str:
    lines = [f"evaluated images: {summary['n_evaluated']}"]
    for name, m in summary["metrics"].items():
        if "fraction" in m:
            lines.append(f"{name.upper():>10}: {m['fraction']:.4f} +- {m['sem_binomial']:.4f} (binomial SEM)")
        else:
            lines.append(
                f"{name.upper():>10}: mean {m['mean']:.4f}  median {m['median']:.4f}  std {m['std']:.4f}"
            )
    if summary["unmatched_predictions"] or summary["unmatched_truths"]:
        lines.append(
            f"unmatched: {len(summary['unmatched_predictions'])} predictions, "
            f"{len(summary['unmatched_truths'])} truths"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------
def _f(v: str) -> Optional[float]:
    return float(v) if v not in ("", None) else None


def _stats(values: List[float]) -> dict:
    if not values:
        return {"n": 0}
    s = sorted(values)
    mean = math.fsum(s) / len(s)
    return {
        "n": len(s),
        "mean": mean,
        "median": s[(len(s) - 1) // 2],
        "std": math.sqrt(math.fsum((v - mean) ** 2 for v in s) / len(s)),
    }


def growth_tables(measures_csv, out_dir, eval_csv=None, source: Optional[str] = None) -> dict:
    """Per-spheroid time series and, with evaluation rows, the accuracy
    versus target-diameter tables split at 400 µm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_csv(measures_csv)
    series = []
    for r in rows:
        if r.get("error"):
            continue
        if not r.get("day"):
            raise ValueError(f"{measures_csv}: row {r.get('image_id', '?')} has no day")
        if _f(r.get("diameter_um", "")) is None:
            continue
        series.append(
            {
                "spheroid_id": r.get("spheroid_id") or r.get("image_id", ""),
                "day": float(r["day"]),
                "diameter_um": float(r["diameter_um"]),
                "volume_um3": float(r["volume_um3"]),
                "circularity": _f(r.get("circularity", "")),
                "source": source or r.get("source") or "model",
            }
        )
    series.sort(key=lambda r: (r["spheroid_id"], r["day"]))
    for r in series:
        r["day"] = format_day(r["day"])
    write_csv(out_dir / "growth.csv", GROWTH_COLUMNS, series)
    result = {"n_points": len(series), "n_spheroids": len({r["spheroid_id"] for r in series})}

    eval_rows = read_csv(eval_csv) if eval_csv else [r for r in rows if r.get("d_T_um") and r.get("jcd")]
    if eval_rows:
        pts = sorted(
            (
                {
                    "image_id": r["image_id"],
                    "d_T_um": float(r["d_T_um"]),
                    "jcd": float(r["jcd"]),
                    "delta_r_um": float(r["delta_r_um"]),
                }
                for r in eval_rows
            ),
            key=lambda p: (p["d_T_um"], p["image_id"]),
        )
        write_csv(out_dir / "scatter_jcd_vs_dT.csv", ["image_id", "d_T_um", "jcd"], pts)
        write_csv(out_dir / "scatter_dr_vs_dT.csv", ["image_id", "d_T_um", "delta_r_um"], pts)
        large = [p for p in pts if p["d_T_um"] >= SIZE_SPLIT_UM]
        small = [p for p in pts if p["d_T_um"] < SIZE_SPLIT_UM]
        result["size_split"] = {
            "threshold_um": SIZE_SPLIT_UM,
            "n_at_or_above": len(large),
            "n_below": len(small),
            "all": {"jcd": _stats([p["jcd"] for p in pts]), "delta_r_um": _stats([p["delta_r_um"] for p in pts])},
            "at_or_above": {
                "jcd": _stats([p["jcd"] for p in large]),
                "delta_r_um": _stats([p["delta_r_um"] for p in large]),
            },
        }
    (out_dir / "growth_summary.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------
# compare-observers
# ---------------------------------------------------------------------
def compare_observers(wide_csv, out_dir, alpha: float = 0.005) -> dict:
    """Friedman + Dunn-Bonferroni over a wide CSV of per-image JCDs, one
    column per observer pair."""
    rows = read_csv(wide_csv)
    if not rows:
        raise ValueError(f"{wide_csv}: no rows")
    labels = [k for k in rows[0] if k != "image_id"]
    values = np.array([[float(r[k]) for k in labels] for r in rows])
    bm = BlockMatrix(values, tuple(labels))
    fr = friedman(bm)
    pairs = dunn_bonferroni(bm, alpha)
    ranking = rank_treatments(bm)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(
        out_dir / "observers_pairs.csv",
        ["a", "b", "z", "p_value", "p_adjusted", "significant"],
        [asdict(p) for p in pairs],
        comments=[f"alpha: {alpha}; Bonferroni over {len(pairs)} pairs"],
    )
    write_csv(
        out_dir / "observers_ranking.csv",
        ["rank", "label", "mean_jcd"],
        [{"rank": i + 1, "label": l, "mean_jcd": m} for i, (l, m) in enumerate(ranking)],
    )
    result = {
        "n_blocks": bm.n,
        "k_treatments": bm.k,
        "friedman_statistic": fr.statistic,
        "p_value": fr.p_value,
        "alpha": alpha,
        "ranking": [l for l, _ in ranking],
        "n_significant_pairs": sum(p.significant for p in pairs),
    }
    (out_dir / "observers.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------
def choose_transforms(n: int, seed: int) -> List[str]:
    rng = random.Random(seed)
    return [rng.choice(TRANSFORMS) for _ in range(n)]


def augment_dataset(index: DatasetIndex, out_dir, seed: int = 0) -> List[dict]:
    """One random flip/rotation per image/mask pair, written as
    ``<stem>__<transform>.png`` under ``images/`` and ``masks/``."""
    unpaired = [r.image_id for r in index if r.mask is None or not r.mask.is_file()]
    if unpaired:
        raise ValueError(f"images without a mask: {', '.join(unpaired)}")
    out_dir = Path(out_dir)
    picks = choose_transforms(len(index), seed)
    done = []
    for rec, t in zip(index, picks):
        img = load_image(rec.image, rec.scale_um_per_px)
        mask = load_mask(rec.mask, img.shape)
        a_img, a_mask = augment(img, mask, t)
        name = f"{rec.image_id}__{t}.png"
        save_image(a_img, out_dir / "images" / name)
        save_mask(a_mask, out_dir / "masks" / name)
        done.append({"image_id": rec.image_id, "transform": t, "file": name})
    write_csv(out_dir / "augment.csv", ["image_id", "transform", "file"], done, comments=[f"seed: {seed}"])
    return done


# ---------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------
def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--model", help="ONNX model file")
    p.add_argument("--config", help="model config JSON (default: sidecar next to the model)")
    p.add_argument("--scale-um-per-px", type=float, default=DEFAULT_SCALE_UM_PER_PX)
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: logical cores)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="spheroidseg", description="Tumor spheroid segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="segment images with an ONNX model")
    p.add_argument("dataset", help="manifest CSV or image directory")
    p.add_argument("--masks", help="ground-truth mask directory (overlay only)")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--backend", choices=["auto", "onnxruntime", "opencv"], default=None)

    p = sub.add_parser("otsu", parents=[common], help="Otsu-threshold baseline segmentation")
    p.add_argument("dataset")
    p.add_argument("--masks")
    p.add_argument("--erode", type=int, default=0, help="grayscale erosion iterations")
    p.add_argument("--polarity", choices=["dark", "bright"], default="dark")

    p = sub.add_parser("eval", parents=[common], help="score prediction masks against truth masks")
    p.add_argument("predictions")
    p.add_argument("truths")

    p = sub.add_parser("growth", parents=[common], help="growth curves and accuracy vs. diameter tables")
    p.add_argument("measures")
    p.add_argument("--eval", dest="eval_csv")
    p.add_argument("--source", choices=["model", "manual", "otsu"])

    p = sub.add_parser("compare-observers", parents=[common], help="Friedman + Dunn-Bonferroni on JCD sets")
    p.add_argument("table", help="wide CSV: image_id, <pair1>, <pair2>, ...")
    p.add_argument("--alpha", type=float, default=0.005)

    p = sub.add_parser("augment", parents=[common], help="random flip/rot180 per image/mask pair")
    p.add_argument("dataset")
    p.add_argument("--masks")
    return parser


def _setup_logging(out_dir: Path, verbose: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    log.setLevel(logging.DEBUG)
    log.handlers.clear()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    fileh = logging.FileHandler(out_dir / "run.log")
    fileh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(console)
    log.addHandler(fileh)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir)
    _setup_logging(out_dir, args.verbose)
    workers = args.workers or default_workers()
    log.info("spheroidseg %s: %s", __version__, " ".join(sys.argv[1:] if argv is None else argv))
    try:
        if args.command == "segment":
            if not args.model:
                raise SystemExit("segment needs --model")
            cfg = ModelConfig.for_model(args.model, args.config, threshold=args.threshold, backend=args.backend)
            index = load_dataset(args.dataset, args.masks, args.scale_um_per_px)
            _, code = segment_dataset(index, out_dir, "model", config=cfg, workers=workers)
            print((out_dir / "summary.txt").read_text(), end="")
            return code
        if args.command == "otsu":
            params = OtsuParams(args.erode, f"{args.polarity}_foreground")
            index = load_dataset(args.dataset, args.masks, args.scale_um_per_px)
            _, code = segment_dataset(index, out_dir, "otsu", otsu=params, workers=workers)
            print((out_dir / "summary.txt").read_text(), end="")
            return code
        if args.command == "eval":
            summary = evaluate_dirs(args.predictions, args.truths, out_dir, args.scale_um_per_px, workers)
            print((out_dir / "summary.txt").read_text(), end="")
            return 2 if summary["errors"] else 0
        if args.command == "growth":
            result = growth_tables(args.measures, out_dir, args.eval_csv, args.source)
            print(json.dumps(result, indent=2))
            return 0
        if args.command == "compare-observers":
            result = compare_observers(args.table, out_dir, args.alpha)
            print(f"Friedman statistic {result['friedman_statistic']:.4g}, p = {result['p_value']:.3g}")
            print("ascending mean JCD: " + ", ".join(result["ranking"]))
            return 0
        if args.command == "augment":
            index = load_dataset(args.dataset, args.masks, args.scale_um_per_px)
            done = augment_dataset(index, out_dir, args.seed)
            print(f"wrote {len(done)} augmented pairs to {out_dir}")
            return 0
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
