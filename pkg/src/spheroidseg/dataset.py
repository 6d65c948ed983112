"""
Dataset manifests, directory scanning and the CSV conventions shared by all
commands.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from .imgio import DEFAULT_SCALE_UM_PER_PX

__all__ = [
    "SCHEMA_VERSION",
    "Record",
    "DatasetIndex",
    "parse_stem",
    "load_manifest",
    "scan_directory",
    "load_dataset",
    "write_csv",
    "read_csv",
    "format_day",
]

SCHEMA_VERSION = 1
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")

# <spheroid id>_d<day>, e.g. "FaDu_A03_d12" or "s17_d3.5"
_STEM = re.compile(r"^(?P<sid>.+)_d(?P<day>\d+(?:\.\d+)?)$")


@dataclass(frozen=True)
class Record:
    image_id: str
    image: Path
    mask: Optional[Path] = None
    spheroid_id: str = ""
    day: Optional[float] = None
    scale_um_per_px: float = DEFAULT_SCALE_UM_PER_PX


@dataclass
class DatasetIndex:
    records: List[Record]
    source: str = "manifest"

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.image_id)
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ValueError(f"duplicate image id {r.image_id!r}")
            seen.add(r.image_id)
        keyed = [(r.spheroid_id, r.day) for r in self.records if r.spheroid_id and r.day is not None]
        if len(keyed) != len(set(keyed)):
            raise ValueError("(spheroid_id, day) pairs must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def missing_files(self) -> List[Path]:
        out = []
        for r in self.records:
            out.extend(p for p in (r.image, r.mask) if p is not None and not p.is_file())
        return out


def parse_stem(stem: str):
    """``(spheroid_id, day)`` from a ``<id>_d<day>`` file stem, else
    ``(stem, None)``."""
    m = _STEM.match(stem)
    if not m:
        return stem, None
    return m.group("sid"), float(m.group("day"))


def format_day(day: Optional[float]) -> str:
    if day is None:
        return ""
    return str(int(day)) if float(day).is_integer() else repr(float(day))


def load_manifest(path, default_scale: float = DEFAULT_SCALE_UM_PER_PX) -> DatasetIndex:
    """Read a manifest CSV.

    Required column: ``image``.  Optional: ``image_id``, ``mask``,
    ``spheroid_id``, ``day``, ``scale_um_per_px``.  Relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    rows = read_csv(path)
    if rows and "image" not in rows[0]:
        raise ValueError(f"{path}: manifest needs an 'image' column")
    records = []
    for row in rows:
        image = base / row["image"]
        stem_sid, stem_day = parse_stem(image.stem)
        day = row.get("day") or ""
        records.append(
            Record(
                image_id=row.get("image_id") or image.stem,
                image=image,
                mask=(base / row["mask"]) if row.get("mask") else None,
                spheroid_id=row.get("spheroid_id") or stem_sid,
                day=float(day) if day != "" else stem_day,
                scale_um_per_px=float(row.get("scale_um_per_px") or default_scale),
            )
        )
    return DatasetIndex(records, source="manifest")


def _images_in(directory: Path) -> Dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def scan_directory(
    images_dir, masks_dir=None, default_scale: float = DEFAULT_SCALE_UM_PER_PX
) -> DatasetIndex:
    """Build an index from a directory of ``<id>_d<day>.png`` style files.

    Masks, when ``masks_dir`` is given, are matched by file stem.
    """
    images = _images_in(Path(images_dir))
    masks = _images_in(Path(masks_dir)) if masks_dir else {}
    records = []
    for stem, p in images.items():
        sid, day = parse_stem(stem)
        records.append(Record(stem, p, masks.get(stem), sid, day, default_scale))
    return DatasetIndex(records, source="directory")


def load_dataset(source, masks_dir=None, default_scale: float = DEFAULT_SCALE_UM_PER_PX) -> DatasetIndex:
    """Manifest CSV if ``source`` is a file, directory scan otherwise."""
    source = Path(source)
    if source.is_file():
        return load_manifest(source, default_scale)
    if source.is_dir():
        return scan_directory(source, masks_dir, default_scale)
    raise FileNotFoundError(f"dataset not found: {source}")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[dict], comments: Sequence[str] = ()) -> Path:
    """Write rows with a ``# schema-version`` line, optional extra ``#``
    comment lines, then the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# schema-version: {SCHEMA_VERSION}\n")
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(row.get(h)) for h in header])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> List[dict]:
    """Rows of a CSV as dicts; lines starting with ``#`` are skipped."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k.strip(): (v or "").strip() for k, v in row.items()} for row in csv.DictReader(lines)]
