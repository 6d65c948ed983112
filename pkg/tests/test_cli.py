import json
import math
from collections import Counter

import cv2
import numpy as np
import pytest

from conftest import write_sample_dataset
from oracles import disk
from spheroidseg import cli
from spheroidseg.dataset import (
    DatasetIndex,
    Record,
    format_day,
    load_dataset,
    load_manifest,
    parse_stem,
    read_csv,
    write_csv,
)
from spheroidseg.imgio import TRANSFORMS, augment, load_image, load_mask, save_mask


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "run.log"}


def _first_line(path):
    return path.read_text().splitlines()[0]


# ---------------------------------------------------------------- dataset
@pytest.mark.parametrize(
    "stem,expected",
    [("s1_d3", ("s1", 3.0)), ("FaDu_A03_d12", ("FaDu_A03", 12.0)), ("x_d2.5", ("x", 2.5)), ("plain", ("plain", None))],
)
def test_parse_stem(stem, expected):
    assert parse_stem(stem) == expected


def test_format_day():
    assert (format_day(3.0), format_day(2.5), format_day(None)) == ("3", "2.5", "")


def test_manifest_loading(tmp_path):
    (tmp_path / "m.csv").write_text("image,mask,spheroid_id,day\nimg/a.png,msk/a.png,A,3\nimg/b_d7.png,,,\n")
    idx = load_manifest(tmp_path / "m.csv", default_scale=1.5)
    a, b = idx.records
    assert (a.image_id, a.spheroid_id, a.day, a.mask) == ("a", "A", 3.0, tmp_path / "msk/a.png")
    assert (b.spheroid_id, b.day, b.mask, b.scale_um_per_px) == ("b", 7.0, None, 1.5)
    assert set(idx.missing_files()) == {tmp_path / "img/a.png", tmp_path / "msk/a.png", tmp_path / "img/b_d7.png"}


def test_manifest_requires_image_column(tmp_path):
    (tmp_path / "m.csv").write_text("file\nx.png\n")
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "m.csv")


def test_index_uniqueness(tmp_path):
    with pytest.raises(ValueError):
        DatasetIndex([Record("a", tmp_path / "a"), Record("a", tmp_path / "b")])
    with pytest.raises(ValueError):
        DatasetIndex([Record("a", tmp_path / "a", None, "s", 1.0), Record("b", tmp_path / "b", None, "s", 1.0)])


def test_directory_scan(tmp_path):
    img_dir, mask_dir = write_sample_dataset(tmp_path, n=3, width=64, height=48)
    idx = load_dataset(img_dir, mask_dir)
    assert idx.source == "directory"
    assert [r.image_id for r in idx] == ["s0_d1", "s0_d4", "s0_d8"]
    assert all(r.mask is not None for r in idx) and [r.day for r in idx] == [1.0, 4.0, 8.0]
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_csv_conventions(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["a", "b", "c"], [{"a": 1, "b": np.float64(0.1), "c": True}], ["note"])
    lines = p.read_text().splitlines()
    assert lines[:3] == ["# schema-version: 1", "# note", "a,b,c"]
    assert lines[3] == "1,0.1,1"
    assert read_csv(p) == [{"a": "1", "b": "0.1", "c": "1"}]


# ---------------------------------------------------------------- segment
@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return write_sample_dataset(root, n=4, width=320, height=240)


def test_segment_outputs(small_data, small_model, tmp_path):
    img_dir, mask_dir = small_data
    out = tmp_path / "out"
    code = cli.main(["segment", str(img_dir), "--masks", str(mask_dir), "--model", str(small_model),
                     "--workers", "1", "--out-dir", str(out)])
    assert code == 0
    assert len(list((out / "masks").glob("*.png"))) == 4
    assert len(list((out / "overlays").glob("*.png"))) == 4
    assert len(list((out / "chains").glob("*.json"))) == 4
    assert _first_line(out / "measures.csv") == "# schema-version: 1"
    rows = read_csv(out / "measures.csv")
    assert [r["image_id"] for r in rows] == sorted(r["image_id"] for r in rows)
    for r in rows:
        assert r["error"] == ""
        d = float(r["diameter_um"])
        assert float(r["volume_um3"]) == pytest.approx(math.pi * d**3 / 6, rel=1e-12)
        truth = load_mask(mask_dir / f"{r['image_id']}.png")
        pred = load_mask(out / "masks" / f"{r['image_id']}.png")
        assert (pred & truth).sum() / (pred | truth).sum() > 0.9
    chains = json.loads((out / "chains" / "s0_d1.json").read_text())
    assert chains["image_id"] == "s0_d1" and chains["chains"][0]["closed"] is True
    ov = cv2.imread(str(out / "overlays" / "s0_d1.png"))[:, :, ::-1]
    assert ((ov == [0, 0, 255]).all(axis=2)).any()  # prediction in blue
    assert ((ov == [0, 255, 0]).all(axis=2)).any()  # truth in green
    assert "run.log" in {p.name for p in out.iterdir()}
    assert json.loads((out / "summary.json").read_text())["n_ok"] == 4


def test_segment_idempotent_and_worker_independent(small_data, small_model, tmp_path):
    img_dir, mask_dir = small_data
    outs = []
    for name, workers in (("a", "1"), ("b", "1"), ("c", "3")):
        out = tmp_path / name
        assert cli.main(["segment", str(img_dir), "--masks", str(mask_dir), "--model", str(small_model),
                         "--workers", workers, "--out-dir", str(out)]) == 0
        outs.append(_files(out))
    assert outs[0] == outs[1] == outs[2]


def test_segment_missing_file(small_data, small_model, tmp_path):
    img_dir, _ = small_data
    manifest = tmp_path / "m.csv"
    manifest.write_text(f"image\n{img_dir / 's0_d1.png'}\n{tmp_path / 'gone_d2.png'}\n")
    out = tmp_path / "out"
    code = cli.main(["segment", str(manifest), "--model", str(small_model), "--workers", "1", "--out-dir", str(out)])
    assert code == 2
    rows = {r["image_id"]: r for r in read_csv(out / "measures.csv")}
    assert rows["gone_d2"]["error"] == "missing_file" and rows["s0_d1"]["error"] == ""


def test_segment_requires_model(small_data, tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["segment", str(small_data[0]), "--out-dir", str(tmp_path)])


def test_otsu_command(small_data, tmp_path):
    img_dir, mask_dir = small_data
    out = tmp_path / "otsu"
    assert cli.main(["otsu", str(img_dir), "--erode", "1", "--workers", "1", "--out-dir", str(out)]) == 0
    rows = read_csv(out / "measures.csv")
    assert len(rows) == 4 and {r["source"] for r in rows} == {"otsu"}
    for r in rows:
        truth = load_mask(mask_dir / f"{r['image_id']}.png")
        pred = load_mask(out / "masks" / f"{r['image_id']}.png")
        assert (pred & truth).sum() / (pred | truth).sum() > 0.9


# ---------------------------------------------------------------- eval
def _mask_dirs(tmp_path, n=10, disjoint=()):
    pred, truth = tmp_path / "pred", tmp_path / "truth"
    for i in range(n):
        t = disk(80, 15 + i, 40, 40)
        p = disk(80, 6, 70, 70) if i in disjoint else t
        save_mask(t, truth / f"s{i}_d1.png")
        save_mask(p, pred / f"s{i}_d1.png")
    return pred, truth


def test_eval_identity(tmp_path):
    pred, truth = _mask_dirs(tmp_path)
    out = tmp_path / "ev"
    assert cli.main(["eval", str(pred), str(truth), "--workers", "1", "--out-dir", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["metrics"]["jcd"]["mean"] == 0.0
    assert s["metrics"]["isf"]["fraction"] == 0.0 and s["metrics"]["asf"]["fraction"] == 0.0
    assert _first_line(out / "eval.csv") == "# schema-version: 1"
    assert _first_line(out / "summary.csv") == "# schema-version: 1"
    assert read_csv(out / "eval.csv")[0].keys() == set(cli.EVAL_COLUMNS)


def test_eval_one_disjoint_in_ten(tmp_path):
    pred, truth = _mask_dirs(tmp_path, disjoint={3})
    s = cli.evaluate_dirs(pred, truth, tmp_path / "ev", scale=1.0)
    assert s["metrics"]["isf"]["fraction"] == pytest.approx(0.1, abs=1e-15)
    assert s["metrics"]["isf"]["sem_binomial"] == pytest.approx(math.sqrt(0.09 / 10), rel=1e-12)
    assert s["metrics"]["isf"]["sem_binomial"] == pytest.approx(0.0949, abs=1e-4)
    # 9 zeros and a single 1: lower median of an even count is 0
    assert s["metrics"]["jcd"]["median"] == 0.0


def test_eval_unmatched_skipped(tmp_path):
    pred, truth = _mask_dirs(tmp_path, n=3)
    save_mask(disk(80, 10), pred / "extra_d1.png")
    s = cli.evaluate_dirs(pred, truth, tmp_path / "ev", scale=1.0)
    assert s["n_evaluated"] == 3 and s["unmatched_predictions"] == ["extra_d1"]


def test_eval_worker_independent(tmp_path):
    pred, truth = _mask_dirs(tmp_path, disjoint={2})
    cli.evaluate_dirs(pred, truth, tmp_path / "a", workers=1)
    cli.evaluate_dirs(pred, truth, tmp_path / "b", workers=3)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


# ---------------------------------------------------------------- growth
def test_growth_single_spheroid(tmp_path):
    rows = [
        {"image_id": f"s_d{d}", "spheroid_id": "s", "day": d, "diameter_um": 300.0 + d, "volume_um3": 1.0, "circularity": 0.9, "error": ""}
        for d in (8, 1, 4)
    ]
    write_csv(tmp_path / "m.csv", ["image_id", "spheroid_id", "day", "diameter_um", "volume_um3", "circularity", "error"], rows)
    res = cli.growth_tables(tmp_path / "m.csv", tmp_path / "g")
    g = read_csv(tmp_path / "g" / "growth.csv")
    assert [r["day"] for r in g] == ["1", "4", "8"]
    assert res["n_points"] == 3 and "size_split" not in res
    assert not (tmp_path / "g" / "scatter_jcd_vs_dT.csv").exists()


def test_growth_size_split(tmp_path):
    m = tmp_path / "m.csv"
    write_csv(m, ["image_id", "spheroid_id", "day", "diameter_um", "volume_um3"],
              [{"image_id": f"a_d{i}", "spheroid_id": "a", "day": i, "diameter_um": 1.0, "volume_um3": 1.0} for i in range(5)])
    e = tmp_path / "e.csv"
    dts = [120.0, 399.99, 400.0, 650.0, 900.0]
    write_csv(e, ["image_id", "d_T_um", "jcd", "delta_r_um"],
              [{"image_id": f"a_d{i}", "d_T_um": d, "jcd": 0.1 * i, "delta_r_um": float(i)} for i, d in enumerate(dts)])
    res = cli.growth_tables(m, tmp_path / "g", eval_csv=e)
    assert res["size_split"]["n_at_or_above"] == 3 and res["size_split"]["n_below"] == 2
    assert res["size_split"]["at_or_above"]["jcd"]["mean"] == pytest.approx(0.3, abs=1e-12)
    sc = read_csv(tmp_path / "g" / "scatter_dr_vs_dT.csv")
    assert [float(r["d_T_um"]) for r in sc] == dts


def test_growth_missing_day(tmp_path):
    m = tmp_path / "m.csv"
    write_csv(m, ["image_id", "day", "diameter_um", "volume_um3"], [{"image_id": "x", "day": "", "diameter_um": 1.0, "volume_um3": 1.0}])
    with pytest.raises(ValueError):
        cli.growth_tables(m, tmp_path / "g")
    assert cli.main(["growth", str(m), "--out-dir", str(tmp_path / "g2")]) == 1


# ---------------------------------------------------------------- observers
def test_compare_observers(tmp_path, rng):
    labels = ["H1~H2", "H1~U-Net", "H2~U-Net"]
    vals = rng.random((40, 3)) * 0.1
    vals[:, 1] += 0.2
    rows = [{"image_id": f"i{k}", **{l: vals[k, j] for j, l in enumerate(labels)}} for k in range(40)]
    write_csv(tmp_path / "w.csv", ["image_id"] + labels, rows)
    out = tmp_path / "obs"
    assert cli.main(["compare-observers", str(tmp_path / "w.csv"), "--out-dir", str(out)]) == 0
    res = json.loads((out / "observers.json").read_text())
    assert res["ranking"][-1] == "H1~U-Net" and res["alpha"] == 0.005
    pairs = read_csv(out / "observers_pairs.csv")
    assert len(pairs) == 3
    sig = {(p["a"], p["b"]) for p in pairs if p["significant"] == "1"}
    assert ("H1~H2", "H1~U-Net") in sig and ("H1~U-Net", "H2~U-Net") in sig


# ---------------------------------------------------------------- augment
def test_transform_choice_seeded_and_uniform():
    a = cli.choose_transforms(10_000, seed=7)
    assert a == cli.choose_transforms(10_000, seed=7)
    assert a != cli.choose_transforms(10_000, seed=8)
    counts = Counter(a)
    assert set(counts) == set(TRANSFORMS)
    for t in TRANSFORMS:
        assert abs(counts[t] / 10_000 - 1 / 3) <= 0.02


def test_augment_command(tmp_path):
    img_dir, mask_dir = write_sample_dataset(tmp_path / "d", n=5, width=48, height=40)
    out = tmp_path / "aug"
    assert cli.main(["augment", str(img_dir), "--masks", str(mask_dir), "--seed", "3", "--out-dir", str(out)]) == 0
    rows = read_csv(out / "augment.csv")
    assert len(rows) == 5 == len(list((out / "images").glob("*.png"))) == len(list((out / "masks").glob("*.png")))
    for r in rows:
        src = load_image(img_dir / f"{r['image_id']}.png")
        msk = load_mask(mask_dir / f"{r['image_id']}.png")
        ref_img, ref_mask = augment(src, msk, r["transform"])
        assert np.array_equal(load_image(out / "images" / r["file"]).pixels, ref_img.pixels)
        assert np.array_equal(load_mask(out / "masks" / r["file"]), ref_mask)
    assert [r["transform"] for r in rows] == cli.choose_transforms(5, 3)


def test_augment_unpaired(tmp_path):
    img_dir, mask_dir = write_sample_dataset(tmp_path / "d", n=2, width=32, height=32)
    (mask_dir / "s0_d4.png").unlink()
    assert cli.main(["augment", str(img_dir), "--masks", str(mask_dir), "--out-dir", str(tmp_path / "a")]) == 1


def test_augment_count_883():
    assert len(cli.choose_transforms(883, 0)) == 883
