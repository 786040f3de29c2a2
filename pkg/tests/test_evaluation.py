import csv
import io
import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfcollage.backbone import BackboneSpec, load_backbone
from selfcollage.datasets import EvalRecord
from selfcollage.evaluation import (CCConfig, ConstantPredictor, SplitBounds, UndefinedCorrelation,
                                    average_baseline, connected_components_count, count_components,
                                    evaluate, grid_configs, grid_search_cc, kendall_tau, mae,
                                    retained_mass_mask, rmse, split_by_count)
from selfcollage.io import write_image


def brute_tau_b(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx == dy:
                conc += 1
            else:
                disc += 1
    return (conc - disc) / np.sqrt((conc + disc + tx) * (conc + disc + ty))


def flood_fill_count(binary, min_size=0):
    h, w = binary.shape
    seen = np.zeros_like(binary, bool)
    count = 0
    for i in range(h):
        for j in range(w):
            if binary[i, j] and not seen[i, j]:
                size, queue = 0, deque([(i, j)])
                seen[i, j] = True
                while queue:
                    a, b = queue.popleft()
                    size += 1
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        u, v = a + da, b + db
                        if 0 <= u < h and 0 <= v < w and binary[u, v] and not seen[u, v]:
                            seen[u, v] = True
                            queue.append((u, v))
                count += size > min_size
    return count


def test_mae_rmse_examples():
    assert mae([1, 2], [1, 2]) == 0 and rmse([1, 2], [1, 2]) == 0
    assert mae([2, 4], [3, 3]) == 1.0 and rmse([2, 4], [3, 3]) == 1.0
    assert mae([0, 4], [0, 0]) == 2.0 and rmse([0, 4], [0, 0]) == pytest.approx(2 * np.sqrt(2))
    with pytest.raises(ValueError):
        mae([1], [1, 2])


def test_tau_extremes():
    assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1)
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1)
    with pytest.raises(UndefinedCorrelation):
        kendall_tau([5, 5, 5], [1, 2, 3])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_tau_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 8, 30).astype(float)
    y = rng.integers(0, 8, 30).astype(float)
    if len(set(x)) == 1 or len(set(y)) == 1:
        return
    assert abs(kendall_tau(x, y) - brute_tau_b(x, y)) <= 1e-12


def test_split_routing():
    recs = [EvalRecord("", [], c) for c in (7, 8, 16, 17, 40, 41, 3701, 5000)]
    parts = split_by_count(recs)
    names = {r.count: k for k, v in parts.items() for r in v}
    assert names == {7: "other", 8: "low", 16: "low", 17: "medium", 40: "medium", 41: "high",
                     3701: "high", 5000: "other"}
    assert sum(len(v) for v in parts.values()) == len(recs)


def test_average_baseline():
    p = average_baseline([EvalRecord("", [], 5)] * 3)
    assert p.count(None) == 5
    truths = np.array([3, 9, 12, 30])
    assert mae([truths.mean()] * 4, truths) >= mae(truths, truths)


def test_retained_mass_mask():
    a = np.array([[0.5, 0.3], [0.15, 0.05]])
    assert retained_mass_mask(a, 0.7).tolist() == [[True, True], [False, False]]
    assert retained_mass_mask(a, 0.81).sum() == 3
    assert retained_mass_mask(np.zeros((2, 2)), 0.5).sum() == 0


def test_cc_single_blob_and_three_blobs():
    heads = np.zeros((12, 10, 10))
    heads[:, 2:6, 2:6] = 1
    assert connected_components_count(heads, CCConfig(0.99, 12, 0)) == 1
    heads = np.zeros((12, 10, 10))
    for y, x in ((0, 0), (5, 5), (0, 7)):
        heads[:, y:y + 2, x:x + 2] = 1
    assert connected_components_count(heads, CCConfig(0.99, 10, 0)) == 3 == flood_fill_count(heads[0] > 0)
    with pytest.raises(ValueError):
        connected_components_count(heads[:4], CCConfig(0.7, 10, 0))


def test_components_match_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = rng.random((12, 15)) < rng.uniform(0.2, 0.6)
        frac = float(rng.choice([0.0, 0.01, 0.02]))
        assert count_components(b, frac) == flood_fill_count(b, frac * b.size)


def test_grid_has_792_configs():
    configs = grid_configs(12)
    assert len(configs) == 11 * 12 * 6 == 792
    assert len(set(configs)) == 792
    assert len(grid_configs(4)) == 11 * 4 * 6


@pytest.fixture(scope="module")
def shape_records(tmp_path_factory):
    d = tmp_path_factory.mktemp("cc")
    rng = np.random.default_rng(0)
    recs = []
    for i in range(6):
        img = np.full((64, 64, 3), 20, np.uint8)
        n = int(rng.integers(1, 4))
        for k in range(n):
            img[8 + 20 * k:18 + 20 * k, 10 + 15 * k:20 + 15 * k] = 240
        write_image(d / f"{i}.png", img)
        recs.append(EvalRecord(str(d / f"{i}.png"), [(10, 8, 10, 10)], n, extra={"id": i}))
    return recs


def test_grid_search(shape_records):
    backbone = load_backbone(BackboneSpec("handcrafted", patch_size=8))
    one = [CCConfig(0.5, 1, 0.0)]
    res = grid_search_cc(shape_records, backbone, one, input_size=64)
    assert res.best == one[0] and len(res.table) == 1
    res = grid_search_cc(shape_records, backbone, input_size=64)
    assert len(res.table) == 66
    assert res.best_mae == min(r["mae"] for r in res.table)
    rows = list(csv.DictReader(io.StringIO(res.to_csv())))
    assert len(rows) == 66


class OraclePredictor:
    """Reads the count painted into the top-left pixel."""

    def count(self, image, boxes):
        return float(image[0, 0, 0])


def _records(tmp_path, counts):
    recs = []
    for i, c in enumerate(counts):
        img = np.zeros((16, 16, 3), np.uint8)
        img[0, 0, 0] = c
        write_image(tmp_path / f"{i}.png", img)
        recs.append(EvalRecord(str(tmp_path / f"{i}.png"), [(0, 0, 4, 4)], c, extra={"id": i}))
    return recs


def test_evaluate_oracle_and_constant(tmp_path):
    recs = _records(tmp_path, [8, 12, 20, 33, 45, 90])
    rep = evaluate(OraclePredictor(), recs)
    assert rep.splits["all"] == {"mae": 0.0, "rmse": 0.0, "tau": pytest.approx(1.0), "n_images": 6}
    assert rep.splits["low"]["n_images"] == 2
    with pytest.raises(UndefinedCorrelation):
        evaluate(ConstantPredictor(20), recs)
    rep = evaluate(ConstantPredictor(20), recs, strict_tau=False)
    assert rep.splits["all"]["tau"] is None


def test_report_matches_per_image_rows(tmp_path):
    recs = _records(tmp_path, [8, 12, 20, 33])
    recs.append(EvalRecord(str(tmp_path / "missing.png"), [(0, 0, 4, 4)], 3))

    class Noisy:
        def count(self, image, boxes):
            return float(image[0, 0, 0]) * 1.1

    rep = evaluate(Noisy(), recs)
    rows = rep.rows
    assert len(rep.skipped) == 1 and len(rows) == 4
    manual = sum(abs(r["pred"] - r["truth"]) for r in rows) / len(rows)
    assert rep.splits["all"]["mae"] == pytest.approx(manual)
    rep.write(tmp_path / "out")
    assert json.loads((tmp_path / "out" / "report.json").read_text())["splits"]["all"]["n_images"] == 4
    assert (tmp_path / "out" / "report.csv").read_text().startswith("id,truth,pred,path")


def test_cc_config_validation():
    with pytest.raises(ValueError):
        CCConfig(p_att=0)
    with pytest.raises(ValueError):
        CCConfig(connectivity=6)
