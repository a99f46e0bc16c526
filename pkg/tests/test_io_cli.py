import json

import numpy as np
import pytest

from regimes import cli
from regimes.io import (
    IngestError, export_heatmap_data, heatmap_rows, ingest, read_counts_tsv, read_heatmap_tsv,
    write_counts_tsv,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def toy(tmp_path):
    species = ["a", "b", "c"]
    times = [0.0, 1.5, 3.0, 7.25]
    counts = np.array([[0, 1.5, 2, 0], [3, 0, 0, 0], [1, 1, 1, 1e-3]])
    write_counts_tsv(tmp_path / "s1.tsv", species, times, counts)
    return tmp_path, species, times, counts


class TestIngest:
    def test_round_trip(self, toy):
        d, species, times, counts = toy
        p = ingest([d / "s1.tsv"], prevalence=0.0)
        write_counts_tsv(d / "again.tsv", p.species, p.times[0], p.counts[0])
        assert (d / "again.tsv").read_bytes() == (d / "s1.tsv").read_bytes()
        np.testing.assert_array_equal(read_counts_tsv(d / "again.tsv")[2], counts)

    def test_prevalence_threshold_one(self, toy):
        d, *_ = toy
        assert ingest([d / "s1.tsv"], prevalence=1.0).species == ["c"]

    def test_prevalence_default_hand_count(self, tmp_path):
        # positives out of 10 samples: a 2, b 1, c 10, d 0 -> keep a, c
        rows = ["species\t" + "\t".join(str(i) for i in range(10))]
        rows.append("a\t" + "\t".join(["1", "1"] + ["0"] * 8))
        rows.append("b\t" + "\t".join(["1"] + ["0"] * 9))
        rows.append("c\t" + "\t".join(["2"] * 10))
        rows.append("d\t" + "\t".join(["0"] * 10))
        _write(tmp_path / "x.tsv", "\n".join(rows) + "\n")
        assert ingest([tmp_path / "x.tsv"]).species == ["a", "c"]

    def test_malformed_row_reports_line(self, tmp_path):
        f = _write(tmp_path / "bad.tsv", "species\t0\t1\nx\t1\t2\ny\t1\toops\n")
        with pytest.raises(IngestError, match=r"bad.tsv:3"):
            ingest([f])
        f2 = _write(tmp_path / "short.tsv", "species\t0\t1\nx\t1\n")
        with pytest.raises(IngestError, match=r":2: expected 3 fields"):
            ingest([f2])

    def test_nonnumeric_time_header(self, tmp_path):
        f = _write(tmp_path / "h.tsv", "species\tday0\n")
        with pytest.raises(IngestError, match=":1"):
            read_counts_tsv(f)

    def test_unknown_taxonomy_warns(self, toy):
        d, *_ = toy
        tax = _write(d / "tax.tsv", "species\tfamily\na\tF\nzzz\tG\n")
        with pytest.warns(RuntimeWarning, match="zzz"):
            p = ingest([d / "s1.tsv"], tax, prevalence=0.0)
        assert p.taxonomy["a"] == "F"

    def test_zero_fill_across_subjects(self, tmp_path):
        write_counts_tsv(tmp_path / "A.tsv", ["x"], [0.0, 1.0], [[1, 2]])
        write_counts_tsv(tmp_path / "B.tsv", ["y"], [0.0], [[5]])
        p = ingest({"A": tmp_path / "A.tsv", "B": tmp_path / "B.tsv"}, prevalence=0.0)
        assert p.species == ["x", "y"]
        np.testing.assert_array_equal(p.counts[1], [[0], [5]])


class TestHeatmapExport:
    def test_single_cell(self, tmp_path):
        n = export_heatmap_data(tmp_path / "h.tsv", [("s", ["a"], [0.0], [[1.0]], "v")])
        assert n == 1
        assert read_heatmap_tsv(tmp_path / "h.tsv") == [("s", "a", 0.0, 1.0, "v")]

    def test_row_count_and_order(self):
        rows = heatmap_rows("s", ["a", "b", "c"], [0.0, 1.0], np.arange(6.0).reshape(3, 2), "k")
        assert len(rows) == 6
        assert [(r[1], r[2]) for r in rows] == [(s, t) for s in "abc" for t in (0.0, 1.0)]

    def test_twelve_digit_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(2, 3)) * 10.0 ** rng.integers(-5, 5, size=(2, 3))
        v[0, 0] = np.nan
        export_heatmap_data(tmp_path / "h.tsv", [("s", ["a", "b"], [0.0, 1.0, 2.0], v, "k")])
        back = np.array([r[3] for r in read_heatmap_tsv(tmp_path / "h.tsv")]).reshape(2, 3)
        assert np.isnan(back[0, 0])
        np.testing.assert_allclose(back[~np.isnan(v)], v[~np.isnan(v)], rtol=5e-12)


def _config(tmp_path, method, params=None, **extra):
    cfg = {"input": {"counts": ["s1.tsv"], "prevalence": 0.0}, "params": params or {}}
    cfg.update(extra)
    p = tmp_path / f"{method}.json"
    p.write_text(json.dumps(cfg))
    return p


def _outputs(d):
    return json.loads((d / "manifest.json").read_text())["outputs"]


class TestCli:
    def test_unknown_key_rejected(self, toy):
        d, *_ = toy
        cfg = _config(d, "gp", {"lenghtscale": 2.0})
        assert cli.main(["gp", "--config", str(cfg), "--out", str(d / "o")]) == cli.EXIT_CONFIG
        assert not (d / "o").exists()

    def test_unknown_top_level_key(self, toy):
        d, *_ = toy
        cfg = _config(d, "hclust", extra=1)
        assert cli.main(["hclust", "--config", str(cfg), "--out", str(d / "o")]) == 2

    def test_bad_type(self, toy):
        d, *_ = toy
        cfg = _config(d, "hmm-em", {"K": "two"})
        assert cli.main(["hmm-em", "--config", str(cfg), "--out", str(d / "o")]) == 2

    def test_missing_input_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"input": {"counts": ["nope.tsv"]}}))
        assert cli.main(["hclust", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_numerical_failure_exit_code(self, toy, monkeypatch):
        d, *_ = toy
        from regimes._stats import NumericalError

        def boom(*a):
            raise NumericalError("singular")
        monkeypatch.setitem(cli.RUNNERS, "gp", boom)
        cfg = _config(d, "gp")
        assert cli.main(["gp", "--config", str(cfg), "--out", str(d / "o")]) == 3
        assert not (d / "o").exists()

    def test_manifest_and_determinism(self, toy):
        d, *_ = toy
        cfg = _config(d, "basic", {"iterations": 10, "eb_rounds": 0})
        for out in ("o1", "o2"):
            assert cli.main(["basic", "--config", str(cfg), "--out", str(d / out), "--seed", "4"]) == 0
        m = json.loads((d / "o1" / "manifest.json").read_text())
        assert set(m) >= {"config_hash", "seed", "versions", "outputs", "timings_seconds"}
        assert m["config"]["params"]["grid"] == 50
        assert _outputs(d / "o1") == _outputs(d / "o2")
        for name in m["outputs"]:
            assert (d / "o1" / name).read_bytes() == (d / "o2" / name).read_bytes()

    def test_seed_changes_sampler_not_ingest(self, toy):
        d, *_ = toy
        cfg = _config(d, "hclust")
        cli.main(["hclust", "--config", str(cfg), "--out", str(d / "h1"), "--seed", "1"])
        cli.main(["hclust", "--config", str(cfg), "--out", str(d / "h2"), "--seed", "2"])
        assert _outputs(d / "h1") == _outputs(d / "h2")
        cfg = _config(d, "imgpe", {"iterations": 6, "burn_in": 1})
        cli.main(["imgpe", "--config", str(cfg), "--out", str(d / "i1"), "--seed", "1"])
        cli.main(["imgpe", "--config", str(cfg), "--out", str(d / "i2"), "--seed", "2"])
        assert _outputs(d / "i1") != _outputs(d / "i2")

    def test_threads_do_not_change_outputs(self, toy):
        d, *_ = toy
        cfg = _config(d, "lds-demo", {"iterations": 8, "burn_in": 2})
        cli.main(["lds-demo", "--config", str(cfg), "--out", str(d / "t1"), "--threads", "1"])
        cli.main(["lds-demo", "--config", str(cfg), "--out", str(d / "t3"), "--threads", "3"])
        assert _outputs(d / "t1") == _outputs(d / "t3")

    @pytest.mark.parametrize("method,params", [
        ("hclust", {"k": 2}), ("cart", {"min_leaf": 1, "max_splits": 3}),
        ("gp", {"budget": 5}), ("hmm-em", {"K": 2}),
        ("hmm-sticky", {"iterations": 6, "burn_in": 2}),
        ("hdp-hmm", {"iterations": 6, "burn_in": 2, "L": 3}),
        ("slds", {"iterations": 6, "burn_in": 2}),
    ])
    def test_every_method_runs(self, toy, method, params):
        d, *_ = toy
        cfg = _config(d, method, params)
        assert cli.main([method, "--config", str(cfg), "--out", str(d / method)]) == 0
        assert len(_outputs(d / method)) >= 1
