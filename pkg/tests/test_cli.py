"""End-to-end tests of the command line entry points, run in process."""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from lossrank.cli import JOBS_ENV_VAR, main
from lossrank.config import RunConfig, format_config, parse_config
from lossrank.data import load_dataset, split
from lossrank.evaluation import detections_from_map, eval_result_csv, evaluate
from lossrank.net import PARAM_NAMES, forward, load_checkpoint

BASE = RunConfig(grid_size=4, image_size=32, embed_dim=8, iterations=40,
                 batch_size=4, dataset_count=20, objects_min=1, objects_max=2,
                 learning_rate=0.01)
PREDICTIONS = BASE.grid_size * BASE.grid_size * BASE.anchor_count


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv_text(path: Path) -> str:
    # read_text would fold the \r\n row endings into \n
    return path.read_bytes().decode("ascii")


def read_log(path: Path) -> list:
    lines = read_csv_text(path).split("\r\n")
    assert lines[0] == "iter,grand_total,kept_count,fg_kept_fraction"
    assert lines[-1] == ""
    return [line.split(",") for line in lines[1:-1]]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Config file plus a generated dataset the training tests share."""
    root = tmp_path_factory.mktemp("cli")
    cfg = dataclasses.replace(BASE, data_dir=str(root / "data"))
    cfg_path = root / "run.cfg"
    cfg_path.write_text(format_config(cfg), encoding="ascii")
    assert main(["gen-data", "--config", str(cfg_path),
                 "--out", str(root / "data")]) == 0
    return root, cfg_path


@pytest.fixture(scope="module")
def trained(ws):
    root, cfg_path = ws
    out = root / "train_default"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained_off(ws):
    root, cfg_path = ws
    out = root / "train_off"
    assert main(["train", "--config", str(cfg_path), "--lrm", "off",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def evaled(ws, trained):
    root, cfg_path = ws
    out = root / "eval_default"
    assert main(["eval", "--config", str(cfg_path),
                 "--checkpoint", str(trained / "model.npz"),
                 "--out", str(out)]) == 0
    return out


class TestGenData:
    def test_dataset_layout(self, ws):
        root, _ = ws
        data = root / "data"
        assert (data / "classes.txt").is_file()
        images = sorted((data / "images").glob("*.ppm"))
        labels = sorted((data / "labels").glob("*.txt"))
        assert len(images) == BASE.dataset_count
        assert [p.stem for p in images] == [p.stem for p in labels]

    def test_summary_lines(self, ws, tmp_path, capsys):
        root, cfg_path = ws
        assert main(["gen-data", "--config", str(cfg_path), "--count", "5",
                     "--out", str(tmp_path / "d")]) == 0
        out = capsys.readouterr().out
        assert "grid_size = 4" in out
        assert "samples = 5" in out
        assert "objects[block] = " in out
        fg = [ln for ln in out.splitlines()
              if ln.startswith("fg_fraction = ")]
        assert len(fg) == 1
        assert 0.0 < float(fg[0].split(" = ")[1]) < 1.0

    def test_count_override(self, ws, tmp_path):
        root, cfg_path = ws
        assert main(["gen-data", "--config", str(cfg_path), "--count", "3",
                     "--out", str(tmp_path / "d")]) == 0
        assert len(list((tmp_path / "d" / "images").glob("*.ppm"))) == 3

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        root, cfg_path = ws
        a, b = tmp_path / "a", tmp_path / "b"
        for target in (a, b):
            assert main(["gen-data", "--config", str(cfg_path),
                         "--count", "6", "--out", str(target)]) == 0
        assert tree_bytes(a) == tree_bytes(b)


class TestTrain:
    def test_output_files(self, ws, trained):
        root, cfg_path = ws
        rows = read_log(trained / "training_log.csv")
        assert len(rows) == BASE.iterations
        assert [r[0] for r in rows] == [str(i) for i in range(BASE.iterations)]
        for r in rows:
            assert np.isfinite(float(r[1])) and float(r[1]) > 0.0
            assert 0.0 < float(r[2]) <= PREDICTIONS
            assert 0.0 <= float(r[3]) <= 1.0
        params = load_checkpoint(trained / "model.npz")
        assert params.spec.grid_size == BASE.grid_size
        assert params.embed_dim == BASE.embed_dim
        saved = parse_config((trained / "config.txt")
                             .read_text(encoding="ascii"))
        assert saved == parse_config(cfg_path.read_text(encoding="ascii"))

    def test_reports_progress_lines(self, ws, tmp_path, capsys):
        root, cfg_path = ws
        cfg = parse_config(cfg_path.read_text(encoding="ascii"))
        short = tmp_path / "short.cfg"
        short.write_text(format_config(
            dataclasses.replace(cfg, iterations=5)), encoding="ascii")
        assert main(["train", "--config", str(short),
                     "--out", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert "lrm_enabled = true" in out
        assert "iterations = 5" in out
        assert "final_grand_total = " in out

    def test_lrm_off_keeps_every_prediction(self, trained_off):
        rows = read_log(trained_off / "training_log.csv")
        assert len(rows) == BASE.iterations
        assert all(r[2] == repr(float(PREDICTIONS)) for r in rows)
        assert all(r[3] == "1.0" for r in rows)
        saved = parse_config((trained_off / "config.txt")
                             .read_text(encoding="ascii"))
        assert saved.lrm_enabled is False

    def test_small_budget_without_dedup(self, ws, tmp_path):
        root, cfg_path = ws
        cfg = parse_config(cfg_path.read_text(encoding="ascii"))
        small = tmp_path / "small.cfg"
        small.write_text(format_config(dataclasses.replace(
            cfg, hard_example_count=8, nms_threshold=None, iterations=15)),
            encoding="ascii")
        out = tmp_path / "o"
        assert main(["train", "--config", str(small),
                     "--out", str(out)]) == 0
        rows = read_log(out / "training_log.csv")
        assert all(r[2] == "8.0" for r in rows)

    def test_rerun_is_bit_identical(self, ws, trained, tmp_path):
        root, cfg_path = ws
        again = tmp_path / "again"
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(again)]) == 0
        assert (again / "training_log.csv").read_bytes() == \
            (trained / "training_log.csv").read_bytes()
        a = load_checkpoint(trained / "model.npz")
        b = load_checkpoint(again / "model.npz")
        for name in PARAM_NAMES:
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_saved_config_reproduces_run(self, trained_off, tmp_path):
        echo = tmp_path / "echo.cfg"
        echo.write_text((trained_off / "config.txt")
                        .read_text(encoding="ascii"), encoding="ascii")
        rerun = tmp_path / "rerun"
        assert main(["train", "--config", str(echo),
                     "--out", str(rerun)]) == 0
        assert (rerun / "training_log.csv").read_bytes() == \
            (trained_off / "training_log.csv").read_bytes()


class TestEval:
    def test_output_files(self, evaled, capsys):
        text = read_csv_text(evaled / "eval.csv")
        lines = text.split("\r\n")
        assert lines[0] == "class,ap"
        assert lines[-2].startswith("mAP,")
        assert 0.0 <= float(lines[-2].split(",")[1]) <= 1.0

    def test_matches_library_evaluation(self, ws, trained, evaled):
        root, cfg_path = ws
        cfg = parse_config(cfg_path.read_text(encoding="ascii"))
        samples, names = load_dataset(cfg.data_dir)
        _, test_set = split(samples, cfg.split_ratio,
                            cfg.effective_data_seed())
        params = load_checkpoint(trained / "model.npz")
        outputs, truths = {}, {}
        for s in test_set:
            fm, _ = forward(s.image, params)
            outputs[s.id] = detections_from_map(fm, s.id)
            truths[s.id] = s.truth
        result = evaluate(outputs, truths, class_count=cfg.class_count,
                          iou_threshold=cfg.eval_iou_threshold,
                          nms_threshold=cfg.inference_nms_threshold,
                          confidence_floor=cfg.confidence_floor,
                          interpolation=cfg.ap_interpolation)
        assert read_csv_text(evaled / "eval.csv") == \
            eval_result_csv(result, names)
        expected_pr = {f"pr_{names[c]}.csv" for c in result.pr_curves}
        assert {p.name for p in evaled.glob("pr_*.csv")} == expected_pr

    def test_rerun_is_byte_identical(self, ws, trained, evaled, tmp_path):
        root, cfg_path = ws
        again = tmp_path / "again"
        assert main(["eval", "--config", str(cfg_path),
                     "--checkpoint", str(trained / "model.npz"),
                     "--out", str(again)]) == 0
        assert tree_bytes(again) == tree_bytes(evaled)

    def test_grid_mismatch_exits_2(self, ws, trained, tmp_path, capsys):
        root, cfg_path = ws
        cfg = parse_config(cfg_path.read_text(encoding="ascii"))
        other = tmp_path / "other.cfg"
        other.write_text(format_config(dataclasses.replace(
            cfg, grid_size=8, image_size=64)), encoding="ascii")
        rc = main(["eval", "--config", str(other),
                   "--checkpoint", str(trained / "model.npz"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "does not fit the configured grid" in err
        assert "grid_size" in err


class TestSweep:
    def test_small_grid(self, tmp_path, capsys, monkeypatch):
        cfgf = tmp_path / "sweep.cfg"
        cfgf.write_text(format_config(dataclasses.replace(
            BASE, iterations=10, dataset_count=12)), encoding="ascii")
        out = tmp_path / "sweep"
        monkeypatch.setenv(JOBS_ENV_VAR, "1")
        assert main(["sweep", "--config", str(cfgf), "--k-list", "8",
                     "--nms-list", "none", "--seeds", "0",
                     "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "cells = 2" in stdout
        assert "rows = 2" in stdout

        assert (out / "data" / "seed0" / "classes.txt").is_file()
        assert (out / "cells" / "baseline-seed0" / "model.npz").is_file()
        assert (out / "cells" / "k8-nmsnone-seed0" / "model.npz").is_file()

        lines = read_csv_text(out / "sweep.csv").split("\r\n")
        assert lines[0] == "k,nms,seed,map,ap_block,ap_disc,ap_spike"
        assert lines[-1] == ""
        rows = [line.split(",") for line in lines[1:-1]]
        assert len(rows) == 2
        assert rows[0][:3] == ["", "", "0"]
        assert rows[1][:3] == ["8", "none", "0"]
        for r in rows:
            assert 0.0 <= float(r[3]) <= 1.0

        summary = read_csv_text(out / "summary.csv").split("\r\n")
        assert summary[0] == "k,nms,median_map"
        med = [line.split(",") for line in summary[1:-1]]
        assert [m[:2] for m in med] == [["", ""], ["8", "none"]]
        # single seed, so each median is that cell's map verbatim
        assert [m[2] for m in med] == [rows[0][3], rows[1][3]]


class TestExitCodes:
    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_required_option(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        cfgf = tmp_path / "bad.cfg"
        cfgf.write_text("bogus = 1\n", encoding="ascii")
        rc = main(["train", "--config", str(cfgf),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("config error:")

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "nope.cfg"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_train_without_data_dir(self, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "data_dir" in capsys.readouterr().err

    def test_train_with_missing_dataset(self, tmp_path, capsys):
        cfgf = tmp_path / "c.cfg"
        cfgf.write_text(f"data_dir = {tmp_path / 'absent'}\n",
                        encoding="ascii")
        rc = main(["train", "--config", str(cfgf),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "classes.txt" in capsys.readouterr().err

    def test_eval_with_missing_checkpoint(self, ws, tmp_path, capsys):
        root, cfg_path = ws
        rc = main(["eval", "--config", str(cfg_path),
                   "--checkpoint", str(tmp_path / "absent.npz"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_sweep_bad_k_list(self, tmp_path, capsys):
        rc = main(["sweep", "--k-list", "8,x", "--nms-list", "none",
                   "--seeds", "0", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "bad k list" in capsys.readouterr().err
