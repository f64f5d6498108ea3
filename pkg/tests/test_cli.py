import io
import json
import subprocess
import sys

import numpy as np
import pytest

from hierlight import cli
from hierlight.costing import analyze
from hierlight.ppm import write_ppm

TOY = "model toy\nlayer 0 from=-1 Conv out=4 k=3 s=2\nlayer 1 from=0 Conv out=4 k=1\n"


def run(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_ppm(d / "black.ppm", np.zeros((2, 2, 3), np.uint8))
    rng = np.random.default_rng(0)
    write_ppm(d / "noise.ppm", rng.integers(0, 256, size=(48, 80, 3), dtype=np.uint8))
    assert run("init", "hierlight", "--scale", "n", "--seed", "0", "-o", str(d / "n.hlwt"))[0] == 0
    return d


def test_analyze_n_and_text_totals():
    code, text = run("analyze", "hierlight", "--scale", "n")
    assert code == 0
    assert "2.2M params" in text.splitlines()[-1]


def test_analyze_formats_agree():
    _, js = run("analyze", "hierlight", "--scale", "s", "--format", "json")
    _, csv_text = run("analyze", "hierlight", "--scale", "s", "--format", "csv")
    doc = json.loads(js)
    assert doc["scale"] == "s" and doc["input_size"] == 640
    assert sum(int(line.split(",")[3]) for line in csv_text.splitlines()[1:]) == doc["total"]["params"]


def test_analyze_is_deterministic():
    assert run("analyze", "hierlight", "--scale", "m") == run("analyze", "hierlight", "--scale", "m")


def test_missing_file_exit_2(capsys):
    code, _ = run("analyze", "/nonexistent/x.model")
    assert code == 2
    assert "cannot open /nonexistent/x.model" in capsys.readouterr().err


def test_parse_error_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.model"
    p.write_text("model t\nlayer 0 from=-1 Frob out=8\n")
    assert run("analyze", str(p))[0] == 2
    assert "line 2, column 17" in capsys.readouterr().err


def test_undeclared_scale_exit_2(tmp_path):
    p = tmp_path / "toy.model"
    p.write_text(TOY)
    assert run("analyze", str(p), "--scale", "s")[0] == 2


def test_toy_model_analyze(tmp_path):
    p = tmp_path / "conv.model"
    p.write_text("model conv\nlayer 0 from=-1 Conv out=16 k=3 s=2\n")
    code, text = run("analyze", str(p), "--format", "csv", "--imgsz", "64")
    assert code == 0
    assert text.splitlines()[1] == f"0,Conv,1x16x32x32,464,{2 * 27 * 16 * 1024 + 3 * 16 * 1024}"


def test_run_requires_detect_head(tmp_path, workdir, capsys):
    p = tmp_path / "toy.model"
    p.write_text(TOY)
    assert run("run", str(p), str(workdir / "n.hlwt"), str(workdir / "black.ppm"))[0] == 2
    assert "Detect" in capsys.readouterr().err


def test_init_deterministic_and_seeded(tmp_path):
    paths = [tmp_path / f"{i}.hlwt" for i in range(3)]
    outs = [run("init", "hierlight", "--scale", "n", "--seed", str(s), "-o", str(p))[1]
            for s, p in zip((0, 0, 1), paths)]
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_bytes() != paths[2].read_bytes()
    total = int(outs[0].split(", ")[1].split()[0])
    assert total == analyze(cli.load_graph("hierlight", "n")).params


def test_init_unwritable_path_exit_2(capsys):
    assert run("init", "hierlight", "--scale", "n", "-o", "/nonexistent/dir/w.hlwt")[0] == 2
    assert "cannot write" in capsys.readouterr().err


def test_run_black_image_deterministic(workdir):
    args = ("run", "hierlight", str(workdir / "n.hlwt"), str(workdir / "black.ppm"), "--scale", "n")
    code, first = run(*args)
    assert code == 0
    assert first == run(*args)[1]
    lines = first.splitlines()
    assert lines, "2x2 image letterboxed to 640 should still produce candidates"
    for line in lines:
        doc = json.loads(line)
        x1, y1, x2, y2 = doc["box"]
        assert 0 <= x1 < x2 <= 2 and 0 <= y1 < y2 <= 2
        assert doc["score"] > 0.25


def test_run_high_conf_gives_no_lines(workdir):
    code, text = run("run", "hierlight", str(workdir / "n.hlwt"), str(workdir / "noise.ppm"),
                     "--scale", "n", "--conf", "0.999")
    assert code == 0 and text == ""


def test_run_preserves_image_order(workdir):
    imgs = [str(workdir / "noise.ppm"), str(workdir / "black.ppm")]
    _, text = run("run", "hierlight", str(workdir / "n.hlwt"), *imgs, "--scale", "n", "--conf", "0.4")
    names = [json.loads(line)["image"] for line in text.splitlines()]
    assert names == sorted(names, key=imgs.index)


def test_run_malformed_ppm_exit_2(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n" + b"\0" * 10)
    assert run("run", "hierlight", str(workdir / "n.hlwt"), str(bad), "--scale", "n")[0] == 2
    assert "byte" in capsys.readouterr().err


def test_run_weight_mismatch_exit_3(workdir, capsys):
    code, _ = run("run", "hierlight", str(workdir / "n.hlwt"), str(workdir / "black.ppm"), "--scale", "s")
    assert code == 3
    assert capsys.readouterr().err.startswith("hierlight:")


def test_run_corrupt_weights_exit_2(workdir, tmp_path):
    bad = tmp_path / "bad.hlwt"
    bad.write_bytes(b"NOPE" + (workdir / "n.hlwt").read_bytes()[4:])
    assert run("run", "hierlight", str(bad), str(workdir / "black.ppm"), "--scale", "n")[0] == 2


def test_gradcheck_irdcb_seed_7():
    code, text = run("gradcheck", "--block", "irdcb", "--seed", "7")
    assert code == 0
    rows = text.splitlines()[1:]
    assert rows and all(r.endswith("pass") for r in rows)
    assert all(float(r.split()[1]) < 1e-4 for r in rows)


def test_gradcheck_upsample():
    assert run("gradcheck", "--block", "upsample")[0] == 0


def test_gradcheck_unknown_block_exit_2():
    with pytest.raises(SystemExit) as info:
        run("gradcheck", "--block", "frobnicate")
    assert info.value.code == 2


def test_gradcheck_failure_exit_1(monkeypatch, capsys):
    from dataclasses import replace

    from hierlight import gradcheck as gc

    real = gc.gradcheck

    def broken(block_id, shape=None, seed=0):
        return replace(real(block_id, shape, seed), max_rel_error=1.0)

    monkeypatch.setattr(cli, "gradcheck", broken)
    assert run("gradcheck", "--block", "hfcc")[0] == 1
    assert "worst relative error 1.000e+00" in capsys.readouterr().err


def test_dump_graph_toy_and_stability(tmp_path):
    p = tmp_path / "toy.model"
    p.write_text(TOY)
    code, dot = run("dump-graph", str(p))
    assert code == 0 and dot.count("[label=") == 2
    _, a = run("dump-graph", "hierlight", "--scale", "s")
    assert a == run("dump-graph", "hierlight", "--scale", "s")[1]
    assert a.count("[label=") == len(cli.load_graph("hierlight").spec.nodes)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("HIERLIGHT_THREADS", "2")
    assert cli.threads_from_env() == 2
    assert run("analyze", "hierlight", "--scale", "n")[0] == 0
    monkeypatch.setenv("HIERLIGHT_THREADS", "lots")
    assert run("analyze", "hierlight", "--scale", "n")[0] == 2
    monkeypatch.delenv("HIERLIGHT_THREADS")
    assert cli.threads_from_env() == 0


def test_module_entry_point_and_closed_pipe():
    proc = subprocess.run([sys.executable, "-m", "hierlight", "analyze", "hierlight", "--format", "csv"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("node,kind,out_shape,params,flops\n")
    proc = subprocess.run(f"{sys.executable} -m hierlight dump-graph hierlight | head -1",
                          shell=True, capture_output=True, text=True)
    assert proc.returncode == 0 and "Traceback" not in proc.stderr
