import json

import pytest

from bemfdtd.cli import build_parser, main


def scene(tmp_path, **kw):
    data = dict(resolution=16, icosphere_level=0, L=16, listeners=[[0.5, 0.35, 0.35]])
    data.update(kw)
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(data))
    return str(p)


def test_run_and_slice(tmp_path, capsys):
    s = scene(tmp_path)
    assert main(["run", "--scene", s, "--out", str(tmp_path / "o"), "--steps", "5"]) == 0
    assert (tmp_path / "o" / "manifest.txt").is_file()
    assert main(["slice", "--scene", s, "--axis", "y", "--index", "8", "--steps", "5", "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "slice_y8_step000005.pgm").is_file()
    assert "5 steps written" in capsys.readouterr().out


def test_failures_exit_nonzero(tmp_path, capsys):
    assert main(["run", "--scene", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    s = scene(tmp_path, mesh=str(tmp_path / "missing.obj"))
    assert main(["run", "--scene", s, "--out", str(tmp_path / "o")]) == 2
    assert "stage 'scene' failed" in capsys.readouterr().err
    s = scene(tmp_path)
    assert main(["slice", "--scene", s, "--index", "99", "--steps", "1", "--out", str(tmp_path)]) == 2
    assert main(["slice", "--scene", s, "--index", "1", "--out", str(tmp_path), "--oracle"]) == 2


def test_parser():
    a = build_parser().parse_args(["monopole-test", "--factors", "2.4,3"])
    assert a.factors == (2.4, 3.0) and (a.R1, a.R2, a.L, a.resolution) == (3, 4, 64, 32)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["monopole-test", "--factors", "x"])


def test_monopole_cli_writes_csv(tmp_path, capsys):
    rc = main(["monopole-test", "--resolution", "16", "--L", "8", "--level", "0", "--factors", "2.4",
               "--face-resolution", "2", "--out", str(tmp_path)])
    assert rc == 0
    rows = (tmp_path / "monopole_snr.csv").read_text().splitlines()
    assert rows[0] == "factor,snr_db" and rows[1].startswith("2.4,") and rows[2].startswith("aggregate,")
    assert "aggregate: SNR" in capsys.readouterr().out
