import json

import numpy as np
import pytest

from cloaknet import snm
from cloaknet.cli import main, parse_size


@pytest.fixture
def fig2(tmp_path):
    path = tmp_path / "fig2.snm"
    assert main(["gen", "fig2", "-o", str(path)]) == 0
    return path


def test_parse_size():
    assert parse_size("64MiB") == 64 * 2**20
    assert parse_size("1KiB") == 1024
    assert parse_size("4096") == 4096
    assert parse_size("1.5k") == 1536


def test_convert_infer_round_trip(tmp_path, fig2, capsys):
    a, b, y, view = (tmp_path / f for f in ("a.snm", "b.snm", "y.snm", "view.jsonl"))
    assert main(["convert", str(fig2), "--seed", "3", "--part-a", str(a), "--part-b", str(b)]) == 0
    assert snm.kind_of(a) == "part_a" and snm.kind_of(b) == "part_b"
    x = np.full((12, 12, 3), 0.25, np.float32)
    snm.save(tmp_path / "x.snm", x)
    args = ["infer", "--part-a", str(a), "--part-b", str(b), "--input", str(tmp_path / "x.snm")]
    assert main(args + ["-o", str(y), "--dump-view", str(view)]) == 0
    assert snm.load(y).shape == (10, 10, 10)
    assert all(json.loads(line)["kind"] in ("event", "tensor") for line in view.read_text().splitlines())
    assert "secure footprint" in capsys.readouterr().out


def test_convert_requires_seed(tmp_path, fig2):
    with pytest.raises(SystemExit) as info:
        main(["convert", str(fig2), "--part-a", str(tmp_path / "a"), "--part-b", str(tmp_path / "b")])
    assert info.value.code == 2


def test_verify_exit_codes(fig2, capsys):
    assert main(["verify", str(fig2), "--trials", "50"]) == 0
    assert main(["verify", str(fig2), "--ratio", "1.0", "--debug", "--trials", "3"]) == 0
    assert "max relative error 0.000e+00" in capsys.readouterr().out
    assert main(["verify", str(fig2), "--trials", "3", "--inject", "lambda=conv3"]) == 1
    assert "'conv3'" in capsys.readouterr().out


def test_verify_with_saved_parts(tmp_path, fig2):
    a, b = tmp_path / "a.snm", tmp_path / "b.snm"
    main(["convert", str(fig2), "--seed", "1", "--part-a", str(a), "--part-b", str(b)])
    assert main(["verify", str(fig2), "--part-a", str(a), "--part-b", str(b), "--trials", "5"]) == 0
    assert main(["verify", str(fig2), "--part-a", str(a), "--trials", "5"]) == 2


def test_io_and_budget_errors(tmp_path, fig2, capsys):
    assert main(["verify", str(tmp_path / "missing.snm")]) == 2
    a, b = tmp_path / "a.snm", tmp_path / "b.snm"
    main(["convert", str(fig2), "--seed", "1", "--part-a", str(a), "--part-b", str(b)])
    assert main(["infer", "--part-a", str(a), "--part-b", str(b), "--random-input", "1", "--budget", "1KiB"]) == 2
    assert "budget" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["verify", str(fig2), "--inject", "bogus"])


def test_bench_and_attack_sim(tmp_path, fig2, capsys):
    assert main(["bench", str(fig2), "--reps", "2"]) == 0
    log = tmp_path / "audit.jsonl"
    assert main(["attack-sim", str(fig2), "-k", "2", "--audit-log", str(log)]) == 0
    out = capsys.readouterr().out
    assert "verified" in out and "audit passed" in out
    assert len(log.read_text().splitlines()) == 12


def test_attack_sim_paper_counts(tmp_path, capsys):
    path = tmp_path / "fig1.snm"
    main(["gen", "fig1", "-o", str(path)])
    main(["attack-sim", str(path), "-k", "1"])
    assert "victim 1984, adversary 5120" in capsys.readouterr().out
