import csv
import io
import json

import pytest

from agelb import cli

from oracles import sq_exp_tail


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def run_text(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr()


class TestParse:
    def test_defaults(self):
        cfg = cli.parse_config("solve --policy sq-rtb --d 5 --lambda 0.8 --delta 0.1 --scv 10 --f 0.5 --k 1".split())
        assert cfg.mode == "solve" and cfg.policies == ["sq-rtb"] and cfg.lambdas == [0.8]
        assert cfg.tol == 1e-10 and cfg.warmup == 0.3 and cfg.runs == 40 and cfg.r is None
        assert cfg.sim_horizon(1000) == pytest.approx(1e4)

    @pytest.mark.parametrize("argv,field", [("solve --lambda 1.2", "--lambda"), ("solve --policy foo", "--policy"),
                                            ("solve --d 0", "--d"), ("solve --delta -1", "--delta"),
                                            ("solve --scv 0.2", "job sizes"), ("solve --lambda x", "--lambda")])
    def test_errors_name_the_field(self, argv, field):
        with pytest.raises(cli.ConfigError, match=field):
            cli.parse_config(argv.split())

    def test_range_error_exit(self, capsys):
        code, out = run_text("solve --lambda 1.2".split(), capsys)
        assert code == 2 and "outside [0, 1)" in out.err

    def test_missing_mode(self):
        with pytest.raises(cli.ConfigError):
            cli.parse_config([])

    def test_sweep_matrix(self):
        cfg = cli.parse_config("sweep --policies sq,sq-rtb,lew --lambdas 0.05:0.05:0.95".split())
        assert len(cfg.lambdas) == 19 and cfg.lambdas[-1] == 0.95 and cfg.lambdas[2] == 0.15
        jobs = cli._jobs(cfg)
        assert len(jobs) == 57
        assert [j[1][1] for j in jobs[::19]] == ["sq", "sq-rtb", "lew"]

    @pytest.mark.parametrize("text,want", [("", []), ("0.5", [0.5]), ("0.1, 0.3", [0.1, 0.3]),
                                           ("0.1:0.1:0.3", [0.1, 0.2, 0.3])])
    def test_grid(self, text, want):
        assert cli.parse_grid(text) == want

    @pytest.mark.parametrize("text", ["a:b:c", "0.1:0:1", "0.1,x"])
    def test_bad_grid(self, text):
        with pytest.raises(cli.ConfigError):
            cli.parse_grid(text)

    def test_threshold_fills_bare_policy(self):
        cfg = cli.parse_config("solve --policy sq-re --T 2".split())
        assert cli._jobs(cfg)[0][1][1] == "sq-re:2"


class TestConfigFile:
    def test_file_and_override(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# base case\nmode = sweep\npolicies = sq, lew\nlambdas = 0.1:0.1:0.3\nd = 3\n"
                        "scv = 10   # high variance\nmax_iter = 80\n")
        cfg = cli.parse_config(["--config", str(path), "--d", "4"])
        assert cfg.mode == "sweep" and cfg.policies == ["sq", "lew"] and cfg.d == 4
        assert cfg.lambdas == [0.1, 0.2, 0.3] and cfg.max_iter == 80

    def test_unknown_key_has_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("mode = solve\n\nlambada = 0.5\n")
        with pytest.raises(cli.ConfigError, match=r"bad.cfg:3: unknown key 'lambada'"):
            cli.parse_config(["--config", str(path)])

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("mode solve\n")
        with pytest.raises(cli.ConfigError, match=":1:"):
            cli.parse_config(["--config", str(path)])


class TestRun:
    def test_header(self, capsys):
        code, out = run_text(["sweep", "--lambdas", ""], capsys)
        assert code == 0
        assert out.out == ",".join(cli.HEADER) + "\n"

    @pytest.mark.parametrize("d", [2, 3])
    def test_sq_exponential_closed_form(self, capsys, d):
        lam = 0.8
        code, out = run_text(f"solve --policy sq --d {d} --lambda {lam} --scv 1 --f 0.5".split(), capsys)
        row = rows_of(out.out)[0]
        want = sum(sq_exp_tail(lam, d, ell) for ell in range(1, 300)) / lam - 1
        assert code == 0 and float(row["ew"]) == pytest.approx(want, rel=1e-9)
        assert row["ew_rel_vs_sq"] == "0"
        assert len(row["ew"].replace(".", "").lstrip("0")) <= 10

    def test_relative_column(self, capsys):
        code, out = run_text("solve --policy sq-rtb --d 3 --lambda 0.5 --delta 0.5".split(), capsys)
        row = rows_of(out.out)[0]
        assert code == 0 and 0 < float(row["ew_rel_vs_sq"]) < 1 and int(row["iters"]) > 1

    def test_non_convergence(self, capsys):
        code, out = run_text("solve --policy sq --lambda 0.9 --max-iter 2".split(), capsys)
        assert code == 2 and "not converged" in out.err and "residuals" in out.err
        assert len(rows_of(out.out)) == 1

    def test_deterministic_and_order_free(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path))
        base = "sweep --policies sq,sq-re:2 --lambdas 0.3,0.6 --d 3 --delta 0.5".split()
        assert cli.main(base + ["--output", "a.csv"]) == 0
        assert cli.main(base + ["--output", "b.csv"]) == 0
        assert cli.main(base + ["--output", "c.csv", "--jobs", "2"]) == 0
        a = (tmp_path / "a.csv").read_bytes()
        assert a == (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()
        assert len(rows_of(a.decode())) == 4

    def test_json_mirror(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path))
        assert cli.main("solve --policy sq --d 2 --lambda 0.5 --scv 1 --output o.csv --json o.jsonl".split()) == 0
        rec = [json.loads(line) for line in (tmp_path / "o.jsonl").read_text().splitlines()]
        row = rows_of((tmp_path / "o.csv").read_text())[0]
        assert len(rec) == 1 and set(rec[0]) == set(cli.HEADER)
        assert rec[0]["ew"] == pytest.approx(float(row["ew"]), rel=1e-9)

    def test_absolute_output_ignores_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
        target = tmp_path / "abs.csv"
        assert cli.main(["solve", "--policy", "sq", "--lambda", "0.3", "--output", str(target)]) == 0
        assert target.exists()

    def test_simulate(self, capsys):
        code, out = run_text("simulate --policy sq --d 2 --lambda 0.5 --scv 1 --N 20 --runs 3 --horizon 500".split(),
                             capsys)
        row = rows_of(out.out)[0]
        assert code == 0 and row["N"] == "20" and row["runs"] == "3" and float(row["sd"]) > 0
        assert 0 < float(row["ew"]) < 1

    def test_simulate_d_above_n(self, capsys):
        code, out = run_text("simulate --d 5 --N 3".split(), capsys)
        assert code == 2 and "--replace" in out.err
