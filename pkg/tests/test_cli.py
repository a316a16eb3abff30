import numpy as np
import pytest

from lmagp.blockmat import NumericalError
from lmagp.cli import (
    RunConfig,
    build_config,
    cmd_bench,
    jump_statistics,
    main,
    parse_config_file,
    rmse,
    toy_dataset,
)
from lmagp.data import Dataset, load_csv, write_csv
from lmagp.parallel import ProtocolError


# -- csv io -------------------------------------------------------------------


def test_load_two_row_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,y\n0.5,1.0\n1.5,2.0\n")
    ds = load_csv(p)
    assert ds.n == 2 and ds.d == 1
    assert np.allclose(ds.y, [1.0, 2.0])


def test_load_without_outputs(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,x2\n0.5,1.0\n1.5,2.0\n")
    ds = load_csv(p)
    assert ds.y is None and ds.d == 2


def test_non_numeric_cell_cites_line(tmp_path):
    p = tmp_path / "bad.csv"
    rows = ["x1,y"] + [f"{i}.0,{i}.5" for i in range(5)] + ["oops,1.0"]
    p.write_text("\n".join(rows) + "\n")
    with pytest.raises(ValueError, match="line 7"):
        load_csv(p)


def test_inconsistent_column_count_cites_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x1,y\n1.0,2.0\n1.0\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(p)


def test_rejects_non_finite(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x1,y\nnan,2.0\n")
    with pytest.raises(ValueError, match="line 2"):
        load_csv(p)


def test_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1.0,2.0\n")
    with pytest.raises(ValueError):
        load_csv(p)


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.standard_normal((12, 3)), rng.standard_normal(12))
    p = tmp_path / "rt.csv"
    write_csv(p, ds)
    back = load_csv(p)
    assert np.max(np.abs(back.X - ds.X)) <= 1e-15
    assert np.max(np.abs(back.y - ds.y)) <= 1e-15


# -- rmse ---------------------------------------------------------------------


def test_rmse_identical_and_offset():
    v = np.array([1.0, -2.0, 4.0])
    assert rmse(v, v) == 0.0
    assert rmse(v, v + 0.7) == pytest.approx(0.7, rel=1e-12)


def test_rmse_hand_value():
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5), rel=1e-14)
    assert np.sqrt(12.5) == pytest.approx(3.5355339059327378, abs=1e-15)


def test_rmse_against_two_pass_accumulation():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(500), rng.standard_normal(500)
    acc = 0.0
    for x, y in zip(a, b):
        acc += (x - y) ** 2
    assert rmse(a, b) == pytest.approx(np.sqrt(acc / 500), abs=1e-12)


def test_rmse_length_mismatch():
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])


# -- config -------------------------------------------------------------------


def test_config_file_and_flag_precedence(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("method = fgp\nblocks = 8   # comment\nnoise_var = 0.25\n")
    import argparse

    ns = argparse.Namespace(
        config=str(cfgfile), method=None, blocks=2, markov_order=None, train=None,
        test=None, out=None, support_size=None, workers=None, seed=None,
        want_cov=None, trace=None, signal_var=None, noise_var=None,
        lengthscales=None, prior_mean=None, sizes=None, n_test=None,
    )
    cfg = build_config(ns)
    assert cfg.method == "fgp"      # from file
    assert cfg.blocks == 2          # flag wins
    assert cfg.noise_var == 0.25


def test_config_file_rejects_unknown_key(tmp_path):
    import argparse

    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("bogus = 1\n")
    with pytest.raises(ValueError):
        build_config(argparse.Namespace(config=str(cfgfile)))


def test_config_file_malformed_line(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("just a line\n")
    with pytest.raises(ValueError):
        parse_config_file(cfgfile)


# -- predict command ----------------------------------------------------------


def _write_toy_files(tmp_path, n=12, t=5, d=1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, d))
    y = np.sin(X[:, 0]) + 0.05 * rng.standard_normal(n)
    Xt = rng.uniform(-2, 2, size=(t, d))
    yt = np.sin(Xt[:, 0]) + 0.05 * rng.standard_normal(t)
    write_csv(tmp_path / "train.csv", Dataset(X, y))
    write_csv(tmp_path / "test.csv", Dataset(Xt, yt))
    return tmp_path / "train.csv", tmp_path / "test.csv"


def test_predict_fgp_row_count_and_order(tmp_path):
    train, test = _write_toy_files(tmp_path, n=10, t=6)
    out = tmp_path / "pred.csv"
    rc = main([
        "predict", "--train", str(train), "--test", str(test), "--out", str(out),
        "--method", "fgp", "--noise-var", "0.01",
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "x1,mean,var"
    assert len(lines) == 7
    test_x = load_csv(test).X[:, 0]
    got_x = np.array([float(l.split(",")[0]) for l in lines[1:]])
    assert np.max(np.abs(got_x - test_x)) <= 1e-15


def _read_metrics(path):
    out = {}
    for line in path.read_text().splitlines():
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def test_predict_full_band_matches_fgp_rmse(tmp_path):
    train, test = _write_toy_files(tmp_path, n=30, t=10)
    args = ["--train", str(train), "--test", str(test), "--noise-var", "0.01",
            "--support-size", "8", "--blocks", "3", "--seed", "1"]
    out_f = tmp_path / "f.csv"
    out_l = tmp_path / "l.csv"
    assert main(["predict", *args, "--out", str(out_f), "--method", "fgp"]) == 0
    assert main(["predict", *args, "--out", str(out_l), "--method", "lma",
                 "--markov-order", "2"]) == 0
    rf = float(_read_metrics(tmp_path / "f.csv.metrics")["rmse"])
    rl = float(_read_metrics(tmp_path / "l.csv.metrics")["rmse"])
    assert abs(rf - rl) <= 1e-6


def test_predict_missing_train_flag_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["predict", "--test", "x.csv", "--out", "y.csv"])
    assert exc.value.code == 2
    assert "--train" in capsys.readouterr().err


def test_predict_missing_file_exits_2(tmp_path):
    rc = main([
        "predict", "--train", str(tmp_path / "none.csv"),
        "--test", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.csv"),
    ])
    assert rc == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import lmagp.cli as cmod

    train, test = _write_toy_files(tmp_path)
    monkeypatch.setattr(
        cmod, "fgp_predict", lambda *a, **k: (_ for _ in ()).throw(NumericalError("boom"))
    )
    rc = main(["predict", "--train", str(train), "--test", str(test),
               "--out", str(tmp_path / "o.csv"), "--method", "fgp"])
    assert rc == 3


def test_protocol_failure_exit_code(tmp_path, monkeypatch):
    import lmagp.cli as cmod

    train, test = _write_toy_files(tmp_path, n=20)
    monkeypatch.setattr(
        cmod, "run_parallel_lma", lambda *a, **k: (_ for _ in ()).throw(ProtocolError("late"))
    )
    rc = main(["predict", "--train", str(train), "--test", str(test),
               "--out", str(tmp_path / "o.csv"), "--method", "lma", "--workers", "2",
               "--blocks", "4", "--support-size", "6"])
    assert rc == 4


def test_predict_parallel_writes_trace_and_message_stats(tmp_path):
    train, test = _write_toy_files(tmp_path, n=40, t=8)
    out = tmp_path / "p.csv"
    rc = main(["predict", "--train", str(train), "--test", str(test), "--out", str(out),
               "--method", "lma", "--workers", "2", "--blocks", "4",
               "--markov-order", "1", "--support-size", "8", "--trace",
               "--noise-var", "0.01"])
    assert rc == 0
    metrics = _read_metrics(tmp_path / "p.csv.metrics")
    assert int(metrics["messages.count"]) == 20
    trace_lines = (tmp_path / "p.csv.trace").read_text().strip().splitlines()
    assert trace_lines[0] == "seq,kind,src,dst,rows,cols"
    assert len(trace_lines) == 21


# -- toy ----------------------------------------------------------------------


def test_toy_dataset_block_structure():
    ds = toy_dataset(seed=0)
    assert ds.n == 400
    xs = np.sort(ds.X[:, 0])
    for q, (lo, hi) in enumerate([(-5, -2.5), (-2.5, 0.0), (0.0, 2.5), (2.5, 5.0)]):
        chunk = xs[q * 100 : (q + 1) * 100]
        assert chunk.min() >= lo and chunk.max() < hi


def test_jump_statistics_flags_steps():
    grid = np.linspace(-1, 1, 201)
    mean = np.where(grid < 0, 0.0, 1.0)
    jump, interior = jump_statistics(grid, mean, boundaries=(0.0,))
    assert jump == 1.0
    assert interior == 0.0


# -- bench --------------------------------------------------------------------


def test_bench_table_schema_and_determinism(tmp_path):
    cfg = RunConfig(
        method="fgp,lma", out=str(tmp_path / "b1.csv"), sizes="120,180",
        blocks=4, markov_order=1, support_size=12, n_test=30, noise_var=0.05,
    )
    cmd_bench(cfg)
    cfg2 = RunConfig(**{**cfg.__dict__, "out": str(tmp_path / "b2.csv")})
    cmd_bench(cfg2)
    t1 = (tmp_path / "b1.csv").read_text().strip().splitlines()
    t2 = (tmp_path / "b2.csv").read_text().strip().splitlines()
    assert t1[0] == "method,n,M,B,S,rmse,time_s,speedup"
    keys = [tuple(l.split(",")[:2]) for l in t1[1:]]
    assert keys == sorted(keys)
    rmse_col_1 = [l.split(",")[5] for l in t1[1:]]
    rmse_col_2 = [l.split(",")[5] for l in t2[1:]]
    assert rmse_col_1 == rmse_col_2
    # fgp rows appear only at sizes under the cap and carry no M/B/S
    fgp_rows = [l for l in t1[1:] if l.startswith("fgp")]
    assert len(fgp_rows) == 2
    assert all(r.split(",")[2] == "" for r in fgp_rows)
