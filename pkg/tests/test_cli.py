import json

from click.testing import CliRunner

from red import metrics as X, model as M, redm
from red.cli import main


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_synth_writes_model(tmp_path):
    out = tmp_path / "m.redm"
    res = invoke("synth", "duplicates", out, "--seed", 3, "--layers", 3, "--width", 8)
    assert res.exit_code == 0, res.output
    m = redm.load_model(out)
    assert M.validate_model(m) == []


def test_run_reports_removal_and_verify_passes(tmp_path):
    src, dst = tmp_path / "in.redm", tmp_path / "out.redm"
    assert invoke("synth", "duplicates", src, "--seed", 7, "--layers", 4, "--width", 8).exit_code == 0
    res = invoke("run", src, dst, "--tau", 0, "--alpha", 0)
    assert res.exit_code == 0, res.output
    assert "% removed" in res.output
    report = json.loads((tmp_path / "out.redm.report.json").read_text())
    assert report["total"]["removed_params_pct"] > 0

    ver = invoke("verify", src, dst, "--tol", "1e-9", "--inputs", 50)
    assert ver.exit_code == 0, ver.output
    assert "max delta" in ver.output


def test_stage_subcommands(tmp_path):
    src = tmp_path / "in.redm"
    invoke("synth", "duplicates", src, "--seed", 1, "--layers", 3, "--width", 8)

    hashed = tmp_path / "h.redm"
    res = invoke("hash", src, hashed)
    assert res.exit_code == 0
    hm, sm = redm.load_model(hashed), redm.load_model(src)
    assert [l.kind for _, l in hm.iter_layers()] == [l.kind for _, l in sm.iter_layers()]

    merged = tmp_path / "m.redm"
    assert invoke("merge", src, merged).exit_code == 0
    assert X.count_params(redm.load_model(merged))["total"] < X.count_params(sm)["total"]

    separated = tmp_path / "s.redm"
    assert invoke("separate", src, separated).exit_code == 0


def test_run_stage_list_hash_only_keeps_architecture(tmp_path):
    src, dst = tmp_path / "in.redm", tmp_path / "out.redm"
    invoke("synth", "multimodal", src, "--seed", 2, "--layers", 3, "--weight-modes", 0)
    res = invoke("run", src, dst, "--stages", "hash", "--bandwidth", "0.5")
    assert res.exit_code == 0, res.output
    a, b = redm.load_model(src), redm.load_model(dst)
    assert [l.kind for _, l in b.iter_layers()] == [l.kind for _, l in a.iter_layers()]
    assert [l.out_channels for _, l in b.iter_layers()] == [l.out_channels for _, l in a.iter_layers()]


def test_order_flag_parameter_counts_agree(tmp_path):
    src = tmp_path / "in.redm"
    invoke("synth", "convnet", src, "--seed", 3, "--layers", 2, "--width", 8,
           "--channels", 2, "--weight-modes", 6)
    a, b = tmp_path / "a.redm", tmp_path / "b.redm"
    assert invoke("run", src, a).exit_code == 0
    assert invoke("run", src, b, "--order", "separate-first").exit_code == 0
    pa = X.count_params(redm.load_model(a))["total"]
    pb = X.count_params(redm.load_model(b))["total"]
    assert pa == pb
    assert a.read_bytes() == b.read_bytes()  # orders agree bit-for-bit here


def test_verify_exit_codes(tmp_path):
    src = tmp_path / "in.redm"
    invoke("synth", "multimodal", src, "--seed", 5, "--layers", 2, "--weight-modes", 0)

    # beyond tolerance: aggressive collapse changes the outputs
    crushed = tmp_path / "crushed.redm"
    assert invoke("run", src, crushed, "--tau", 60, "--stages", "hash").exit_code == 0
    res = invoke("verify", src, crushed, "--tol", "1e-9")
    assert res.exit_code == 1
    assert "max delta" in res.output

    # architecture mismatch: exit 2
    other = tmp_path / "other.redm"
    invoke("synth", "multimodal", other, "--seed", 5, "--layers", 2, "--classes", 7)
    assert invoke("verify", src, other).exit_code == 2


def test_report_self_is_zero_removed(tmp_path):
    src = tmp_path / "in.redm"
    invoke("synth", "duplicates", src, "--seed", 4)
    res = invoke("report", src, "--baseline", src, "--json")
    assert res.exit_code == 0
    data = json.loads(res.output)
    assert data["total"]["removed_params_pct"] == 0.0
    assert data["zip_ratio"] == 1.0


def test_report_without_baseline_absolute_counts(tmp_path):
    src = tmp_path / "in.redm"
    invoke("synth", "duplicates", src, "--seed", 4)
    res = invoke("report", src)
    assert res.exit_code == 0
    assert "params" in res.output and "%" not in res.output


def test_cli_is_deterministic(tmp_path):
    src = tmp_path / "in.redm"
    invoke("synth", "convnet", src, "--seed", 11, "--layers", 2, "--width", 6, "--channels", 2)
    a, b = tmp_path / "a.redm", tmp_path / "b.redm"
    invoke("run", src, a, "--alpha", 0.3, "--seed", 5)
    invoke("run", src, b, "--alpha", 0.3, "--seed", 5)
    assert a.read_bytes() == b.read_bytes()
    ra = json.loads((tmp_path / "a.redm.report.json").read_text())
    rb = json.loads((tmp_path / "b.redm.report.json").read_text())
    assert ra == rb


def test_run_folds_batchnorm_by_default(tmp_path):
    import numpy as np

    from red import redm as R

    rng = np.random.default_rng(3)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    m = M.sequential(
        [
            M.conv2d(f32(rng.standard_normal((3, 3, 2, 4))), f32(rng.standard_normal(4)), padding=1),
            M.batchnorm(f32(rng.uniform(0.5, 2, 4)), f32(rng.standard_normal(4)),
                        f32(rng.standard_normal(4)), f32(rng.uniform(0.5, 2, 4))),
            M.relu(),
            M.dense(f32(rng.standard_normal((3, 4 * 16)))),
        ]
    )
    src, dst, kept = tmp_path / "bn.redm", tmp_path / "folded.redm", tmp_path / "kept.redm"
    R.save_model(m, src)
    assert invoke("merge", src, dst, "--resolution", 4, 4).exit_code == 0
    assert all(l.kind != M.BATCHNORM for _, l in redm.load_model(dst).iter_layers())
    assert invoke("merge", src, kept, "--no-fold-bn", "--resolution", 4, 4).exit_code == 0
    assert any(l.kind == M.BATCHNORM for _, l in redm.load_model(kept).iter_layers())
    ver = invoke("verify", src, dst, "--tol", "1e-5", "--inputs", 20, "--resolution", 4, 4)
    assert ver.exit_code == 0, ver.output


def test_error_paths_exit_nonzero(tmp_path):
    bad = tmp_path / "bad.redm"
    bad.write_bytes(b"REDM garbage that is not a model")
    res = invoke("report", bad)
    assert res.exit_code == 1
    missing = invoke("run", tmp_path / "nope.redm", tmp_path / "out.redm")
    assert missing.exit_code != 0
