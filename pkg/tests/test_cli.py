import csv
import hashlib
import json
import shutil

import pytest

from gengap import cli

SMALL = ["--n-speech", "10", "--n-noise", "2", "--n-room", "4"]


def tree_digest(root, pattern="**/*"):
    h = hashlib.sha256()
    for p in sorted(root.glob(pattern)):
        if p.is_file() and p.name != "run_manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_dbs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "dbs"
    assert cli.main(["synth-db", "--out", str(root), "--seed", "3", *SMALL]) == 0
    return root


def test_synth_db_default(tmp_path):
    out = tmp_path / "dbs"
    assert cli.main(["synth-db", "--out", str(out)]) == 0
    manifests = sorted(p.parent.name for p in out.glob("*/manifest.csv"))
    assert len(manifests) == 15 and manifests[0] == "noise_1"
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["stages"]["synth-db"]["status"] == "done" and run["master_seed"] == 0


def test_synth_db_deterministic_and_force(tmp_path, small_dbs):
    out = tmp_path / "again"
    assert cli.main(["synth-db", "--out", str(out), "--seed", "3", *SMALL]) == 0
    assert tree_digest(out) == tree_digest(small_dbs)
    with pytest.raises(SystemExit, match="--force"):
        cli.main(["synth-db", "--out", str(out), "--seed", "4", *SMALL])
    assert cli.main(["synth-db", "--out", str(out), "--seed", "4", "--force", *SMALL]) == 0
    assert tree_digest(out) != tree_digest(small_dbs)


def test_synth_db_config_file(tmp_path):
    ini = tmp_path / "synth.ini"
    ini.write_text("[synth]\nn_databases = 2\nn_speech = 3\nn_noise = 1\nn_room = 2\nnoise_s = 6\n")
    out = tmp_path / "dbs"
    assert cli.main(["synth-db", "--out", str(out), "--config", str(ini), "--n-speech", "4"]) == 0
    assert len(list(out.glob("*/manifest.csv"))) == 6
    rows = list(csv.DictReader(open(out / "speech_1" / "manifest.csv")))
    assert len(rows) == 4


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GENGAP_SEED", "3")
    out = tmp_path / "env"
    assert cli.main(["synth-db", "--out", str(out), *SMALL]) == 0
    assert json.loads((out / "run_manifest.json").read_text())["master_seed"] == 3


def test_simulate(tmp_path, small_dbs):
    args = ["simulate", "--db-root", str(small_dbs), "--hours", "0.01", "--seed", "5",
            "--speech", "1,2", "--noise", "3", "--room", "4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main([*args, "--out", str(a)]) == 0
    assert cli.main([*args, "--out", str(b)]) == 0
    rows = list(csv.DictReader(open(a / "index.csv")))
    assert sum(int(r["n_samples"]) for r in rows) >= 36 * 16000
    assert tree_digest(a, "*.wav") == tree_digest(b, "*.wav")
    assert (a / "index.csv").read_text() == (b / "index.csv").read_text()
    run = json.loads((a / "run_manifest.json").read_text())
    assert run["stages"]["simulate"]["status"] == "done"


def test_simulate_unknown_database(tmp_path, small_dbs):
    with pytest.raises(SystemExit, match="unknown database speech_7; known: noise_1"):
        cli.main(["simulate", "--db-root", str(small_dbs), "--out", str(tmp_path / "x"),
                  "--speech", "7"])


def test_simulate_empty_test_side(tmp_path, small_dbs):
    root = tmp_path / "dbs"
    shutil.copytree(small_dbs, root)
    man = root / "speech_1" / "manifest.csv"
    lines = man.read_text().splitlines()
    man.write_text("\n".join(lines[:2]) + "\n")  # header plus one train utterance
    with pytest.raises(SystemExit, match="speech_1 has no items on the test side"):
        cli.main(["simulate", "--db-root", str(root), "--out", str(tmp_path / "x"),
                  "--split", "test"])
    run = json.loads((tmp_path / "x" / "run_manifest.json").read_text())
    assert run["stages"]["simulate"]["status"] == "failed"


def test_train_evaluate(tmp_path, small_dbs, capsys):
    data = tmp_path / "data"
    assert cli.main(["simulate", "--db-root", str(small_dbs), "--out", str(data),
                     "--hours", "0.003"]) == 0
    ck = tmp_path / "model" / "ffnn.npz"
    assert cli.main(["train", "--db-root", str(small_dbs), "--dataset", str(data),
                     "--out", str(ck), "--epochs", "1", "--batch-budget-s", "4"]) == 0
    assert ck.exists()
    scores = tmp_path / "scores.csv"
    assert cli.main(["evaluate", "--db-root", str(small_dbs), "--dataset", str(data),
                     "--checkpoint", str(ck), "--out", str(scores),
                     "--external", "stub=echo 0.5"]) == 0
    rows = list(csv.DictReader(open(scores)))
    assert {r["metric"] for r in rows} == {"delta_snr", "stub"}
    out = capsys.readouterr().out
    assert "delta_snr:" in out and "stub: 0.000" in out


def _crossval(small_dbs, out, *extra):
    return cli.main(["crossval", "--db-root", str(small_dbs), "--out", str(out), "--arch", "oracle",
                     "--n", "1", "--train-hours", "0.002", "--test-hours", "0.001", "--jobs", "1",
                     *extra])


def test_crossval_oracle(tmp_path, small_dbs, capsys):
    out = tmp_path / "cv"
    assert _crossval(small_dbs, out, "--mismatch", "speech,noise,room") == 0
    rows = list(csv.DictReader(open(out / "gap_report.csv")))
    assert len(rows) == 1 and float(rows[0]["gap_pct"]) == 0.0
    assert len(list(out.glob("N1_speech+noise+room/fold_*/*/checkpoint.npz"))) == 10
    assert "0%" in capsys.readouterr().out
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["settings"]["architecture"] == "oracle"
    assert run["stages"]["crossval"]["status"] == "done"


def test_crossval_config_file(tmp_path, small_dbs):
    ini = tmp_path / "exp.ini"
    ini.write_text("[experiment]\narchitecture = ffnn\nmismatches = noise\nmaster_seed = 9\n")
    out = tmp_path / "cv"
    assert _crossval(small_dbs, out, "--config", str(ini)) == 0
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["master_seed"] == 9 and run["settings"]["architecture"] == "oracle"
    assert run["settings"]["mismatches"] == ["noise"]


def test_crossval_resume(tmp_path, small_dbs, monkeypatch):
    out = tmp_path / "cv"
    assert _crossval(small_dbs, out, "--mismatch", "room") == 0
    first = (out / "gap_report.csv").read_bytes()
    done = out / "N1_room" / "fold_2" / "result.json"
    stamp = done.stat().st_mtime_ns
    shutil.rmtree(out / "N1_room" / "fold_4")
    from gengap import crossval
    ran = []
    real = crossval.run_fold
    monkeypatch.setattr(crossval, "run_fold", lambda p, *a, **k: ran.append(p.fold) or real(p, *a, **k))
    assert _crossval(small_dbs, out, "--mismatch", "room", "--resume") == 0
    assert ran == [4] and done.stat().st_mtime_ns == stamp
    assert (out / "gap_report.csv").read_bytes() == first


def test_crossval_failure_exit_code(tmp_path, small_dbs, monkeypatch, capsys):
    from gengap import crossval
    real = crossval.run_fold

    def flaky(plan, *a, **k):
        if plan.fold == 5:
            raise ValueError("boom")
        return real(plan, *a, **k)

    monkeypatch.setattr(crossval, "run_fold", flaky)
    out = tmp_path / "cv"
    assert _crossval(small_dbs, out, "--mismatch", "speech") == 1
    assert "fold 5: boom" in capsys.readouterr().err
    assert len(list(out.glob("N1_speech/fold_*/result.json"))) == 4
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["stages"]["crossval"]["status"] == "failed"


def test_report_merges(tmp_path, small_dbs, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _crossval(small_dbs, a, "--mismatch", "speech") == 0
    assert _crossval(small_dbs, b, "--mismatch", "noise") == 0
    capsys.readouterr()
    assert cli.main(["report", str(a), str(b / "gap_report.csv"), "--out", str(tmp_path / "r")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r" / "summary.csv")))
    single = [r for r in rows if r["scenario"] == "Single mism."]
    assert len(single) == 1 and single[0]["runs"] == "2" and float(single[0]["gap_pct"]) == 0.0
    assert "Single mism." in capsys.readouterr().out


def test_version_and_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0 and capsys.readouterr().out.strip() == "0.1.0"
    with pytest.raises(SystemExit):
        cli.main([])
