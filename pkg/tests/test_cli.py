import json
import os

import pytest

from fgo_integrity import cli

CONFIG = """
[scenario]
duration = 8

[run]
seed = 7

[faults]
f1 = gnss 3 6 range=15 target=G05
"""


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return str(path)


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def base_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write(d / "run.ini", CONFIG)
    out = d / "a"
    code = cli.main(["run", "--config", cfg, "--out", str(out)])
    return d, cfg, out, code


def test_run_writes_outputs(base_run):
    _, _, out, code = base_run
    assert code == cli.EXIT_OK
    for name in (cli.EPOCHS_FILE, cli.SUMMARY_FILE, cli.MANIFEST_FILE, cli.DUMP_FILE):
        assert os.path.isfile(out / name)
    man = json.loads(_read(out / cli.MANIFEST_FILE))
    assert man["seed"] == 7 and man["fde"] is True and man["exit_status"] == 0
    assert len(man["config_hash"]) == 64


def test_csv_units_and_columns(base_run):
    _, _, out, _ = base_run
    first = _read(out / cli.EPOCHS_FILE).splitlines()[0]
    assert first.startswith("# units: epoch[-],time[s]")
    rows = cli.read_epochs_csv(out / cli.EPOCHS_FILE)
    assert "peb_FF" in rows[0] and "avail_GI" in rows[0]
    assert any(r["faults"] for r in rows)


def test_summary_matches_csv(base_run):
    _, _, out, _ = base_run
    rows = cli.read_epochs_csv(out / cli.EPOCHS_FILE)
    lines = _read(out / cli.SUMMARY_FILE).splitlines()
    modes = lines[1].split()
    err = lines[2].split()[-len(modes):]
    peb = lines[3].split()[-len(modes):]
    av = lines[4].split()[-len(modes):]
    hpe = sum(float(r["hpe"]) for r in rows) / len(rows)
    for i, m in enumerate(modes):
        assert float(err[i]) == pytest.approx(hpe, abs=0.006)
        p = sum(float(r[f"peb_{m}"]) for r in rows) / len(rows)
        assert float(peb[i]) == pytest.approx(p, abs=0.006)
        a = 100.0 * sum(int(r[f"avail_{m}"]) for r in rows) / len(rows)
        assert float(av[i]) == pytest.approx(a, abs=0.06)


def test_replay_reproduces_run(base_run):
    d, cfg, out, _ = base_run
    rep = d / "replay"
    code = cli.main(["replay", "--dump", str(out / cli.DUMP_FILE), "--config", cfg, "--out", str(rep)])
    assert code == cli.EXIT_OK
    assert _read(rep / cli.EPOCHS_FILE) == _read(out / cli.EPOCHS_FILE)
    ma = json.loads(_read(out / cli.MANIFEST_FILE))
    mb = json.loads(_read(rep / cli.MANIFEST_FILE))
    assert ma["config_hash"] == mb["config_hash"]
    assert mb["source"] == "replay"


def test_rerun_is_byte_identical(base_run):
    d, cfg, out, _ = base_run
    again = d / "again"
    assert cli.main(["run", "--config", cfg, "--out", str(again)]) == cli.EXIT_OK
    for name in (cli.EPOCHS_FILE, cli.SUMMARY_FILE, cli.MANIFEST_FILE):
        assert _read(again / name) == _read(out / name)


def test_truncated_dump_is_rejected(base_run, tmp_path):
    _, _, out, _ = base_run
    lines = _read(out / cli.DUMP_FILE).splitlines()
    bad = _write(tmp_path / "bad.jsonl", "\n".join(lines[:-3]) + "\n")
    assert cli.main(["replay", "--dump", bad, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["replay", "--dump", str(tmp_path / "missing.jsonl"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_edited_fault_schedule_changes_hash(base_run, tmp_path):
    _, _, out, _ = base_run
    lines = _read(out / cli.DUMP_FILE).splitlines()
    head = json.loads(lines[0])
    head["config"]["faults"] = []
    lines[0] = json.dumps(head, sort_keys=True)
    dump = _write(tmp_path / "edited.jsonl", "\n".join(lines) + "\n")
    assert cli.main(["replay", "--dump", dump, "--out", str(tmp_path / "o")]) == cli.EXIT_OK
    ma = json.loads(_read(out / cli.MANIFEST_FILE))
    mb = json.loads(_read(tmp_path / "o" / cli.MANIFEST_FILE))
    assert ma["config_hash"] != mb["config_hash"]
    rows = cli.read_epochs_csv(tmp_path / "o" / cli.EPOCHS_FILE)
    assert not any(r["faults"] for r in rows)


def test_compare_identical_runs(base_run, tmp_path, capsys):
    d, _, out, _ = base_run
    assert cli.main(["compare", str(out), str(out)]) == cli.EXIT_OK
    text = capsys.readouterr().out
    rep = cli.compare_runs(str(out), str(out))
    assert rep["summary"]["max_abs_d_hpe"] == 0.0
    assert all(v == 0.0 for r in rep["rows"] for k, v in r.items() if k.startswith("d_"))
    assert "# max_abs_d_hpe = 0.000000" in text


def test_compare_fde_contrast(base_run, tmp_path):
    _, cfg, out, _ = base_run
    off = tmp_path / "off"
    assert cli.main(["run", "--config", cfg, "--no-fde", "--out", str(off)]) == cli.EXIT_OK
    report = tmp_path / "cmp.csv"
    assert cli.main(["compare", str(out), str(off), "--out", str(report)]) == cli.EXIT_OK
    rep = cli.compare_runs(str(out), str(off))
    s = rep["summary"]
    assert s["fault_epochs"] == 3
    faulted = [r for r, a in zip(rep["rows"], cli.read_epochs_csv(out / cli.EPOCHS_FILE)) if a["faults"]]
    mean_d = sum(r["d_hpe"] for r in faulted) / len(faulted)
    assert s["mean_fault_hpe_b"] - s["mean_fault_hpe_a"] == pytest.approx(mean_d, abs=1e-12)
    on = cli.read_epochs_csv(out / cli.EPOCHS_FILE)
    assert "gnss:G05" in on[2]["exclusions"] and on[2]["epoch"] == "3"
    assert not any(r["exclusions"] for r in cli.read_epochs_csv(off / cli.EPOCHS_FILE))
    assert "d_peb_FF" in _read(report).splitlines()[0]


def test_compare_mismatched_epochs(base_run, tmp_path):
    _, _, out, _ = base_run
    short = tmp_path / "short"
    cfg = _write(tmp_path / "s.ini", "[scenario]\nduration = 4\n")
    assert cli.main(["run", "--config", cfg, "--out", str(short)]) == cli.EXIT_OK
    assert cli.main(["compare", str(out), str(short)]) == cli.EXIT_CONFIG


def test_tiny_alert_limit_is_not_an_error(tmp_path):
    cfg = _write(tmp_path / "al.ini", "[scenario]\nduration = 4\n[integrity]\nal = 0.001\n")
    out = tmp_path / "o"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--svg"]) == cli.EXIT_OK
    rows = cli.read_epochs_csv(out / cli.EPOCHS_FILE)
    assert all(int(r["avail_FF"]) == 0 for r in rows)
    assert "Availability (%)" in _read(out / cli.SUMMARY_FILE)
    assert _read(out / "hpe_peb.svg").startswith("<svg")


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[integrity]\nal = -1\n",
    "[integrity]\np_fa = 2\n",
    "[scenario]\nunknown_key = 3\n",
    "[run]\nseed = abc\n",
    "[solver]\nmax_iter = 0\n",
    "[integrity]\ndetection_window = 0\n",
    "[faults]\nf = gnss 5 3 range=1\n",
    "not an ini file",
])
def test_bad_config_exits_2(tmp_path, text):
    cfg = _write(tmp_path / "bad.ini", text)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")]) == 2


def test_parse_config_fields():
    cfg = cli.parse_config("[integrity]\nal = 4.5\ndetection_window = 3\np_fa = 1e-4\n"
                           "[solver]\nmax_iter = 7\n[run]\nfde = no\nseed = 9\n")
    assert cfg.al == 4.5 and cfg.detection.window == 3 and cfg.detection.p_fa == 1e-4
    assert cfg.solver.max_iter == 7 and cfg.fde is False and cfg.seed == 9
    assert cli.config_hash(cfg) == cli.config_hash(cli.parse_config(
        "[run]\nseed = 9\nfde = no\n[solver]\nmax_iter = 7\n[integrity]\np_fa = 1e-4\ndetection_window = 3\nal = 4.5\n"))
    assert cli.config_hash(cfg) != cli.config_hash(cli.parse_config("[run]\nseed = 10\n"))


def test_montecarlo_subdirectories(tmp_path):
    cfg = _write(tmp_path / "mc.ini", "[scenario]\nduration = 3\n")
    out = tmp_path / "mc"
    assert cli.main(["run", "--config", cfg, "--montecarlo", "2", "--workers", "2", "--out", str(out)]) == 0
    lines = _read(out / "montecarlo.csv").splitlines()
    assert lines == ["run,seed,status", "run_0000,0,0", "run_0001,1,0"]
    a = _read(out / "run_0000" / cli.EPOCHS_FILE)
    b = _read(out / "run_0001" / cli.EPOCHS_FILE)
    assert a != b
