import csv

import numpy as np
import pytest

from rsm import checkpoint, cli
from rsm import config as cfgmod
from rsm import train as tr
from rsm.config import ConfigError
from rsm.tasks.balls import read_bbv1

TINY = {
    "erg": """
[run]
task = erg
steps = 10
batch = 16
log_every = 2
eval_every = 5
record_time = false
[rsm]
groups = 20
k = 4
[classifier]
hidden = 24
[data]
eval_sequences = 16
""",
    "image_seq": """
[run]
task = image_seq
steps = 6
batch = 10
log_every = 3
record_time = false
[rsm]
groups = 20
k = 4
[classifier]
hidden = 24
[data]
synthetic = true
eval_sequences = 400
""",
    "balls": """
[run]
task = balls
steps = 4
batch = 2
log_every = 2
record_time = false
[layer1]
groups = 6
k = 2
[layer2]
groups = 6
k = 2
[data]
eval_sequences = 2
frames = 8
priming = 4
generate = 3
""",
    "lm": """
[run]
task = lm
steps = 8
batch = 8
log_every = 4
record_time = false
[rsm]
groups = 16
k = 3
mu = 0.2
[classifier]
hidden = 16
[data]
synthetic = true
""",
}


def write_cfg(tmp_path, task, extra=""):
    path = tmp_path / f"{task}.ini"
    path.write_text(TINY[task] + extra)
    return path


# config ---------------------------------------------------------------------


def test_defaults_follow_published_tables():
    erg = cfgmod.defaults("erg")
    assert (erg.run.batch, erg.rsm.groups, erg.rsm.cells, erg.rsm.k) == (400, 200, 6, 25)
    assert (erg.rsm.gamma, erg.rsm.epsilon, erg.classifier.hidden) == (0.98, 0.0, 500)
    img = cfgmod.defaults("image_seq")
    assert (img.run.batch, img.rsm.gamma, img.classifier.hidden) == (300, 0.5, 1200)
    lm = cfgmod.defaults("lm")
    assert (lm.rsm.groups, lm.rsm.cells, lm.rsm.k, lm.rsm.gamma, lm.rsm.epsilon) == (600, 8, 20, 0.8, 0.85)
    assert lm.rsm.recurrent_dropout == 0.5 and lm.lm.uniform_mass == 0.07
    b = cfgmod.defaults("balls")
    assert (b.run.batch, b.layer1.groups, b.layer1.cells, b.layer1.k, b.layer1.field) == (256, 64, 8, 3, 5)
    assert (b.layer1.pool, b.layer1.stride, b.layer2.groups, b.layer2.k, b.layer2.field) == (2, 2, 128, 5, 3)
    for task in cfgmod.TASKS:
        assert cfgmod.defaults(task).run.lr == 0.0005


@pytest.mark.parametrize("text, fragment", [
    ("[run]\ntask = erg\nbatchsize = 3\n", "batchsize"),
    ("[rnn]\ngroups = 3\n", "rnn"),
    ("[run]\ntask = chess\n", "chess"),
    ("[run]\nsteps = many\n", "steps"),
    ("[rsm]\nk = 500\n", "k must"),
    ("[classifier]\ndropout = maybe\n", "dropout"),
    ("no section header\n", "header"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        cfgmod.parse(text)


def test_config_round_trip_and_overrides():
    cfg = cfgmod.parse(TINY["balls"])
    assert cfgmod.parse(cfg.to_ini()) == cfg
    assert cfg.layer1.field == 5  # untouched keys keep the task defaults
    cfg2 = cfgmod.parse(TINY["erg"], {"run.seed": 9})
    assert cfg2.run.seed == 9
    with pytest.raises(ConfigError):
        cfgmod.parse(TINY["erg"], {"run.sed": 9})
    with pytest.raises(ConfigError):
        cfgmod.load("/nonexistent/run.ini")


# training loop ----------------------------------------------------------------


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_erg_ten_steps_twice_bit_identical(tmp_path):
    cfg = write_cfg(tmp_path, "erg")
    for name in ("a", "b"):
        assert run_cli("train", "--config", cfg, "--seed", 7, "--out", tmp_path / name, "--quiet") == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_rows(tmp_path / "a" / "metrics.csv")
    assert rows[0] == ["step", "accuracy", "fork_accuracy", "rsm_loss", "classifier_loss", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["2", "4", "5", "6", "8", "10"]
    assert run_cli("train", "--config", cfg, "--seed", 8, "--out", tmp_path / "c", "--quiet") == 0
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != a


def test_wall_time_column_is_filled_by_default(tmp_path):
    cfg = cfgmod.parse(TINY["erg"].replace("record_time = false", "record_time = true"))
    tr.train(cfg, tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")
    assert all(float(r[-1]) > 0 for r in rows[1:])


def test_erg_rsm_loss_decreases_over_first_thousand_steps(tmp_path):
    cfg = cfgmod.defaults("erg")
    cfg.run.steps, cfg.run.log_every, cfg.run.eval_every, cfg.run.seed = 1000, 100, 0, 3
    cfg.data.eval_sequences = 50
    tr.train(cfg, tmp_path)
    losses = [float(r[3]) for r in read_rows(tmp_path / "metrics.csv")[1:]]
    assert losses[-1] < 0.85 * losses[0]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


@pytest.mark.parametrize("task", ["erg", "lm", "balls"])
def test_resume_matches_uninterrupted_run(tmp_path, task):
    cfg = cfgmod.parse(TINY[task])
    cfg.run.checkpoint_every = cfg.run.steps // 2
    full = tr.train(cfg, tmp_path / "full")
    half = tmp_path / "full" / f"step{cfg.run.steps // 2:07d}.rsm"
    resumed = tr.train(cfg, tmp_path / "resumed", resume=half)
    assert resumed.step_count == full.step_count == cfg.run.steps
    full_rows = read_rows(tmp_path / "full" / "metrics.csv")
    res_rows = read_rows(tmp_path / "resumed" / "metrics.csv")
    assert res_rows[0] == full_rows[0]
    tail = full_rows[-len(res_rows) + 1:]
    assert res_rows[1:] == tail  # same values, same columns, step counter continues
    _, ta = checkpoint.load(tmp_path / "full" / "final.rsm")
    _, tb = checkpoint.load(tmp_path / "resumed" / "final.rsm")
    assert ta.keys() == tb.keys()
    for k in ta:
        np.testing.assert_array_equal(ta[k], tb[k])


def test_resume_rejects_incompatible_checkpoint(tmp_path):
    cfg = cfgmod.parse(TINY["erg"])
    tr.train(cfg, tmp_path / "a")
    other = cfgmod.parse(TINY["erg"].replace("groups = 20", "groups = 24"))
    with pytest.raises(checkpoint.CheckpointError, match="groups"):
        tr.train(other, tmp_path / "b", resume=tmp_path / "a" / "final.rsm")


def test_evaluation_leaves_training_state_alone(tmp_path):
    cfg = cfgmod.parse(TINY["erg"])
    task = tr.make_task(cfg)
    for _ in range(3):
        task.step()
    before = [a.copy() for a in (task.model.state.phi, task.model.state.psi, task.model.state.xR)]
    rng_state = task.model.rng.getstate()
    task.evaluate()
    after = (task.model.state.phi, task.model.state.psi, task.model.state.xR)
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)
    assert task.model.rng.getstate() == rng_state


def test_forgetting_changes_exposure_but_stays_deterministic(tmp_path):
    text = TINY["lm"]
    runs = {}
    for name, mu in (("a", "0.2"), ("b", "0.2"), ("c", "0.0")):
        cfg = cfgmod.parse(text.replace("mu = 0.2", f"mu = {mu}"))
        tr.train(cfg, tmp_path / name)
        runs[name] = (tmp_path / name / "metrics.csv").read_bytes()
    assert runs["a"] == runs["b"]
    assert runs["a"] != runs["c"]


# CLI ----------------------------------------------------------------------------


def test_untrained_image_model_is_near_chance(tmp_path):
    cfg = write_cfg(tmp_path, "image_seq")
    assert run_cli("eval", "--config", cfg, "--out", tmp_path, "--untrained") == 0
    rows = read_rows(tmp_path / "eval.csv")
    assert rows[0] == ["accuracy"]
    assert 0.0 <= float(rows[1][0]) <= 0.25


def test_balls_eval_reports_baseline(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "balls")
    assert run_cli("train", "--config", cfg, "--out", tmp_path, "--quiet") == 0
    assert run_cli("eval", "--config", cfg, "--out", tmp_path) == 0
    header = read_rows(tmp_path / "eval.csv")[0]
    assert "baseline_error" in header and "nf_error" in header
    assert "baseline_error" in capsys.readouterr().out


def test_lm_eval_is_one_csv_row(tmp_path):
    cfg = write_cfg(tmp_path, "lm")
    assert run_cli("train", "--config", cfg, "--out", tmp_path, "--quiet") == 0
    assert run_cli("eval", "--config", cfg, "--out", tmp_path, "--max-tokens", "2000") == 0
    rows = read_rows(tmp_path / "eval.csv")
    assert len(rows) == 2
    for col in ("rsm_ppl", "kn5_ppl", "cache_ppl", "ensemble_ppl"):
        assert col in rows[0]
    vals = dict(zip(rows[0], map(float, rows[1])))
    assert vals["ensemble_ppl"] <= min(vals["rsm_ppl"], vals["kn5_ppl"], vals["cache_ppl"]) * 1.05


def test_generate_frames_and_header_only_file(tmp_path):
    cfg = write_cfg(tmp_path, "balls")
    assert run_cli("train", "--config", cfg, "--out", tmp_path, "--quiet") == 0
    assert run_cli("generate", "--config", cfg, "--out", tmp_path) == 0
    gen = read_bbv1(tmp_path / "generated.bbv")
    prime = read_bbv1(tmp_path / "priming.bbv")
    assert gen.shape == (1, 3, 30, 30) and prime.shape == (1, 4, 30, 30)
    assert gen.min() >= 0 and gen.max() <= 1
    pgm = (tmp_path / "frames" / "gen_0000.pgm").read_bytes()
    assert pgm.startswith(b"P5\n30 30\n255\n") and len(pgm) == len(b"P5\n30 30\n255\n") + 900
    assert run_cli("generate", "--config", cfg, "--out", tmp_path, "--frames", "0") == 0
    assert (tmp_path / "generated.bbv").stat().st_size == 20
    assert read_bbv1(tmp_path / "generated.bbv").shape == (1, 0, 30, 30)


def test_generate_needs_balls_config(tmp_path):
    assert run_cli("generate", "--config", write_cfg(tmp_path, "erg"), "--out", tmp_path) == 2


def test_datagen_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, "balls")
    for name in ("a", "b"):
        assert run_cli("datagen", "--config", cfg, "--seed", 5, "--out", tmp_path / name, "--count", 7) == 0
    a = (tmp_path / "a" / "balls.bbv").read_bytes()
    assert a == (tmp_path / "b" / "balls.bbv").read_bytes()
    data = read_bbv1(tmp_path / "a" / "balls.bbv")
    assert data.shape == (7, 8, 30, 30)
    assert a[:4] == b"BBV1" and np.frombuffer(a[4:20], "<u4").tolist() == [7, 8, 30, 30]
    assert run_cli("datagen", "--config", cfg, "--seed", 6, "--out", tmp_path / "c", "--count", 7) == 0
    assert (tmp_path / "c" / "balls.bbv").read_bytes() != a


def test_datagen_other_tasks(tmp_path):
    assert run_cli("datagen", "--config", write_cfg(tmp_path, "erg"), "--out", tmp_path / "e",
                   "--count", 12) == 0
    lines = (tmp_path / "e" / "erg.txt").read_text().split()
    assert len(lines) == 12 and all(s[0] == "B" and s[-1] == "E" for s in lines)
    assert run_cli("datagen", "--config", write_cfg(tmp_path, "image_seq"), "--out", tmp_path / "i",
                   "--count", 12) == 0
    cfg = cfgmod.parse(TINY["image_seq"].replace("synthetic = true", f"dir = {tmp_path / 'i'}"))
    pools, test_pools = tr.load_pools(cfg, None)
    assert sorted(pools) == list(range(10)) and len(pools[3]) == 10 and len(test_pools[3]) == 2
    assert run_cli("datagen", "--config", write_cfg(tmp_path, "lm"), "--out", tmp_path / "l",
                   "--count", 3000) == 0
    ids = np.fromfile(tmp_path / "l" / "train.ids", "<i4")
    vocab = (tmp_path / "l" / "vocab.txt").read_text().split("\n")
    assert ids.max() < len(vocab) - 1


@pytest.mark.parametrize("argv, code", [
    (["train", "--config", "/nonexistent.ini"], 2),
    (["eval", "--config", "{erg}", "--out", "{tmp}/empty"], 3),
    (["eval", "--config", "{erg}", "--checkpoint", "{tmp}/bad.rsm"], 3),
    (["train", "--config", "{nodata}"], 3),
])
def test_exit_codes(tmp_path, argv, code):
    (tmp_path / "bad.rsm").write_bytes(b"RSM1 not really")
    (tmp_path / "nodata.ini").write_text("[run]\ntask = lm\n[data]\ndir = /nonexistent\n")
    erg = write_cfg(tmp_path, "erg")
    args = [a.format(erg=erg, tmp=tmp_path, nodata=tmp_path / "nodata.ini") for a in argv]
    if "--out" not in args:
        args += ["--out", str(tmp_path / "out")]
    assert cli.main(args) == code


def test_psi_classifier_input_survives_checkpoint():
    from rsm.layer import RsmConfig
    from rsm.model import MemoryModel
    from rsm.prng import Xoshiro256

    m = MemoryModel(RsmConfig(input_size=4, groups=5, cells=2, k=2, epsilon=0.7), hidden=6,
                    labels=3, batch=2, rng=Xoshiro256(3), classifier_input="psi")
    x = np.eye(4, dtype=np.float32)[:2]
    m.train_step(x, x, labels=np.array([0, 1]))
    np.testing.assert_array_equal(m.features(), m.state.psi.reshape(2, -1))
    back = MemoryModel.from_checkpoint(*m.to_checkpoint())
    assert back.classifier_input == "psi"
    np.testing.assert_array_equal(back.predict(x), m.eval_clone().predict(x))
    with pytest.raises(ValueError):
        MemoryModel(m.config, hidden=6, labels=3, batch=2, rng=Xoshiro256(3), classifier_input="y")
    with pytest.raises(ConfigError):
        cfgmod.parse("[run]\ntask = lm\n[classifier]\ninput = y\n")
