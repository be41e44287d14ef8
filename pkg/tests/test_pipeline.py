import json

import pytest

from dicelab import fileio
from dicelab import pipeline as pl
from dicelab.errors import ConfigError, DataError
from dicelab.model import BASE

TINY = [
    "n_utts=10",
    "min_seconds=1.0",
    "max_seconds=1.0",
    "steps=6",
    "batch_size=4",
    "probe_steps=5",
    "stage1.K=4",
    "stage2.K=4",
    "model.D=16",
    "model.H=2",
    "model.F=32",
    "model.conv_channels=[8,8,8,8,8]",
]


def tiny(name, *extra):
    return pl.apply_overrides(pl.preset(name), TINY + list(extra))


@pytest.fixture(scope="module")
def narrow_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("narrow")
    return pl.run_plan(tiny("dice-narrow2"), out), out


def test_preset_shapes():
    p = pl.preset("dice-narrow2")
    s2 = p.stages[1].resolve_model(p.base())
    assert (s2.L, s2.D) == (BASE.L, BASE.D // 2)
    soft = pl.preset("soft-tau5").stages[1]
    assert (soft.label_mode, soft.tau, soft.loss_mode) == ("soft", 5.0, "soft")
    scratch = pl.preset("scratch-lowerbound")
    models = [s.resolve_model(scratch.base()) for s in scratch.stages]
    assert models[0].D == models[1].D == BASE.D // 2 and models[0].L == models[1].L
    assert len(pl.preset("teacher-n2").stages) == 3
    assert pl.preset("feat-baseline").stages[1].label_mode == "none"
    assert pl.preset("mixed-0.1").stages[1].feat_weight == 0.1
    shallow = [pl.preset(n).stages[1].resolve_model(BASE).L for n in ("dice-shallow4", "dice-shallow6")]
    assert shallow[0] > shallow[1] >= 1
    with pytest.raises(ConfigError):
        pl.preset("nope")


def test_every_preset_validates():
    for name in pl.PRESETS:
        plan = pl.preset(name)
        assert pl.IterationPlan.from_json(json.loads(json.dumps(plan.to_json()))).digest() == plan.digest()


def test_plan_validation():
    with pytest.raises(ConfigError):
        pl.IterationPlan("x", [pl.StageSpec(target="prev")])
    with pytest.raises(ConfigError):
        pl.IterationPlan("x", [pl.StageSpec(loss_mode="feat", label_mode="none")])
    with pytest.raises(ConfigError):
        pl.IterationPlan("x", [pl.StageSpec(), pl.StageSpec(target="prev", label_mode="soft", loss_mode="hard")])
    with pytest.raises(ConfigError):
        pl.IterationPlan("x", [pl.StageSpec(), pl.StageSpec(target="prev", label_mode="soft", loss_mode="soft", tau=0.0)])


def test_overrides():
    p = pl.apply_overrides(pl.preset("dice-narrow2"), ["seed=7", "stage2.tau=2.5", "steps=10", "n_utts=5", "model.D=32"])
    assert (p.seed, p.stages[1].tau, p.train["steps"], p.corpus.n_utts, p.base_model["D"]) == (7, 2.5, 10, 5, 32)
    for bad in (["stage9.K=3"], ["stage1.nope=1"], ["bogus=1"], ["noequals"], ["labels_path=x"]):
        with pytest.raises(ConfigError):
            pl.apply_overrides(pl.preset("dice-narrow2"), bad)


def test_derive_seed_is_stable():
    assert pl.derive_seed(7, "stage1") == pl.derive_seed(7, "stage1")
    assert pl.derive_seed(7, "stage1") != pl.derive_seed(7, "stage2")
    assert 0 <= pl.derive_seed(0, "corpus") < 2**32


def test_run_writes_one_checkpoint_per_stage(narrow_run):
    manifest, out = narrow_run
    assert [s["name"] for s in manifest["stages"]] == ["stage1", "stage2"]
    for st in manifest["stages"]:
        assert set(st["artifacts"]) >= {"features", "codebook", "labels", "checkpoint"}
        assert (out / st["artifacts"]["checkpoint"]["path"]).exists()
        assert 0 <= st["metrics"]["phoneme_acc"] <= 1
    assert manifest["stages"][1]["model_config"]["D"] == 8
    assert len(pl.verify_manifest(out)) == 2 + 2 * len(manifest["stages"][0]["artifacts"])


def test_run_is_reproducible(narrow_run, tmp_path):
    manifest, _ = narrow_run
    again = pl.run_plan(tiny("dice-narrow2"), tmp_path)
    digests = lambda m: [{k: a["sha256"] for k, a in s["artifacts"].items()} for s in m["stages"]]
    assert digests(again) == digests(manifest)
    assert again["corpus"] == manifest["corpus"]


def test_later_stages_never_touch_earlier_artifacts(narrow_run):
    manifest, out = narrow_run
    for ref in manifest["stages"][0]["artifacts"].values():
        assert fileio.file_digest(out / ref["path"]) == ref["sha256"]


def test_verify_detects_tampering(narrow_run, tmp_path):
    _, out = narrow_run
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    m, _ = pl.load_manifest(copy)
    target = copy / m["stages"][0]["artifacts"]["labels"]["path"]
    target.write_bytes(target.read_bytes()[:-1] + b"\x01")
    with pytest.raises(DataError):
        pl.verify_manifest(copy)
    target.unlink()
    with pytest.raises(DataError):
        pl.verify_manifest(copy)
    with pytest.raises(DataError):
        pl.load_manifest(tmp_path / "nothing")


def test_report_rows(narrow_run, tmp_path):
    _, out = narrow_run
    text = pl.report([out])
    lines = text.splitlines()
    assert lines[0].split() == list(pl.REPORT_COLUMNS)
    assert "prev@L2" in text and "L4xD8" in text
    rows = pl.report([out, out], as_json=True)
    assert len(rows["stages"]) == 4 and "phoneme" in rows["rankings"]


def test_soft_and_mixed_stages_run(tmp_path):
    soft = pl.run_plan(tiny("soft-tau5", "probe=false"), tmp_path / "soft")
    assert soft["stages"][1]["spec"]["tau"] == 5.0
    mixed = pl.run_plan(tiny("mixed-0.1", "probe=false"), tmp_path / "mixed")
    assert "teacher" not in mixed["stages"][0]["artifacts"]
    assert "mixed(0.1)" in pl.report([tmp_path / "mixed"])


def test_directional_comparison(narrow_run):
    _, out = narrow_run
    cmp = pl.directional_comparison(out, out)
    assert cmp["delta"] == 0.0 and cmp["holds"]
