import re

import numpy as np

from seqdet.train import fit, load_run, model_arrays

from conftest import micro_config

LINE = re.compile(
    r"^step=(\d+) epoch=(\d+) lr=[0-9.e+-]+ loss=[0-9.]+ images=(\d+) effective_batch=(\d+)$"
)


def _step_lines(path):
    return [l for l in path.read_text().splitlines() if l.startswith("step=")]


def test_log_one_line_per_step(tmp_path):
    fit(micro_config(), tmp_path, evaluate_at_end=False)
    lines = _step_lines(tmp_path / "train.log")
    assert len(lines) == 4  # 8 images / batch 4, two epochs
    for i, line in enumerate(lines, 1):
        m = LINE.match(line)
        assert m, line
        assert int(m.group(1)) == i
        assert int(m.group(4)) == 2 * int(m.group(3))


def test_single_view_effective_batch(tmp_path):
    fit(micro_config({"training.two_views_per_image": False}), tmp_path, max_steps=1, evaluate_at_end=False)
    m = LINE.match(_step_lines(tmp_path / "train.log")[0])
    assert m.group(3) == m.group(4) == "4"


def test_final_eval_line(tmp_path):
    res = fit(micro_config(), tmp_path, max_steps=1)
    last = (tmp_path / "train.log").read_text().splitlines()[-1]
    assert last.startswith("eval step=1 AP=")
    assert res.metrics is not None


def test_resume_matches_uninterrupted(tmp_path):
    cfg = micro_config()
    full = fit(cfg, tmp_path / "full", evaluate_at_end=False)
    fit(cfg, tmp_path / "part", max_steps=2, evaluate_at_end=False)
    resumed = fit(cfg, tmp_path / "part", resume=tmp_path / "part" / "final.ckpt", evaluate_at_end=False)
    assert resumed.step == full.step == 4
    a, b = model_arrays(full.model), model_arrays(resumed.model)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert (tmp_path / "part" / "final.ckpt").read_bytes() == (tmp_path / "full" / "final.ckpt").read_bytes()
    assert len(_step_lines(tmp_path / "part" / "train.log")) == 4


def test_checkpoint_every(tmp_path):
    fit(micro_config({"training.checkpoint_every": 2}), tmp_path, evaluate_at_end=False)
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["final.ckpt", "step0000002.ckpt", "step0000004.ckpt"]
    assert load_run(tmp_path / "step0000002.ckpt").step == 2
