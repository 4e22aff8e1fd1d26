"""Optimizer, learning-rate schedule, metrics log, PPM files, prompts."""

import json
import math

import numpy as np
import pytest

from subjectforge.numerics import Tensor
from subjectforge.pipeline.metrics import (MetricsWriter, read_metrics,
                                           strip_wall_time)
from subjectforge.pipeline.optim import AdamW, lr_at
from subjectforge.pipeline.ppm import (PpmError, read_ppm, read_sidecar,
                                       write_ppm, write_sidecar)
from subjectforge.pipeline.prompts import (CAPTION_GUIDANCE, PromptError,
                                           SUBJECT_GUIDANCE, parse_prompt)


# -- lr schedule -------------------------------------------------------------

def test_lr_warmup_ramps_linearly():
    assert lr_at(0, 1.0, 4, 100) == pytest.approx(0.25)
    assert lr_at(3, 1.0, 4, 100) == pytest.approx(1.0)


def test_lr_decays_linearly_to_zero():
    peak = lr_at(9, 2.0, 10, 20)
    assert peak == pytest.approx(2.0)
    assert lr_at(19, 2.0, 10, 20) == pytest.approx(0.2)
    mid = lr_at(14, 2.0, 10, 20)
    assert 0.2 < mid < 2.0


def test_lr_all_warmup_run_stays_at_peak():
    assert lr_at(4, 3.0, 5, 5) == pytest.approx(3.0)


# -- AdamW -------------------------------------------------------------------

def test_adamw_first_step_matches_hand_calculation():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    g = np.array([0.5, 0.5], dtype=np.float32)
    opt = AdamW([p], beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.01)
    opt.step({p: g}, lr=0.1)
    # bias-corrected first step: m_hat = g, v_hat = g^2, so the adaptive
    # term is sign(g) up to eps; weight decay is decoupled
    expect = np.array([1.0, -2.0]) - 0.1 * (
        0.5 / (0.5 + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, expect.astype(np.float32), rtol=1e-6)


def test_adamw_decoupled_decay_shrinks_without_gradient():
    p = Tensor(np.array([4.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([p], weight_decay=0.5)
    opt.step({p: np.zeros(1, dtype=np.float32)}, lr=0.1)
    # zero gradient: only the decay term moves the weight
    assert p.data[0] == pytest.approx(4.0 - 0.1 * 0.5 * 4.0)


def test_adamw_missing_grad_means_no_update():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    q = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW([p, q], weight_decay=0.0)
    opt.step({p: np.array([1.0], dtype=np.float32)}, lr=0.01)
    assert q.data[0] == 2.0
    assert p.data[0] != 1.0


def test_adamw_state_roundtrip_resumes_identically():
    rng = np.random.default_rng(3)

    def run(resume_at=None):
        p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        opt = AdamW([p], weight_decay=0.01)
        saved = None
        for step in range(6):
            if resume_at is not None and step == resume_at:
                fresh = AdamW([p], weight_decay=0.01)
                fresh.load_state_(saved)
                opt = fresh
            g = rng.normal(size=4).astype(np.float32)
            opt.step({p: g}, lr=0.05)
            if resume_at is not None and step == resume_at - 1:
                saved = opt.state()
        return p.data.copy()

    rng = np.random.default_rng(3)
    direct = run()
    rng = np.random.default_rng(3)
    resumed = run(resume_at=3)
    np.testing.assert_array_equal(direct, resumed)


# -- metrics -----------------------------------------------------------------

def test_metrics_append_and_read(tmp_path):
    path = tmp_path / "m.jsonl"
    w = MetricsWriter(path, "0a")
    w.log(step=0, loss=1.5)
    w.log(step=1, loss=1.25, lr=0.01)
    w.close()
    rows = read_metrics(path)
    assert [r["step"] for r in rows] == [0, 1]
    assert rows[1]["lr"] == 0.01
    assert all("wall_time" in r for r in rows)


def test_metrics_lines_are_sorted_key_json(tmp_path):
    path = tmp_path / "m.jsonl"
    w = MetricsWriter(path, "1")
    w.log(step=0, zeta=1.0, alpha=2.0)
    w.close()
    line = path.read_text().strip()
    keys = list(json.loads(line))
    assert keys == sorted(keys)


def test_strip_wall_time_removes_only_clock_field(tmp_path):
    rows = [{"step": 0, "loss": 1.0, "wall_time": 123.0}]
    bare = strip_wall_time(rows)
    assert bare == [{"step": 0, "loss": 1.0}]
    assert "wall_time" in rows[0]  # original untouched


# -- ppm ---------------------------------------------------------------------

def test_ppm_roundtrip_bit_exact(tmp_path):
    img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    # quantization to 8 bits, then exact recovery of the quantized values
    np.testing.assert_array_equal(np.round(img * 255).astype(np.uint8),
                                  np.round(back * 255).astype(np.uint8))


def test_ppm_golden_bytes(tmp_path):
    img = np.zeros((3, 1, 2), dtype=np.float32)
    img[0, 0, 0] = 1.0  # first pixel pure red
    path = tmp_path / "g.ppm"
    write_ppm(path, img)
    assert path.read_bytes() == b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\x00"


def test_ppm_rejects_wrong_shape(tmp_path):
    with pytest.raises(PpmError):
        write_ppm(tmp_path / "bad.ppm", np.zeros((32, 32)))


def test_ppm_rejects_truncated_file(tmp_path):
    path = tmp_path / "t.ppm"
    write_ppm(path, np.zeros((3, 4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(PpmError, match="truncated"):
        read_ppm(path)


def test_ppm_rejects_non_p6(tmp_path):
    path = tmp_path / "p3.ppm"
    path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(PpmError, match="P6"):
        read_ppm(path)


def test_sidecar_roundtrip(tmp_path):
    img_path = tmp_path / "y.ppm"
    write_ppm(img_path, np.zeros((3, 2, 2), dtype=np.float32))
    write_sidecar(img_path, 31337)
    assert read_sidecar(img_path) == 31337
    assert (tmp_path / "y.ppm.meta").read_text() == "seed=31337\n"


# -- prompts -----------------------------------------------------------------

def test_text_only_prompt_gets_caption_guidance():
    p = parse_prompt("a red circle on white background")
    assert p.guidance == CAPTION_GUIDANCE
    assert p.image_paths == []
    assert p.text == "a red circle on white background"


def test_image_reference_switches_to_subject_guidance(tmp_path):
    f = tmp_path / "ref.ppm"
    write_ppm(f, np.zeros((3, 32, 32), dtype=np.float32))
    p = parse_prompt(f"a {{img:{f.name}}} on the left", base_dir=tmp_path)
    assert p.guidance == SUBJECT_GUIDANCE
    assert len(p.image_paths) == 1
    assert p.items[1][0] == "image"


def test_explicit_guidance_overrides_default(tmp_path):
    p = parse_prompt("a red circle", guidance=1.0)
    assert p.guidance == 1.0


def test_missing_image_file_rejected(tmp_path):
    with pytest.raises(PromptError, match="missing file"):
        parse_prompt("{img:nope.ppm}", base_dir=tmp_path)


def test_malformed_image_tag_rejected():
    with pytest.raises(PromptError, match="malformed"):
        parse_prompt("a {img:} here")


def test_empty_prompt_rejected():
    with pytest.raises(PromptError, match="empty"):
        parse_prompt("   ")


def test_prompt_is_math_free_token_split(tmp_path):
    f = tmp_path / "s.ppm"
    write_ppm(f, np.zeros((3, 32, 32), dtype=np.float32))
    p = parse_prompt(f"the  {{img:{f.name}}}   moved", base_dir=tmp_path)
    kinds = [k for k, _ in p.items]
    assert kinds == ["text", "image", "text"]
