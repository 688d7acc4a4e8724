"""Pinned reference-run outputs: golden CSV and measured dynamics.

These freeze what the pinned configs actually produce so regressions in any
layer (PRNG, encoder, losses, trainer, harness) surface as diffs here.
"""

from pathlib import Path

import numpy as np
import pytest

from gradalign.datagen import sample_episode
from gradalign.harness import _downstream_protos, cmd_fewshot, reference_config
from gradalign.surgery import Branch, UpdateRule
from gradalign.trainer import train

GOLDEN = Path(__file__).parent / "golden"


def rows_of(text: str):
    lines = text.splitlines()
    header = lines[0].split(",")
    return header, [dict(zip(header, ln.split(","))) for ln in lines[1:]]


@pytest.mark.slow
def test_reference_fewshot_matches_committed_golden(tmp_path):
    cfg = reference_config("fewshot")
    assert cmd_fewshot(cfg, str(tmp_path)) == 0
    got_header, got = rows_of((tmp_path / "fewshot.csv").read_text())
    want_header, want = rows_of((GOLDEN / "fewshot_reference.csv").read_text())
    assert got_header == want_header
    assert len(got) == len(want) == 75  # 5 rules x 5 shots x 3 seeds
    for g, w in zip(got, want):
        for col in got_header:
            if col == "mean_late_angle":
                # arccos goes through libm; allow last-ulp variation across platforms
                assert float(g[col]) == pytest.approx(float(w[col]), rel=1e-9)
            else:
                assert g[col] == w[col], f"{col}: {g[col]} != {w[col]}"


def test_prograd_branch_profile_near_teacher_is_conflict_dominated():
    """Measured on the pinned gap-0 config and frozen here: because the student
    is initialized exactly at the teacher prompt, the teacher-KL gradient turns
    to oppose any few-shot move right after step 0, so early steps run almost
    entirely in the conflict branch (step 0 itself is aligned with a zero
    teacher gradient)."""
    from dataclasses import replace

    cfg = replace(reference_config("angles"), gap_rotation_deg=0.0, gap_shift=0.0, seeds=(0, 1, 2))
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    for seed in cfg.seeds:
        ep = sample_episode(protos, cfg.domain_spec(), 4, cfg.episode_seed(4, seed))
        _, rec = train(vlm, ep, cfg.train_config(UpdateRule.prograd(1.0), 4, seed))
        assert rec.steps[0].branch == Branch.ALIGNED.value  # zero teacher gradient at init
        early = rec.steps[: len(rec.steps) // 4]
        conflict_frac = float(np.mean([s.branch == Branch.CONFLICT.value for s in early]))
        assert conflict_frac >= 0.9


def test_reference_base2new_prograd_dominates_ce_harmonic_mean():
    """Verified once on the pinned base-to-new config, then frozen: mean
    harmonic mean of the projection rule exceeds CE by at least 0.02."""
    cfg = reference_config("base2new")
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    ce_hm, pg_hm = [], []
    for seed in cfg.seeds[:12]:  # subset is enough to pin the direction
        ep = sample_episode(protos, cfg.domain_spec(), 1, cfg.episode_seed(1, seed))
        _, rc = train(vlm, ep, cfg.train_config(UpdateRule.ce(), 1, seed))
        _, rp = train(vlm, ep, cfg.train_config(UpdateRule.prograd(1.0), 1, seed))
        ce_hm.append(rc.final.harmonic_mean)
        pg_hm.append(rp.final.harmonic_mean)
    assert float(np.mean(pg_hm)) >= float(np.mean(ce_hm)) + 0.02
