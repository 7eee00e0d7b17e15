import dataclasses
import math

import numpy as np
import pytest

from pipeshift import search
from pipeshift.errors import ConfigError, StageError


@pytest.fixture(scope="module")
def ctx(phantoms_small, scorer, protos):
    p = phantoms_small[1]
    return search.AttackContext(p.image, p.label, 0.8, scorer, protos)


class TestDomains:
    def test_build_domain_family_slots(self):
        d = search.build_domain("AR")
        names = [p.name for p in d]
        assert names[:6] == ["a_gain", "a_cx", "a_cy", "a_rot", "a_aniso", "a_falloff"]
        assert "d_rho" not in names

    def test_override_inside_hard_bounds(self):
        d = search.build_domain("A", {"a_gain": [0.0, 0.0]})
        params = d.sample(np.random.default_rng(0))
        assert params["a_gain"] == 0.0

    def test_override_outside_hard_bounds_rejected(self):
        with pytest.raises(ConfigError):
            search.build_domain("A", {"a_gain": [-0.9, 0.9]})
        with pytest.raises(ConfigError):
            search.build_domain("A", {"bogus": [0, 1]})

    def test_spec_from_params_round_trip(self):
        d = search.build_domain("ARD")
        params = d.sample(np.random.default_rng(4))
        spec = search.spec_from_params("ARD", params)
        assert spec.a is not None and spec.r is not None and spec.d is not None
        assert spec.r.bit_depth == params["r_bits"]


class TestObjective:
    def test_neutral_identity_matches_clean(self, ctx):
        trial = ctx.evaluate("A", {
            "a_gain": 0.0, "a_cx": 0.0, "a_cy": 0.0, "a_rot": 0.0,
            "a_aniso": 1.0, "a_falloff": 2.0,
        })
        assert trial.objective == ctx.j_clean
        assert trial.alpha_star == 1.0

    def test_ok_trials_respect_constraints(self, ctx, rng):
        domain = search.build_domain("RD")
        for _ in range(5):
            trial = ctx.evaluate("RD", domain.sample(rng))
            assert trial.status == "ok"
            assert trial.ssim_global >= ctx.tau - 1e-9
            assert trial.ssim_roi >= ctx.tau - 1e-9

    def test_stage_error_discards(self, ctx, monkeypatch):
        def boom(img, theta):
            raise StageError("codec hiccup")

        monkeypatch.setattr(search, "apply_family", lambda img, spec: boom(img, spec))
        trial = ctx.evaluate("D", {"d_rho": 0.5, "d_quality": 50})
        assert trial.status == "discarded"
        assert math.isinf(trial.objective)


class TestSamplers:
    def test_budget_one_deterministic(self, ctx):
        a = search.random_search(ctx, "R", budget=1, seed=5)
        b = search.random_search(ctx, "R", budget=1, seed=5)
        assert a.best.params == b.best.params
        assert a.best.objective == b.best.objective

    def test_nested_budget_prefix(self, ctx):
        short = search.random_search(ctx, "R", budget=10, seed=5)
        long = search.random_search(ctx, "R", budget=25, seed=5)
        assert [t.params for t in short.trials] == [t.params for t in long.trials[:10]]
        assert long.best.objective <= short.best.objective

    def test_tpe_startup_equals_random(self, ctx):
        r = search.random_search(ctx, "AR", budget=10, seed=9)
        t = search.tpe_optimize(ctx, "AR", budget=10, seed=9)
        assert [x.params for x in r.trials] == [x.params for x in t.trials]

    def test_tpe_prefix_property(self, ctx):
        short = search.tpe_optimize(ctx, "R", budget=15, seed=3)
        long = search.tpe_optimize(ctx, "R", budget=30, seed=3)
        assert [t.params for t in short.trials] == [t.params for t in long.trials[:15]]
        assert long.best.objective <= short.best.objective

    def test_budget_validation(self, ctx):
        with pytest.raises(ConfigError):
            search.random_search(ctx, "R", budget=0, seed=1)


class TestRandomSearchFixture:
    def test_family_r_flips_enough_attackable_phantoms(self, scorer, protos):
        from pipeshift import scoring

        phantoms = scoring.gen_phantoms(30, seed=606)
        attackable = 0
        flips = 0
        for i, p in enumerate(phantoms):
            ctx = search.AttackContext(p.image, p.label, 0.8, scorer, protos)
            if ctx.j_clean <= 0:
                continue
            attackable += 1
            result = search.random_search(ctx, "R", budget=40, seed=1000 + i)
            flips += result.best is not None and result.best.objective < 0
        assert attackable > 0
        assert flips / attackable >= 0.30


class TestAttackSample:
    def test_singleton_family(self, phantoms_small, scorer, protos):
        p = phantoms_small[0]
        rec, adv = search.attack_sample(
            p.image, p.label, "one", tau=0.8, optimizer="random", budget=5,
            seed=1, scorer=scorer, protos=protos, families=("R",),
        )
        assert rec.winner_family == "R"
        assert set(rec.per_family) == {"R"}

    def test_winner_is_argmin(self, phantoms_small, scorer, protos):
        p = phantoms_small[2]
        rec, _ = search.attack_sample(
            p.image, p.label, "argmin", tau=0.8, optimizer="random", budget=6,
            seed=2, scorer=scorer, protos=protos,
        )
        best = min(o.objective for o in rec.per_family.values())
        assert rec.per_family[rec.winner_family].objective == best
        assert all(rec.j_adv <= o.objective or rec.j_adv == rec.j_clean
                   for o in rec.per_family.values())

    def test_restricted_campaign_reproduces_family_column(self, phantoms_small, scorer, protos):
        p = phantoms_small[3]
        kwargs = dict(tau=0.8, optimizer="tpe", budget=12, seed=77, scorer=scorer, protos=protos)
        full, _ = search.attack_sample(p.image, p.label, "full", **kwargs)
        only_d, _ = search.attack_sample(p.image, p.label, "full", families=("D",), **kwargs)
        assert only_d.per_family["D"].objective == full.per_family["D"].objective
        assert only_d.per_family["D"].params == full.per_family["D"].params

    def test_reproducible_records(self, phantoms_small, scorer, protos):
        p = phantoms_small[4]
        kwargs = dict(tau=0.9, optimizer="tpe", budget=8, seed=5, scorer=scorer,
                      protos=protos, keep_traces=True)
        r1, a1 = search.attack_sample(p.image, p.label, "x", **kwargs)
        r2, a2 = search.attack_sample(p.image, p.label, "x", **kwargs)
        assert dataclasses.asdict(r1) == dataclasses.asdict(r2)
        assert np.array_equal(a1, a2)

    def test_invalid_optimizer_and_families(self, phantoms_small, scorer, protos):
        p = phantoms_small[0]
        with pytest.raises(ConfigError):
            search.attack_sample(p.image, p.label, "x", tau=0.8, optimizer="sgd",
                                 budget=1, seed=0, scorer=scorer, protos=protos)
        with pytest.raises(ConfigError):
            search.attack_sample(p.image, p.label, "x", tau=0.8, optimizer="random",
                                 budget=1, seed=0, scorer=scorer, protos=protos,
                                 families=())

    def test_archived_image_revalidates(self, phantoms_small, scorer, protos):
        from pipeshift import imaging, similarity

        p = phantoms_small[5]
        rec, adv = search.attack_sample(
            p.image, p.label, "x", tau=0.8, optimizer="random", budget=10,
            seed=3, scorer=scorer, protos=protos,
        )
        mask = imaging.roi_mask(p.image)
        assert similarity.ssim_global(p.image, adv) >= 0.8 - 1e-9
        assert similarity.ssim_roi(p.image, adv, mask) >= 0.8 - 1e-9


def _record(j_clean, j_adv, per_family=None):
    fams = per_family or {}
    outcomes = {
        f: search.FamilyOutcome(f, obj, {}, 1.0, 0.9, 0.9, "ok") for f, obj in fams.items()
    }
    return search.AttackRecord(
        sample_id="s", label=1, modality_tag="", tau=0.8, optimizer="random",
        seed=0, trials_per_family=1, j_clean=j_clean, clean_correct=j_clean > 0,
        winner_family="R", winner_params={}, alpha_star=1.0, ssim_global=0.9,
        ssim_roi=0.9, j_adv=j_adv, success=j_clean > 0 and j_adv < 0,
        per_family=outcomes,
    )


class TestSuccessRate:
    def test_all_flips(self):
        records = [_record(0.5, -0.1) for _ in range(4)]
        assert search.success_rate(records) == 100.0

    def test_no_clean_correct_undefined(self):
        records = [_record(-0.5, -0.6) for _ in range(3)]
        assert search.success_rate(records) is None

    def test_seven_of_ten(self):
        records = [_record(0.5, -0.1) for _ in range(7)]
        records += [_record(0.5, 0.2) for _ in range(3)]
        assert search.success_rate(records) == 70.0

    def test_family_filter_uses_per_family_best(self):
        records = [
            _record(0.5, -0.1, {"A": 0.2, "R": -0.3}),
            _record(0.5, -0.1, {"A": -0.2, "R": 0.3}),
        ]
        assert search.success_rate(records, "A") == 50.0
        assert search.success_rate(records, "R") == 50.0
        assert search.success_rate(records, "D") == 0.0
