"""Attack mechanics: budgets, reductions, isolation, determinism.

Statistical effectiveness against trained models is covered by the acceptance
suite, which owns the trained checkpoints.
"""

import numpy as np
import pytest

from conftest import small_model, tiny_episode
from pnodeseg.attacks import AttackSpec, fgsm_attack, pgd_attack, run_attack, smia_attack
from pnodeseg.model import episode_loss
from pnodeseg.tensor import Tensor


def _images_of(episode, target):
    if target == "query":
        return [np.asarray(i.data if isinstance(i, Tensor) else i) for i in episode.query_images]
    return [np.asarray(i.data if isinstance(i, Tensor) else i)
            for c in episode.classes for i in episode.support_images[c]]


class TestAttackSpec:
    def test_validation(self):
        with pytest.raises(ValueError, match="family"):
            AttackSpec("dag", 0.02)
        with pytest.raises(ValueError, match="target"):
            AttackSpec("fgsm", 0.02, target="prototypes")
        with pytest.raises(ValueError, match="epsilon"):
            AttackSpec("fgsm", 0.0)
        with pytest.raises(ValueError, match="n_iters"):
            AttackSpec("pgd", 0.02, n_iters=0)
        with pytest.raises(ValueError, match="step_size"):
            AttackSpec("pgd", 0.02, step_size=0.05, n_iters=10)

    def test_fgsm_forces_single_iteration(self):
        assert AttackSpec("fgsm", 0.02, n_iters=10).n_iters == 1

    def test_default_step_schedule(self):
        spec = AttackSpec("pgd", 0.01, n_iters=10)
        assert spec.step_size == pytest.approx(2.5 * 0.01 / 10)
        assert AttackSpec("pgd", 0.01, n_iters=1).step_size == 0.01


class TestFgsm:
    def test_zero_gradient_leaves_images_unchanged(self):
        model = small_model()
        for p in model.parameters():
            p.data[:] = 0.0  # constant model: every image gradient is exactly zero
        episode = tiny_episode(np.random.default_rng(0))
        adv = fgsm_attack(model, episode, AttackSpec("fgsm", 0.02))
        for before, after in zip(_images_of(episode, "query"), _images_of(adv, "query")):
            assert before.tobytes() == after.tobytes()

    def test_budget_holds_exactly(self):
        model = small_model()
        rng = np.random.default_rng(1)
        for _ in range(5):
            episode = tiny_episode(rng)
            adv = fgsm_attack(model, episode, AttackSpec("fgsm", 0.02))
            for before, after in zip(_images_of(episode, "query"), _images_of(adv, "query")):
                assert np.max(np.abs(after - before)) <= 0.02
                assert after.min() >= 0.0 and after.max() <= 1.0

    def test_ternary_perturbation_away_from_box(self):
        model = small_model()
        rng = np.random.default_rng(2)
        episode = tiny_episode(rng, interior=True)
        eps = 0.02
        adv = fgsm_attack(model, episode, AttackSpec("fgsm", eps))
        delta = _images_of(adv, "query")[0] - _images_of(episode, "query")[0]
        near = np.min(np.abs(delta[..., None] - np.array([-eps, 0.0, eps])), axis=-1)
        assert np.max(near) < 1e-12


class TestPgd:
    def test_single_full_step_equals_fgsm(self):
        model = small_model()
        episode = tiny_episode(np.random.default_rng(3))
        a = fgsm_attack(model, episode, AttackSpec("fgsm", 0.02))
        b = pgd_attack(model, episode,
                       AttackSpec("pgd", 0.02, step_size=0.02, n_iters=1, random_start=False))
        for lhs, rhs in zip(_images_of(a, "query"), _images_of(b, "query")):
            assert lhs.tobytes() == rhs.tobytes()

    def test_budget_holds_exactly_with_random_start(self):
        model = small_model()
        rng = np.random.default_rng(4)
        for _ in range(3):
            episode = tiny_episode(rng)
            adv = pgd_attack(model, episode, AttackSpec("pgd", 0.01, n_iters=4),
                             rng=np.random.default_rng(9))
            for before, after in zip(_images_of(episode, "query"), _images_of(adv, "query")):
                assert np.max(np.abs(after - before)) <= 0.01
                assert after.min() >= 0.0 and after.max() <= 1.0

    def test_deterministic_given_seed(self):
        model = small_model()
        episode = tiny_episode(np.random.default_rng(5))
        spec = AttackSpec("pgd", 0.01, n_iters=3)
        a = pgd_attack(model, episode, spec, rng=np.random.default_rng(42))
        b = pgd_attack(model, episode, spec, rng=np.random.default_rng(42))
        for lhs, rhs in zip(_images_of(a, "query"), _images_of(b, "query")):
            assert lhs.tobytes() == rhs.tobytes()

    def test_increases_loss_over_iterations(self):
        model = small_model(seed=7)
        episode = tiny_episode(np.random.default_rng(6))
        clean = episode_loss(model, episode).item()
        adv = pgd_attack(model, episode, AttackSpec("pgd", 0.04, n_iters=5, random_start=False))
        assert episode_loss(model, adv).item() > clean


class TestSmia:
    def test_lambda_zero_reduces_to_pgd_zero_start(self):
        model = small_model()
        episode = tiny_episode(np.random.default_rng(7))
        a = smia_attack(model, episode, AttackSpec("smia", 0.04, n_iters=3, smia_lambda=0.0))
        b = pgd_attack(model, episode,
                       AttackSpec("pgd", 0.04, n_iters=3, random_start=False))
        for lhs, rhs in zip(_images_of(a, "query"), _images_of(b, "query")):
            assert lhs.tobytes() == rhs.tobytes()

    def test_budget_holds_exactly(self):
        model = small_model()
        episode = tiny_episode(np.random.default_rng(8))
        adv = smia_attack(model, episode, AttackSpec("smia", 0.04, n_iters=3, smia_lambda=1.0))
        for before, after in zip(_images_of(episode, "query"), _images_of(adv, "query")):
            assert np.max(np.abs(after - before)) <= 0.04
            assert after.min() >= 0.0 and after.max() <= 1.0


class TestTargetIsolation:
    @pytest.mark.parametrize("family,kw", [("fgsm", {}), ("pgd", {"n_iters": 2}),
                                           ("smia", {"n_iters": 2})])
    def test_untargeted_set_and_masks_untouched(self, family, kw):
        model = small_model()
        rng = np.random.default_rng(9)
        episode = tiny_episode(rng, k_shot=2)
        for target, other in (("query", "support"), ("support", "query")):
            adv = run_attack(model, episode, AttackSpec(family, 0.02, target=target, **kw),
                             rng=np.random.default_rng(1))
            for before, after in zip(_images_of(episode, other), _images_of(adv, other)):
                assert before.tobytes() == after.tobytes()
            changed = any(b.tobytes() != a.tobytes() for b, a in
                          zip(_images_of(episode, target), _images_of(adv, target)))
            assert changed
            for cls in episode.classes:
                for m0, m1 in zip(episode.support_masks[cls], adv.support_masks[cls]):
                    assert np.array_equal(m0, m1)
            for m0, m1 in zip(episode.query_masks, adv.query_masks):
                assert np.array_equal(m0, m1)

    def test_attack_does_not_mutate_parameters(self):
        model = small_model()
        episode = tiny_episode(np.random.default_rng(10))
        before = {k: v.data.tobytes() for k, v in model.named_parameters().items()}
        run_attack(model, episode, AttackSpec("smia", 0.02, n_iters=2))
        after = {k: v.data.tobytes() for k, v in model.named_parameters().items()}
        assert before == after
        assert all(p.grad is None for p in model.parameters())
