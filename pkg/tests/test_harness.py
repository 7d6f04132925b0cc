"""Harness tests: dice, optimizers, training loops, evaluation, config, experiment."""

import csv

import numpy as np
import pytest

from conftest import small_model, tiny_episode
from pnodeseg.attacks import AttackSpec
from pnodeseg.config import Config, ConfigError, parse_config_text
from pnodeseg.data import generate_dataset, load_dataset, source_domain, shifted_domain, split_train_test
from pnodeseg.harness import (EvalRow, SgdOptimizer, TrainConfig, dice, evaluate,
                              run_experiment, train_sat, train_standard)
from pnodeseg.model import episode_loss
from pnodeseg.tensor import Tensor


class TestDice:
    def test_identity_is_one(self):
        mask = np.zeros((6, 6), dtype=int)
        mask[2:4, 2:4] = 1
        assert dice(mask, mask, 1) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros((6, 6), dtype=int)
        b = np.zeros((6, 6), dtype=int)
        a[0, 0] = 1
        b[5, 5] = 1
        assert dice(a, b, 1) == 0.0

    def test_direct_formula(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a.flat[:4] = 1
        b.flat[1:7] = 1  # |A|=4, |B|=6, overlap=3
        assert dice(a, b, 1) == pytest.approx(0.6)

    def test_both_empty_is_one(self):
        assert dice(np.zeros((3, 3), dtype=int), np.zeros((3, 3), dtype=int), 1) == 1.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.integers(0, 3, size=(5, 5))
            b = rng.integers(0, 3, size=(5, 5))
            assert dice(a, b, 1) == dice(b, a, 1)
            assert 0.0 <= dice(a, b, 1) <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            dice(np.zeros((3, 3), dtype=int), np.zeros((4, 4), dtype=int), 1)


class TestOptimizer:
    def test_zero_learning_rate_is_null_update(self):
        params = [Tensor(np.random.default_rng(0).normal(size=(3, 3)), requires_grad=True)]
        before = params[0].data.tobytes()
        opt = SgdOptimizer(params, learning_rate=0.0, momentum=0.9)
        for _ in range(5):
            params[0].grad = np.ones((3, 3))
            opt.step()
        assert params[0].data.tobytes() == before

    def test_momentum_accumulates(self):
        params = [Tensor(np.zeros(1), requires_grad=True)]
        opt = SgdOptimizer(params, learning_rate=1.0, momentum=0.5)
        params[0].grad = np.ones(1)
        opt.step()  # v=1, p=-1
        params[0].grad = np.ones(1)
        opt.step()  # v=1.5, p=-2.5
        assert params[0].data[0] == pytest.approx(-2.5)

    def test_norm_clipping_bounds_huge_gradients(self):
        params = [Tensor(np.zeros(4), requires_grad=True)]
        opt = SgdOptimizer(params, learning_rate=1.0, momentum=0.0, clip_norm=2.0)
        params[0].grad = np.full(4, 1e8)
        opt.step()
        assert np.linalg.norm(params[0].data) == pytest.approx(2.0)
        opt.zero_grad()
        params[0].grad = np.full(4, 0.1)  # below the clip threshold: untouched
        opt.step()
        np.testing.assert_allclose(params[0].data, -np.full(4, 1e8) * 2e-8 - 0.1, rtol=1e-12)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError, match="sat_epsilon"):
            TrainConfig(sat_enabled=True, sat_epsilon=0.0)
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(optimizer="adam")


@pytest.fixture(scope="module")
def views(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness") / "src"
    generate_dataset(source_domain(), 60, (1, 2, 3), seed=3, out_dir=root, size=16)
    dataset = load_dataset(root)
    return split_train_test(dataset, (1, 2), (3,))


class TestTraining:
    def test_single_step_descends_on_same_episode(self, views):
        train_view, _ = views
        model = small_model(seed=1)
        episode = train_view.sample_episode(1, 1, 1, np.random.default_rng(0))
        before = episode_loss(model, episode).item()
        opt = SgdOptimizer(model.parameters(), learning_rate=1e-3, momentum=0.0, clip_norm=10.0)
        model.zero_grad()
        episode_loss(model, episode).backward()
        opt.step()
        assert episode_loss(model, episode).item() < before

    def test_short_run_decreases_loss(self, views):
        train_view, _ = views
        model = small_model(seed=2)
        cfg = TrainConfig(episodes_train=80, eval_every=0, seed=0)
        trace = train_standard(model, train_view, cfg)
        assert len(trace) == 80
        assert np.mean(trace[-20:]) < np.mean(trace[:20])

    def test_sat_takes_exactly_three_steps_per_episode(self, views, monkeypatch):
        train_view, _ = views
        model = small_model(seed=3)
        calls = []
        original = SgdOptimizer.step

        def counting_step(self):
            calls.append(1)
            return original(self)

        monkeypatch.setattr(SgdOptimizer, "step", counting_step)
        cfg = TrainConfig(episodes_train=4, eval_every=0, sat_enabled=True,
                          sat_epsilon=0.025, seed=0)
        trace = train_sat(model, train_view, cfg)
        assert len(calls) == 12
        assert len(trace) == 12

    def test_deterministic_given_seed(self, views):
        train_view, _ = views
        results = []
        for _ in range(2):
            model = small_model(seed=4)
            train_standard(model, train_view, TrainConfig(episodes_train=10, eval_every=0, seed=5))
            results.append(np.concatenate([p.data.reshape(-1) for p in model.parameters()]))
        assert np.array_equal(results[0], results[1])


class TestEvaluate:
    def test_parameters_untouched_and_deterministic(self, views):
        _, test_view = views
        model = small_model(seed=5)
        before = {k: v.data.tobytes() for k, v in model.named_parameters().items()}
        attacks = [AttackSpec("fgsm", 0.02), AttackSpec("pgd", 0.01, n_iters=2)]
        a = evaluate(model, test_view, attacks, n_episodes=3, n_repeats=2, seed=1)
        after = {k: v.data.tobytes() for k, v in model.named_parameters().items()}
        assert before == after
        b = evaluate(model, test_view, attacks, n_episodes=3, n_repeats=2, seed=1)
        for ra, rb in zip(a.rows, b.rows):
            assert ra == rb
        labels = [r.attack for r in a.rows]
        assert labels == ["clean", "fgsm", "pgd"]

    def test_requires_two_repeats(self, views):
        _, test_view = views
        with pytest.raises(ValueError, match="n_repeats"):
            evaluate(small_model(), test_view, [], n_episodes=2, n_repeats=1)

    def test_row_invariants(self):
        with pytest.raises(ValueError, match="dice"):
            EvalRow("clean", "none", 1.2, 0.0, 4)
        with pytest.raises(ValueError, match="std"):
            EvalRow("clean", "none", 0.5, -0.1, 4)


class TestConfig:
    def test_parse_and_types(self):
        values = parse_config_text("a.b = 3\n# comment\n\nc = 0.5  # inline\nd = yes\ne = 1,2,3\n")
        assert values == {"a.b": "3", "c": "0.5", "d": "yes", "e": "1,2,3"}

    def test_errors_name_the_problem(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("a = 1\na = 2\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("nonsense\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            Config({"no.such.key": "1"})
        cfg = Config({"ode.steps": "four"})
        with pytest.raises(ConfigError, match="ode.steps"):
            cfg.get_int("ode.steps")
        with pytest.raises(ConfigError, match="data.source_dir"):
            Config({}).require("data.source_dir")

    def test_echo_parses_back(self):
        cfg = Config({"out.dir": "x", "data.source_dir": "s", "data.shifted_dir": "t"})
        assert parse_config_text(cfg.echo()) == cfg.values


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    for name, domain in (("src", source_domain()), ("shift", shifted_domain())):
        generate_dataset(domain, 60, (1, 2, 3), seed=7, out_dir=root / name, size=16)
    config = f"""
data.source_dir = {root / 'src'}
data.shifted_dir = {root / 'shift'}
out.dir = {root / 'out'}
model.image_size = 16
model.feat_channels = 4
model.dyn_hidden = 4
ode.steps = 2
train.episodes = 12
train.eval_every = 0
eval.episodes = 3
eval.repeats = 2
attack.pgd_iters = 2
attack.smia_iters = 2
seeds = 0
"""
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(config)
    return root, cfg_path, run_experiment(cfg_path)


class TestRunExperiment:
    def test_outputs_exist_with_schema(self, experiment):
        root, _, summary = experiment
        assert summary["ok"], summary["failures"]
        with open(summary["csv"]) as fh:
            rows = list(csv.DictReader(fh))
        assert set(r["model"] for r in rows) == {"baseline", "at-baseline", "pnode"}
        assert set(r["domain"] for r in rows) == {"source", "shifted"}
        assert set(r["attack"] for r in rows) == {"clean", "fgsm", "pgd", "smia"}
        assert len(rows) == 3 * 2 * 4
        for row in rows:
            assert 0.0 <= float(row["mean_dice"]) <= 1.0
            assert float(row["std_dice"]) >= 0.0
            assert row["shots"] == "1"
        assert (root / "out" / "dice_source.svg").is_file()
        assert (root / "out" / "dice_shifted.svg").is_file()
        manifest = (root / "out" / "manifest.txt").read_text()
        assert "seeds = 0" in manifest
        assert "commit = " in manifest
        assert "train.episodes = 12" in manifest

    def test_checkpoints_written(self, experiment):
        root, _, _ = experiment
        for variant in ("baseline", "at-baseline", "pnode"):
            assert (root / "out" / "checkpoints" / f"{variant}-seed0.ckpt").is_file()

    def test_missing_dataset_names_key(self, experiment, tmp_path):
        root, cfg_path, _ = experiment
        text = cfg_path.read_text().replace(str(root / "src"), str(tmp_path / "nowhere"))
        bad = tmp_path / "bad.cfg"
        bad.write_text(text)
        with pytest.raises(ConfigError, match="data.source_dir"):
            run_experiment(bad)
