"""Training (standard and adversarial), evaluation under attacks, and experiments."""

from __future__ import annotations

import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, run_attack
from .config import Config, ConfigError
from .data import DatasetView, load_dataset, split_train_test
from .model import SegModel, episode_forward, episode_loss, save_checkpoint
from .ode import OdeConfig

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "at-baseline", "pnode")


@dataclass
class TrainConfig:
    optimizer: str = "sgd-momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    episodes_train: int = 2000
    eval_every: int = 200
    sat_enabled: bool = False
    sat_epsilon: float = 0.025
    seed: int = 0
    n_way: int = 1
    k_shot: int = 1
    n_query: int = 1
    clip_norm: float = 10.0  # guards against the rare huge cosine-guard gradients

    def __post_init__(self):
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.sat_enabled and self.sat_epsilon <= 0.0:
            raise ValueError("sat_epsilon must be positive when SAT is enabled")
        if self.clip_norm < 0.0:
            raise ValueError("clip_norm must be non-negative (0 disables clipping)")


class SgdOptimizer:
    """Plain SGD with optional momentum and global gradient-norm clipping.

    Near-zero feature vectors make the guarded cosine similarity produce
    gradients of order 1/eps_guard; clipping bounds those isolated steps
    without touching ordinary ones.
    """

    def __init__(self, params, learning_rate: float, momentum: float = 0.0,
                 clip_norm: float = 0.0):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.n_steps = 0

    def step(self):
        grads = [p.grad for p in self.params]
        if self.clip_norm > 0.0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = [None if g is None else g * scale for g in grads]
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            v *= self.momentum
            v += g
            p.data = p.data - self.learning_rate * v
        self.n_steps += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def dice(pred_mask, gt_mask, class_id: int) -> float:
    """Overlap score 2|A.B| / (|A|+|B|) for one class; both sets empty scores 1."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask == class_id
    b = gt_mask == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _make_optimizer(model: SegModel, cfg: TrainConfig) -> SgdOptimizer:
    momentum = cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0
    return SgdOptimizer(model.parameters(), cfg.learning_rate, momentum, cfg.clip_norm)


def _train_step(model, optimizer, episode, index):
    optimizer.zero_grad()
    try:
        loss = episode_loss(model, episode)
    except FloatingPointError as exc:
        raise RuntimeError(f"training diverged at episode {index}: {exc}") from exc
    loss.backward()
    optimizer.step()
    return loss.item()


def train_standard(model: SegModel, train_view: DatasetView, cfg: TrainConfig):
    """One optimizer step per sampled episode; returns the loss trace."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = _make_optimizer(model, cfg)
    trace = []
    for i in range(cfg.episodes_train):
        episode = train_view.sample_episode(cfg.n_way, cfg.k_shot, cfg.n_query, rng)
        trace.append(_train_step(model, optimizer, episode, i))
        if cfg.eval_every and (i + 1) % cfg.eval_every == 0:
            window = trace[-cfg.eval_every:]
            log.info("episode %d: mean loss %.4f", i + 1, sum(window) / len(window))
    return trace


def train_sat(model: SegModel, train_view: DatasetView, cfg: TrainConfig):
    """Adversarial training: clean, support-perturbed, and query-perturbed steps.

    Both perturbed episodes are built from single-step sign-gradient attacks at
    the current parameters, then the model trains once on each of the three
    episodes in order, so every sampled episode costs exactly three steps.
    """
    if not cfg.sat_enabled:
        raise ValueError("train_sat requires sat_enabled")
    rng = np.random.default_rng(cfg.seed)
    optimizer = _make_optimizer(model, cfg)
    spec_s = AttackSpec("fgsm", cfg.sat_epsilon, target="support")
    spec_q = AttackSpec("fgsm", cfg.sat_epsilon, target="query")
    trace = []
    for i in range(cfg.episodes_train):
        episode = train_view.sample_episode(cfg.n_way, cfg.k_shot, cfg.n_query, rng)
        support_adv = run_attack(model, episode, spec_s)
        query_adv = run_attack(model, episode, spec_q)
        for variant in (episode, support_adv, query_adv):
            trace.append(_train_step(model, optimizer, variant, i))
        if cfg.eval_every and (i + 1) % cfg.eval_every == 0:
            window = trace[-3 * cfg.eval_every:]
            log.info("episode %d: mean loss %.4f", i + 1, sum(window) / len(window))
    return trace


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalRow:
    attack: str  # "clean" or an attack family
    target: str
    mean_dice: float
    std_dice: float
    episode_count: int
    run_means: tuple = ()

    def __post_init__(self):
        if not (0.0 <= self.mean_dice <= 1.0):
            raise ValueError(f"mean dice {self.mean_dice} outside [0, 1]")
        if self.std_dice < 0.0:
            raise ValueError("std must be non-negative")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def row(self, attack: str) -> EvalRow:
        for row in self.rows:
            if row.attack == attack:
                return row
        raise KeyError(attack)


def _episode_dice(model: SegModel, episode) -> float:
    with T.no_grad():
        _, predictions = episode_forward(model, episode)
    scores = []
    for pred, gt in zip(predictions, episode.query_masks):
        class_of_channel = np.asarray(pred.class_ids)
        pred_classes = class_of_channel[pred.hard_mask]
        for cls in episode.classes:
            scores.append(dice(pred_classes, gt, cls))
    return float(np.mean(scores))


def evaluate(model: SegModel, test_view: DatasetView, attacks, n_episodes: int,
             n_repeats: int = 2, seed: int = 0, n_way: int = 1, k_shot: int = 1,
             n_query: int = 1) -> EvalReport:
    """Mean/std Dice over repeated runs for clean plus each attack spec.

    Attack gradients flow through the model but parameters are never updated;
    identical seeds give identical reports.
    """
    if n_repeats < 2:
        raise ValueError("n_repeats must be at least 2")
    named = [("clean", None)] + [(spec.family, spec) for spec in attacks]
    if len({name for name, _ in named}) != len(named):
        raise ValueError("attack labels must be unique (one spec per family)")
    run_means = {name: [] for name, _ in named}

    for repeat in range(n_repeats):
        pool_rng = np.random.default_rng(np.random.SeedSequence((seed, repeat)))
        episodes = [test_view.sample_episode(n_way, k_shot, n_query, pool_rng)
                    for _ in range(n_episodes)]
        for attack_index, (name, spec) in enumerate(named):
            scores = []
            for ep_index, episode in enumerate(episodes):
                if spec is None:
                    attacked = episode
                else:
                    attack_rng = np.random.default_rng(
                        np.random.SeedSequence((seed, repeat, ep_index, attack_index)))
                    attacked = run_attack(model, episode, spec, rng=attack_rng)
                scores.append(_episode_dice(model, attacked))
            run_means[name].append(float(np.mean(scores)))

    report = EvalReport()
    for name, spec in named:
        means = run_means[name]
        report.rows.append(EvalRow(
            attack=name,
            target=spec.target if spec is not None else "none",
            mean_dice=float(np.mean(means)),
            std_dice=float(np.std(means)),
            episode_count=n_episodes * n_repeats,
            run_means=tuple(means),
        ))
    return report


# -- experiment driver ----------------------------------------------------------


def _git_commit() -> str:
    try:
        proc = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                              text=True, check=False)
        commit = proc.stdout.strip()
        return commit if proc.returncode == 0 and commit else "unknown"
    except OSError:
        return "unknown"


def build_model(cfg: Config, use_ode: bool, seed: int) -> SegModel:
    return SegModel(
        in_channels=cfg.get_int("model.in_channels"),
        feat_channels=cfg.get_int("model.feat_channels"),
        image_size=cfg.get_int("model.image_size"),
        use_ode=use_ode,
        ode_cfg=OdeConfig(cfg.get_float("ode.terminal_time"), cfg.get_int("ode.steps"),
                          cfg.get_str("ode.scheme")),
        dyn_hidden=cfg.get_int("model.dyn_hidden"),
        cosine_scale=cfg.get_float("model.cosine_scale"),
        seed=seed,
    )


def train_config_from(cfg: Config, seed: int, sat: bool) -> TrainConfig:
    return TrainConfig(
        optimizer=cfg.get_str("train.optimizer"),
        learning_rate=cfg.get_float("train.learning_rate"),
        momentum=cfg.get_float("train.momentum"),
        episodes_train=cfg.get_int("train.episodes"),
        eval_every=cfg.get_int("train.eval_every"),
        sat_enabled=sat,
        sat_epsilon=cfg.get_float("train.sat_epsilon"),
        seed=seed,
        n_way=cfg.get_int("episode.n_way"),
        k_shot=cfg.get_int("episode.k_shot"),
        n_query=cfg.get_int("episode.n_query"),
        clip_norm=cfg.get_float("train.clip_norm"),
    )


def attack_suite_from(cfg: Config) -> list:
    target = cfg.get_str("eval.target")
    return [
        AttackSpec("fgsm", cfg.get_float("attack.fgsm_eps"), target=target),
        AttackSpec("pgd", cfg.get_float("attack.pgd_eps"), n_iters=cfg.get_int("attack.pgd_iters"),
                   target=target, random_start=cfg.get_bool("attack.pgd_random_start")),
        AttackSpec("smia", cfg.get_float("attack.smia_eps"), n_iters=cfg.get_int("attack.smia_iters"),
                   target=target, smia_lambda=cfg.get_float("attack.smia_lambda")),
    ]


def train_variant(cfg: Config, variant: str, train_view: DatasetView, seed: int) -> SegModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}")
    model = build_model(cfg, use_ode=variant == "pnode", seed=seed)
    tcfg = train_config_from(cfg, seed, sat=variant == "at-baseline")
    if tcfg.sat_enabled:
        train_sat(model, train_view, tcfg)
    else:
        train_standard(model, train_view, tcfg)
    return model


def run_experiment(config_path) -> dict:
    """Train every variant on the source domain and evaluate on both domains.

    Writes results.csv, per-domain SVG bar charts, and a reproducibility
    manifest into out.dir. Per-variant failures are recorded and reported in
    the returned summary; at least one failure marks the run as failed.
    """
    from . import report as report_mod

    cfg = Config.from_file(config_path)
    for key in ("data.source_dir", "data.shifted_dir"):
        if not (Path(cfg.require(key)) / "manifest.tsv").is_file():
            raise ConfigError(f"config key {key!r} points to no dataset: {cfg.values[key]}")
    out_dir = Path(cfg.require("out.dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    base = cfg.get_int_list("data.base_classes")
    novel = cfg.get_int_list("data.novel_classes")
    source = load_dataset(cfg.get_str("data.source_dir"))
    shifted = load_dataset(cfg.get_str("data.shifted_dir"))
    train_view, source_test = split_train_test(source, base, novel)
    _, shifted_test = split_train_test(shifted, base, novel)

    seeds = cfg.get_int_list("seeds")
    attacks = attack_suite_from(cfg)
    ep_kw = dict(n_way=cfg.get_int("episode.n_way"), k_shot=cfg.get_int("episode.k_shot"),
                 n_query=cfg.get_int("episode.n_query"))

    results = []  # (model, domain, attack, target, run_means)
    failures = {}
    for variant in VARIANTS:
        try:
            per_domain_runs = {}
            for seed in seeds:
                log.info("training %s (seed %d)", variant, seed)
                model = train_variant(cfg, variant, train_view, seed)
                save_checkpoint(model, out_dir / "checkpoints" / f"{variant}-seed{seed}.ckpt")
                for domain, view in (("source", source_test), ("shifted", shifted_test)):
                    rep = evaluate(model, view, attacks, cfg.get_int("eval.episodes"),
                                   cfg.get_int("eval.repeats"), seed=seed, **ep_kw)
                    for row in rep.rows:
                        key = (domain, row.attack, row.target)
                        per_domain_runs.setdefault(key, []).extend(row.run_means)
            for (domain, attack, target), means in sorted(per_domain_runs.items()):
                results.append({
                    "model": variant, "domain": domain, "attack": attack, "target": target,
                    "shots": cfg.get_int("episode.k_shot"),
                    "mean_dice": float(np.mean(means)), "std_dice": float(np.std(means)),
                })
        except Exception as exc:  # noqa: BLE001 - per-variant isolation is the contract
            log.exception("variant %s failed", variant)
            failures[variant] = str(exc)

    csv_path = report_mod.write_results_csv(results, out_dir / "results.csv")
    chart_paths = report_mod.write_bar_charts(results, out_dir)
    manifest_path = report_mod.write_manifest(out_dir / "manifest.txt", cfg, seeds, _git_commit())
    return {
        "ok": not failures,
        "failures": failures,
        "results": results,
        "csv": csv_path,
        "charts": chart_paths,
        "manifest": manifest_path,
    }
