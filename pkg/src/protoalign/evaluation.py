"""Episodic evaluation with confidence intervals, plus condition comparison.

Evaluation runs N-way K-shot episodes on a held-out split with no parameter
updates: prototypes from the support set, queries classified by the
temperature-scaled cosine softmax, accuracy per episode, and a 95% CI using
the normal approximation (1.96 * sample std / sqrt(n), std with the n-1
denominator). Comparisons across training conditions are paired: every
condition is scored on the byte-identical episode sequence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import Dataset, DescriptionCorpus
from .encoders import visual_encode
from .episodes import episode_at
from .objectives import classification_accuracy, query_class_probabilities, visual_prototypes
from .training import (
    TrainConfig,
    TrainState,
    clone_state,
    config_to_dict,
    train_classification_stage,
    train_meta_stage,
)

logger = logging.getLogger(__name__)

CI_Z = 1.96  # normal-approximation 95% interval


def accuracy_ci(per_episode_accuracy) -> tuple:
    """(mean, 95% halfwidth) with the n-1 sample standard deviation."""
    accs = np.asarray(per_episode_accuracy, dtype=np.float64)
    mean = float(accs.mean())
    if accs.size < 2:
        return mean, 0.0
    half = CI_Z * float(accs.std(ddof=1)) / math.sqrt(accs.size)
    return mean, half


@dataclass
class EvalSpec:
    split: str = "novel"
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    n_episodes: int = 600
    seed: int = 0


@dataclass
class EvalReport:
    n_way: int
    k_shot: int
    q_per_class: int
    n_episodes: int
    seed: int
    split: str
    per_episode_accuracy: list
    mean_accuracy: float
    ci95_halfwidth: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary(self) -> str:
        return (
            f"{self.split} {self.n_way}-way {self.k_shot}-shot: "
            f"{100 * self.mean_accuracy:.2f}% +/- {100 * self.ci95_halfwidth:.2f} "
            f"({self.n_episodes} episodes, seed {self.seed})"
        )


def _episode_accuracy(encoder, tau, episode) -> float:
    flat = episode.support_images.reshape((-1,) + episode.support_images.shape[2:])
    s_emb = visual_encode(encoder, flat).reshape(episode.n_way, episode.k_shot, -1)
    prototypes = visual_prototypes(s_emb)
    q_emb = visual_encode(encoder, episode.query_images)
    probs = query_class_probabilities(q_emb, prototypes, tau)
    return classification_accuracy(probs, torch.as_tensor(episode.query_labels))


def evaluate(
    state: TrainState,
    dataset: Dataset,
    split: str = "novel",
    n_way: int = 5,
    k_shot: int = 1,
    q_per_class: int = 15,
    n_episodes: int = 600,
    seed: int = 0,
) -> EvalReport:
    """Score a trained state over a deterministic episode sequence.

    Side-effect free: no gradients, no parameter writes; the encoder's
    train/eval flag is restored afterwards.
    """
    classes = sorted(int(c) for c in dataset.split.classes_for(split))
    encoder = state.encoder
    if state.tau_cls is not None:
        tau = state.tau_cls.detach()
    else:
        tau = torch.tensor(state.config.stage2.objective.tau_cls, dtype=torch.float64)

    was_training = encoder.training
    encoder.eval()
    accs = []
    fingerprint = hashlib.sha256()
    with torch.no_grad():
        for i in range(n_episodes):
            episode = episode_at(classes, dataset, n_way, k_shot, q_per_class, seed, i)
            fingerprint.update(repr(episode.fingerprint()).encode())
            accs.append(_episode_accuracy(encoder, tau, episode))
    encoder.train(was_training)

    mean, half = accuracy_ci(accs)
    return EvalReport(
        n_way=n_way,
        k_shot=k_shot,
        q_per_class=q_per_class,
        n_episodes=n_episodes,
        seed=seed,
        split=split,
        per_episode_accuracy=accs,
        mean_accuracy=mean,
        ci95_halfwidth=half,
        metadata={
            "ci_convention": f"normal approximation, {CI_Z} * sample_std(ddof=1) / sqrt(n)",
            "episode_derivation": "episode i seeded by SeedSequence(seed, spawn_key=(i,))",
            "episode_fingerprint": fingerprint.hexdigest(),
            "tau_cls": float(tau),
            "stage": state.stage,
        },
    )


def evaluate_spec(state: TrainState, dataset: Dataset, spec: EvalSpec) -> EvalReport:
    return evaluate(
        state,
        dataset,
        split=spec.split,
        n_way=spec.n_way,
        k_shot=spec.k_shot,
        q_per_class=spec.q_per_class,
        n_episodes=spec.n_episodes,
        seed=spec.seed,
    )


@dataclass
class ConditionResult:
    label: str
    report: EvalReport


@dataclass
class PairwiseDelta:
    label_a: str
    label_b: str
    mean_delta: float  # mean accuracy a - b over paired episodes
    paired_se: float
    ci95_halfwidth: float


@dataclass
class ComparisonTable:
    conditions: list
    deltas: list
    eval_spec: EvalSpec

    def render(self) -> str:
        width = max(len(c.label) for c in self.conditions) + 2
        lines = [
            f"{'condition':<{width}} {'mean_acc':>9} {'ci95':>8} {'episodes':>9}",
        ]
        for c in self.conditions:
            r = c.report
            lines.append(
                f"{c.label:<{width}} {r.mean_accuracy:>9.4f} {r.ci95_halfwidth:>8.4f} "
                f"{r.n_episodes:>9d}"
            )
        if self.deltas:
            lines.append("")
            pair_width = max(len(f"{d.label_a} - {d.label_b}") for d in self.deltas) + 2
            lines.append(
                f"{'pair (paired episodes)':<{pair_width}} {'delta':>9} {'se':>8} {'ci95':>8}"
            )
            for d in self.deltas:
                lines.append(
                    f"{f'{d.label_a} - {d.label_b}':<{pair_width}} {d.mean_delta:>9.4f} "
                    f"{d.paired_se:>8.4f} {d.ci95_halfwidth:>8.4f}"
                )
        return "\n".join(lines)

    def records(self) -> list:
        out = []
        for c in self.conditions:
            rec = {"type": "condition", "label": c.label}
            rec.update(c.report.to_dict())
            out.append(rec)
        for d in self.deltas:
            out.append({"type": "delta", **asdict(d)})
        return out

    def delta(self, label_a: str, label_b: str) -> PairwiseDelta:
        for d in self.deltas:
            if (d.label_a, d.label_b) == (label_a, label_b):
                return d
            if (d.label_a, d.label_b) == (label_b, label_a):
                return PairwiseDelta(
                    label_a, label_b, -d.mean_delta, d.paired_se, d.ci95_halfwidth
                )
        raise KeyError(f"no delta for ({label_a}, {label_b})")


def _paired_delta(label_a, label_b, report_a, report_b) -> PairwiseDelta:
    a = np.asarray(report_a.per_episode_accuracy)
    b = np.asarray(report_b.per_episode_accuracy)
    d = a - b
    se = float(d.std(ddof=1)) / math.sqrt(d.size) if d.size > 1 else 0.0
    return PairwiseDelta(
        label_a=label_a,
        label_b=label_b,
        mean_delta=float(d.mean()),
        paired_se=se,
        ci95_halfwidth=CI_Z * se,
    )


def compare_conditions(
    conditions,
    dataset: Dataset,
    corpus: DescriptionCorpus | None,
    eval_spec: EvalSpec,
    *,
    metrics_dir=None,
) -> ComparisonTable:
    """Train each (label, TrainConfig) condition and evaluate on one episode set.

    Stage-1 training is cached per (stage1+encoder config, seed): conditions
    sharing those settings deterministically share the same pretrained
    embedding, and evaluation episodes are identical across conditions
    (asserted via episode fingerprints) so deltas are paired.
    """
    conditions = list(conditions)
    if len(conditions) < 2:
        raise ValueError("need at least two conditions to compare")
    labels = [label for label, _ in conditions]
    if len(set(labels)) != len(labels):
        raise ValueError(f"condition labels must be unique: {labels}")

    stage1_cache: dict = {}
    results = []
    for label, config in conditions:
        key = json.dumps(
            {
                "stage1": config_to_dict(config)["stage1"],
                "encoder": config_to_dict(config)["encoder"],
                "seed": config.seed,
            },
            sort_keys=True,
        )
        if key not in stage1_cache:
            logger.info("compare: stage-1 training for %s", label)
            stage1_cache[key] = train_classification_stage(dataset, config)
        metrics_path = None
        if metrics_dir is not None:
            metrics_path = f"{metrics_dir}/metrics-{label}.jsonl"
        logger.info("compare: meta training for %s", label)
        state = train_meta_stage(
            clone_state(stage1_cache[key]),
            dataset,
            corpus,
            config,
            metrics_path=metrics_path,
        )
        results.append(ConditionResult(label=label, report=evaluate_spec(state, dataset, eval_spec)))

    fingerprints = {r.report.metadata["episode_fingerprint"] for r in results}
    assert len(fingerprints) == 1, "paired evaluation broke: episode sets differ"

    deltas = []
    for i in range(len(results)):
        for j in range(i + 1, len(results)):
            deltas.append(
                _paired_delta(
                    results[i].label, results[j].label,
                    results[i].report, results[j].report,
                )
            )
    return ComparisonTable(conditions=results, deltas=deltas, eval_spec=eval_spec)
