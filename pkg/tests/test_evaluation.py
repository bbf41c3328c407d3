"""Evaluation statistics, pairing guarantees, and the comparison harness."""

import math

import numpy as np
import pytest

from conftest import make_mlp_config, make_synth_pair
from protoalign.encoders import EncoderConfig, init_visual_encoder
from protoalign.evaluation import (
    EvalSpec,
    accuracy_ci,
    compare_conditions,
    evaluate,
    evaluate_spec,
)
from protoalign.training import (
    TrainConfig,
    TrainState,
    state_checksum,
    train_classification_stage,
)


def raw_state(seed=0, input_shape=(8, 8, 1)):
    cfg = make_mlp_config(seed=seed)
    cfg.encoder = EncoderConfig(
        architecture="mlp-tiny", input_shape=input_shape, mlp_hidden=24, output_dim=16
    )
    encoder = init_visual_encoder(cfg.encoder, seed=seed)
    return TrainState(stage="classification", encoder=encoder, config=cfg, seed=seed)


def eval_dataset(**overrides):
    defaults = dict(n_base_classes=6, n_val_classes=2, n_novel_classes=6, seed=1)
    defaults.update(overrides)
    seed = defaults.pop("seed")
    ds, corpus = make_synth_pair(seed=seed, **defaults)
    return ds, corpus


# --- statistics oracle ---

def test_ci_matches_hand_computed_example():
    mean, half = accuracy_ci([0.8, 1.0, 0.6])
    assert mean == pytest.approx(0.8, abs=1e-12)
    # hand oracle: std over {0.8, 1.0, 0.6} with n-1 is exactly 0.2
    assert half == pytest.approx(1.96 * 0.2 / math.sqrt(3), abs=1e-12)
    assert half == pytest.approx(0.2263, abs=1e-4)


def test_ci_degenerate_cases():
    mean, half = accuracy_ci([0.7])
    assert mean == 0.7 and half == 0.0


# --- evaluate ---

def test_untrained_encoder_scores_at_chance():
    # classes drawn from fully overlapping clusters carry no signal, so any
    # untrained encoder must land at the 1/N chance level; the large per-class
    # pool keeps the fixed dataset's own sampling bias below the episode CI
    ds, _ = eval_dataset(
        examples_per_class=200, sigma_between=1e-6, sigma_within=1.0
    )
    report = evaluate(raw_state(), ds, split="novel", n_way=5, k_shot=1,
                      q_per_class=15, n_episodes=600, seed=3)
    assert abs(report.mean_accuracy - 0.2) <= report.ci95_halfwidth


def test_perfect_separation_scores_full_marks():
    # With vanishing within-class noise every query embedding collapses onto
    # its class prototype, so even a random encoder classifies perfectly.
    ds, _ = eval_dataset(sigma_within=1e-9)
    report = evaluate(raw_state(), ds, split="novel", n_way=5, k_shot=1,
                      q_per_class=5, n_episodes=50, seed=3)
    assert report.mean_accuracy == 1.0


def test_evaluate_is_side_effect_free():
    ds, _ = eval_dataset()
    state = raw_state()
    before = state_checksum(state)
    evaluate(state, ds, split="novel", n_way=3, k_shot=1, q_per_class=5,
             n_episodes=20, seed=0)
    assert state_checksum(state) == before


def test_same_seed_same_episode_set_and_report():
    ds, _ = eval_dataset()
    state = raw_state()
    r1 = evaluate(state, ds, "novel", 5, 1, 5, 40, seed=9)
    r2 = evaluate(state, ds, "novel", 5, 1, 5, 40, seed=9)
    assert r1.metadata["episode_fingerprint"] == r2.metadata["episode_fingerprint"]
    assert r1.per_episode_accuracy == r2.per_episode_accuracy
    assert r1.to_dict() == r2.to_dict()
    r3 = evaluate(state, ds, "novel", 5, 1, 5, 40, seed=10)
    assert r3.metadata["episode_fingerprint"] != r1.metadata["episode_fingerprint"]


def test_ci_shrinks_like_inverse_sqrt_n():
    ds, _ = eval_dataset()
    state = raw_state()
    r_n = evaluate(state, ds, "novel", 5, 1, 5, 150, seed=4)
    r_2n = evaluate(state, ds, "novel", 5, 1, 5, 300, seed=4)
    expected = r_n.ci95_halfwidth / math.sqrt(2)
    assert abs(r_2n.ci95_halfwidth - expected) <= 0.2 * expected


def test_val_split_evaluation():
    ds, _ = eval_dataset(n_val_classes=3)
    report = evaluate(raw_state(), ds, split="val", n_way=2, k_shot=1,
                      q_per_class=5, n_episodes=10, seed=0)
    assert report.split == "val" and report.n_episodes == 10


# --- comparison harness ---

def test_identical_conditions_have_exactly_zero_delta():
    ds, corpus = eval_dataset()
    cfg_a = make_mlp_config(**{"stage2.epochs": 3})
    cfg_b = make_mlp_config(**{"stage2.epochs": 3})
    spec = EvalSpec(split="novel", n_way=5, k_shot=1, q_per_class=5,
                    n_episodes=30, seed=7)
    table = compare_conditions(
        [("first", cfg_a), ("second", cfg_b)], ds, corpus, spec
    )
    d = table.delta("first", "second")
    assert d.mean_delta == 0.0
    assert d.paired_se == 0.0
    assert (
        table.conditions[0].report.per_episode_accuracy
        == table.conditions[1].report.per_episode_accuracy
    )


def test_compare_rows_match_independent_evaluation():
    ds, corpus = eval_dataset()
    cfg = make_mlp_config(**{"stage2.epochs": 3})
    cfg_off = make_mlp_config(**{"stage2.epochs": 3, "stage2.use_vs_alignment": False})
    spec = EvalSpec(split="novel", n_way=5, k_shot=1, q_per_class=5,
                    n_episodes=25, seed=2)
    table = compare_conditions(
        [("aligned", cfg), ("baseline", cfg_off)], ds, corpus, spec
    )

    from protoalign.training import clone_state, train_meta_stage

    state1 = train_classification_stage(ds, cfg)
    aligned = train_meta_stage(clone_state(state1), ds, corpus, cfg)
    solo = evaluate_spec(aligned, ds, spec)
    row = next(c.report for c in table.conditions if c.label == "aligned")
    assert row.per_episode_accuracy == solo.per_episode_accuracy
    assert row.mean_accuracy == solo.mean_accuracy


def test_compare_delta_matches_manual_pairing():
    ds, corpus = eval_dataset()
    cfg = make_mlp_config(**{"stage2.epochs": 2})
    cfg_off = make_mlp_config(**{"stage2.epochs": 2, "stage2.use_vs_alignment": False})
    spec = EvalSpec(split="novel", n_way=3, k_shot=1, q_per_class=5,
                    n_episodes=20, seed=5)
    table = compare_conditions([("a", cfg), ("b", cfg_off)], ds, corpus, spec)
    a = np.asarray(table.conditions[0].report.per_episode_accuracy)
    b = np.asarray(table.conditions[1].report.per_episode_accuracy)
    d = table.delta("a", "b")
    assert d.mean_delta == pytest.approx(float((a - b).mean()), abs=1e-15)
    assert d.paired_se == pytest.approx(
        float((a - b).std(ddof=1)) / math.sqrt(len(a)), abs=1e-15
    )


def test_compare_requires_two_conditions():
    ds, corpus = eval_dataset()
    with pytest.raises(ValueError):
        compare_conditions([("only", make_mlp_config())], ds, corpus, EvalSpec())


def test_compare_requires_unique_labels():
    ds, corpus = eval_dataset()
    with pytest.raises(ValueError):
        compare_conditions(
            [("same", make_mlp_config()), ("same", make_mlp_config())],
            ds, corpus, EvalSpec(),
        )


def test_render_and_records():
    ds, corpus = eval_dataset()
    cfg_a = make_mlp_config(**{"stage2.epochs": 2})
    cfg_b = make_mlp_config(**{"stage2.epochs": 2, "stage2.use_vs_alignment": False})
    spec = EvalSpec(split="novel", n_way=3, k_shot=1, q_per_class=5,
                    n_episodes=10, seed=0)
    table = compare_conditions([("with", cfg_a), ("without", cfg_b)], ds, corpus, spec)
    text = table.render()
    assert "with" in text and "without" in text and "delta" in text
    records = table.records()
    assert sum(r["type"] == "condition" for r in records) == 2
    assert sum(r["type"] == "delta" for r in records) == 1
