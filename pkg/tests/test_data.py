"""Dataset loading, description corpora, and the synthetic generator."""

import json

import numpy as np
import pytest
import torch

from protoalign.data import (
    DatasetSplit,
    DescriptionCorpus,
    SynthConfig,
    load_descriptions,
    load_manifest,
    synth_generate,
    synth_latent_info,
    write_descriptions,
    write_manifest,
)
from protoalign.encoders import SemanticEncoder, semantic_encode
from protoalign.errors import (
    DescriptionFileError,
    InsufficientExamplesError,
    ManifestError,
    SplitOverlapError,
)


def small_config(**overrides):
    defaults = dict(
        n_base_classes=6,
        n_val_classes=2,
        n_novel_classes=2,
        examples_per_class=20,
        image_shape=(8, 8, 1),
        latent_dim=6,
        semantic_dim=16,
        descriptions_per_class=3,
    )
    defaults.update(overrides)
    return SynthConfig(**defaults)


# --- synthetic generator ---

def test_synth_is_pure_function_of_config_and_seed():
    cfg = small_config()
    ds1, corpus1 = synth_generate(cfg, seed=123)
    ds2, corpus2 = synth_generate(cfg, seed=123)
    assert np.array_equal(ds1.images, ds2.images)
    assert np.array_equal(ds1.class_ids, ds2.class_ids)
    for cid in corpus1.classes():
        for a, b in zip(corpus1.descriptions(cid), corpus2.descriptions(cid)):
            assert np.array_equal(a, b)
    ds3, _ = synth_generate(cfg, seed=124)
    assert not np.array_equal(ds1.images, ds3.images)


def test_synth_counts_and_split_layout():
    cfg = small_config()
    ds, corpus = synth_generate(cfg, seed=0)
    assert ds.n_examples == 10 * 20
    assert ds.split.base_classes == frozenset(range(6))
    assert ds.split.val_classes == frozenset({6, 7})
    assert ds.split.novel_classes == frozenset({8, 9})
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    for cid in range(10):
        assert corpus.d_c(cid) == 3


def test_synth_rejects_nonpositive_dims():
    with pytest.raises(ValueError):
        small_config(latent_dim=0)
    with pytest.raises(ValueError):
        small_config(examples_per_class=-3)
    with pytest.raises(ValueError):
        small_config(informativeness=1.5)


def test_uninformative_descriptions_carry_no_class_signal():
    # Monte-Carlo oracle: at informativeness 0 the mean cosine between a
    # class's description vectors and its semantic direction is ~0.
    cfg = SynthConfig(
        n_base_classes=98,
        n_val_classes=1,
        n_novel_classes=1,
        examples_per_class=2,
        image_shape=(4, 4, 1),
        latent_dim=6,
        semantic_dim=64,
        descriptions_per_class=2,
        informativeness=0.0,
    )
    _, corpus = synth_generate(cfg, seed=77)
    info = synth_latent_info(cfg, seed=77)
    cosines = []
    for cid in range(cfg.n_classes):
        direction = info.semantic_directions[cid]
        for vec in corpus.descriptions(cid):
            cosines.append(
                float(np.dot(vec, direction) / (np.linalg.norm(vec) * np.linalg.norm(direction)))
            )
    assert abs(np.mean(cosines)) < 0.1


def test_high_separation_gives_near_perfect_latent_one_nn():
    # Brute-force leave-one-out nearest neighbor in latent space.
    cfg = small_config(
        n_base_classes=16,
        n_val_classes=2,
        n_novel_classes=2,
        sigma_between=2.0,
        sigma_within=0.2,
    )
    info = synth_latent_info(cfg, seed=5)
    x, y = info.latents, info.labels
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    pred = y[d2.argmin(axis=1)]
    assert (pred == y).mean() > 0.99


def test_latent_info_matches_generated_data():
    cfg = small_config()
    ds, _ = synth_generate(cfg, seed=9)
    info = synth_latent_info(cfg, seed=9)
    assert np.array_equal(info.labels, ds.class_ids)
    assert info.class_centers.shape == (10, cfg.latent_dim)
    assert np.allclose(np.linalg.norm(info.semantic_directions, axis=1), 1.0)


# --- manifest I/O ---

def test_manifest_round_trip_sidecar(tmp_path):
    ds, _ = synth_generate(small_config(), seed=3)
    manifest = write_manifest(ds, tmp_path)
    loaded = load_manifest(manifest)
    assert np.array_equal(loaded.images, ds.images)
    assert np.array_equal(loaded.class_ids, ds.class_ids)
    assert loaded.split == ds.split


def test_manifest_round_trip_per_file_payloads(tmp_path):
    ds, _ = synth_generate(small_config(examples_per_class=4), seed=3)
    manifest = write_manifest(ds, tmp_path, sidecar=False)
    loaded = load_manifest(manifest)
    assert np.array_equal(loaded.images, ds.images)
    assert loaded.split == ds.split


def test_manifest_declared_counts_echoed(tmp_path):
    ds, _ = synth_generate(small_config(), seed=1)
    loaded = load_manifest(write_manifest(ds, tmp_path))
    assert len(loaded.split.base_classes) == 6
    assert len(loaded.split.val_classes) == 2
    assert len(loaded.split.novel_classes) == 2
    for cid in loaded.classes():
        assert len(loaded.indices_of(cid)) == 20


def test_manifest_split_overlap_rejected(tmp_path):
    header = {
        "image_shape": [2, 2, 1],
        "classes": [
            {"id": 3, "split": "base"},
            {"id": 3, "split": "novel"},
        ],
    }
    path = tmp_path / "manifest.jsonl"
    path.write_text(json.dumps(header) + "\n")
    with pytest.raises(SplitOverlapError):
        load_manifest(path)


def test_manifest_record_split_conflict_rejected(tmp_path):
    ds, _ = synth_generate(small_config(examples_per_class=2), seed=0)
    manifest = write_manifest(ds, tmp_path)
    lines = manifest.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["split"] = "novel"  # class is declared base
    lines[1] = json.dumps(rec)
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(SplitOverlapError) as exc:
        load_manifest(manifest)
    assert "line 2" in str(exc.value)


def test_manifest_insufficient_examples_under_config(tmp_path):
    ds, _ = synth_generate(small_config(examples_per_class=1), seed=0)
    manifest = write_manifest(ds, tmp_path)
    load_manifest(manifest)  # fine without a requirement
    with pytest.raises(InsufficientExamplesError) as exc:
        load_manifest(manifest, min_examples_per_class=16)  # K=1, Q=15
    assert "16" in str(exc.value)


def test_manifest_missing_file_and_malformed_record(tmp_path):
    ds, _ = synth_generate(small_config(examples_per_class=2), seed=0)
    manifest = write_manifest(ds, tmp_path)
    (tmp_path / "images.npy").unlink()
    with pytest.raises(ManifestError) as exc:
        load_manifest(manifest)
    assert "missing file" in str(exc.value) and "line 2" in str(exc.value)

    bad = tmp_path / "bad.jsonl"
    lines = manifest.read_text().splitlines()
    bad.write_text(lines[0] + "\nnot json at all\n")
    with pytest.raises(ManifestError) as exc:
        load_manifest(bad)
    assert "line 2" in str(exc.value)


def test_manifest_not_found():
    with pytest.raises(ManifestError):
        load_manifest("/nonexistent/manifest.jsonl")


def test_split_disjointness_enforced_on_construction():
    with pytest.raises(SplitOverlapError):
        DatasetSplit(base_classes={1, 2}, val_classes={2, 3}, novel_classes={4})


# --- description corpora ---

def test_descriptions_round_trip_vectors(tmp_path):
    ds, corpus = synth_generate(small_config(), seed=11)
    path = write_descriptions(corpus, tmp_path / "descriptions.txt")
    loaded = load_descriptions(path, ds)
    assert loaded.kind == "vector"
    assert loaded.embed_dim == corpus.embed_dim
    for cid in corpus.classes():
        assert loaded.d_c(cid) == corpus.d_c(cid)
        for a, b in zip(loaded.descriptions(cid), corpus.descriptions(cid)):
            assert np.array_equal(a, b)  # repr round-trips float64 exactly


def test_descriptions_round_trip_text(tmp_path):
    ds, corpus = synth_generate(small_config(description_kind="text"), seed=11)
    path = write_descriptions(corpus, tmp_path / "descriptions.txt")
    loaded = load_descriptions(path, ds)
    assert loaded.kind == "text"
    assert loaded.descriptions(0) == corpus.descriptions(0)


def test_descriptions_d_c_echoed(tmp_path):
    ds, corpus = synth_generate(small_config(descriptions_per_class=3), seed=2)
    loaded = load_descriptions(write_descriptions(corpus, tmp_path / "d.txt"), ds)
    assert all(loaded.d_c(c) == 3 for c in ds.split.base_classes)


def test_descriptions_missing_base_class_named(tmp_path):
    ds, corpus = synth_generate(small_config(), seed=2)
    path = tmp_path / "d.txt"
    lines = [
        line
        for line in write_descriptions(corpus, path).read_text().splitlines()
        if not line.startswith("4 ")
    ]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DescriptionFileError) as exc:
        load_descriptions(path, ds)
    assert "4" in str(exc.value)


def test_descriptions_512_dim_rows(tmp_path):
    ds, corpus = synth_generate(small_config(semantic_dim=512, descriptions_per_class=1), seed=4)
    loaded = load_descriptions(write_descriptions(corpus, tmp_path / "d.txt"), ds)
    assert loaded.embed_dim == 512


def test_descriptions_ragged_dims_rejected(tmp_path):
    ds, _ = synth_generate(small_config(), seed=2)
    path = tmp_path / "d.txt"
    body = "\n".join(f"{cid} 0.5 0.25 0.125" for cid in range(10))
    path.write_text(body + "\n3 0.5 0.25\n")
    with pytest.raises(DescriptionFileError) as exc:
        load_descriptions(path, ds)
    assert "mixed embedding dimensions" in str(exc.value)


def test_descriptions_mixed_kinds_rejected(tmp_path):
    ds, _ = synth_generate(small_config(), seed=2)
    path = tmp_path / "d.txt"
    body = "\n".join(f"{cid} 0.5 0.25" for cid in range(10))
    path.write_text(body + '\n3 "a quoted description"\n')
    with pytest.raises(DescriptionFileError) as exc:
        load_descriptions(path, ds)
    assert "mixed" in str(exc.value)


def test_corpus_rejects_empty_class_list():
    with pytest.raises(DescriptionFileError):
        DescriptionCorpus(entries={0: []}, kind="text")


def test_toy_text_informative_corpus_separates_classes():
    # With fully informative text, descriptions of one class share vocabulary:
    # within-class cosine similarity should exceed similarity between class
    # mean embeddings (measured directly over the toy encoder's outputs).
    cfg = small_config(
        description_kind="text",
        informativeness=1.0,
        descriptions_per_class=4,
    )
    _, corpus = synth_generate(cfg, seed=21)
    enc = SemanticEncoder("toy-text", embed_dim=64, output_dim=64)
    within, class_means = [], []
    for cid in corpus.classes():
        embs = torch.stack([semantic_encode(enc, d) for d in corpus.descriptions(cid)])
        normed = embs / embs.norm(dim=1, keepdim=True)
        sims = normed @ normed.T
        n = len(embs)
        within.append(float((sims.sum() - sims.diagonal().sum()) / (n * (n - 1))))
        class_means.append(embs.mean(dim=0))
    means = torch.stack(class_means)
    normed = means / means.norm(dim=1, keepdim=True)
    cross = normed @ normed.T
    n = len(class_means)
    mean_cross = float((cross.sum() - cross.diagonal().sum()) / (n * (n - 1)))
    assert mean_cross < min(within)
