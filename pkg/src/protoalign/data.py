"""Few-shot datasets: manifest loading, description corpora, synthesis.

A dataset is a set of labeled images partitioned into disjoint base/val/novel
class splits. Each class additionally carries an ordered list of textual
descriptions, either raw strings or precomputed embedding vectors.

The synthetic generator draws class clusters in a latent space, renders them
into images through a fixed random linear map followed by a sigmoid (keeping
pixels in [0, 1]), and emits per-class descriptions whose class signal is
controlled by an informativeness knob (0 = pure noise).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DescriptionFileError,
    InsufficientExamplesError,
    ManifestError,
    SplitOverlapError,
)

SPLIT_NAMES = ("base", "val", "novel")


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    class_id: int


@dataclass(frozen=True)
class DatasetSplit:
    base_classes: frozenset
    val_classes: frozenset
    novel_classes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "base_classes", frozenset(self.base_classes))
        object.__setattr__(self, "val_classes", frozenset(self.val_classes))
        object.__setattr__(self, "novel_classes", frozenset(self.novel_classes))
        pairs = [
            ("base", "val", self.base_classes & self.val_classes),
            ("base", "novel", self.base_classes & self.novel_classes),
            ("val", "novel", self.val_classes & self.novel_classes),
        ]
        for a, b, overlap in pairs:
            if overlap:
                raise SplitOverlapError(
                    f"classes {sorted(overlap)} appear in both {a} and {b} splits"
                )

    @property
    def all_classes(self) -> frozenset:
        return self.base_classes | self.val_classes | self.novel_classes

    def classes_for(self, name: str) -> frozenset:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return {
            "base": self.base_classes,
            "val": self.val_classes,
            "novel": self.novel_classes,
        }[name]


@dataclass
class Dataset:
    """Immutable-after-construction image collection with split bookkeeping."""

    images: np.ndarray  # (n, H, W, C) float64 in [0, 1]
    class_ids: np.ndarray  # (n,) int64
    split: DatasetSplit
    image_shape: tuple
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.images.ndim != 4 or self.images.shape[1:] != self.image_shape:
            raise ValueError(
                f"images shaped {self.images.shape} do not match declared "
                f"shape {self.image_shape}"
            )
        if self.images.shape[0] != self.class_ids.shape[0]:
            raise ValueError("images and class_ids length mismatch")
        known = self.split.all_classes
        present = set(int(c) for c in np.unique(self.class_ids))
        stray = present - set(known)
        if stray:
            raise ValueError(f"class ids {sorted(stray)} missing from every split")
        index = {}
        for cid in sorted(known):
            index[int(cid)] = np.flatnonzero(self.class_ids == cid)
        self._index = index

    @property
    def n_examples(self) -> int:
        return int(self.images.shape[0])

    def classes(self) -> list:
        return sorted(self._index)

    def indices_of(self, class_id: int) -> np.ndarray:
        return self._index[int(class_id)]

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(image=self.images[i], class_id=int(self.class_ids[i]))

    def split_classes(self, name: str) -> frozenset:
        return self.split.classes_for(name)

    def require_min_examples(self, min_count: int):
        """Check every class holds at least min_count examples (e.g. K+Q)."""
        short = {
            cid: len(idx) for cid, idx in self._index.items() if len(idx) < min_count
        }
        if short:
            detail = ", ".join(f"class {c} has {n}" for c, n in sorted(short.items()))
            raise InsufficientExamplesError(
                f"need at least {min_count} examples per class: {detail}"
            )


# --- manifest I/O ---
#
# Line-delimited JSON. The first line declares the image shape and the split
# of every class; each following line is one example record:
#   {"image_shape": [16,16,1], "classes": [{"id": 0, "split": "base"}, ...]}
#   {"class_id": 0, "split": "base", "payload": "images.npy#0"}
# Payloads are either a relative .npy path holding one (H,W,C) array or a
# "sidecar.npy#row" reference into a stacked (n,H,W,C) array.


def _parse_header(line: str):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed header: {e}", line=1) from None
    if not isinstance(header, dict) or "image_shape" not in header or "classes" not in header:
        raise ManifestError("header must declare image_shape and classes", line=1)
    shape = tuple(header["image_shape"])
    if len(shape) != 3 or any(not isinstance(v, int) or v <= 0 for v in shape):
        raise ManifestError(f"bad image_shape {header['image_shape']}", line=1)
    declared = {}
    for entry in header["classes"]:
        if not isinstance(entry, dict) or "id" not in entry or "split" not in entry:
            raise ManifestError(f"bad class declaration {entry!r}", line=1)
        cid, split = int(entry["id"]), entry["split"]
        if split not in SPLIT_NAMES:
            raise ManifestError(f"unknown split {split!r} for class {cid}", line=1)
        if cid in declared:
            if declared[cid] != split:
                raise SplitOverlapError(
                    f"class {cid} appears in both {declared[cid]} and {split}", line=1
                )
            raise ManifestError(f"class {cid} declared twice", line=1)
        declared[cid] = split
    if not declared:
        raise ManifestError("header declares no classes", line=1)
    return shape, declared


def _load_payload(payload: str, root: Path, cache: dict, line: int) -> np.ndarray:
    if "#" in payload:
        rel, _, idx_str = payload.partition("#")
        try:
            row = int(idx_str)
        except ValueError:
            raise ManifestError(f"bad sidecar index {idx_str!r}", line=line) from None
        target = root / rel
        if target not in cache:
            if not target.exists():
                raise ManifestError(f"missing file {rel}", line=line)
            cache[target] = np.load(target)
        arr = cache[target]
        if arr.ndim != 4:
            raise ManifestError(f"sidecar {rel} must be a stacked (n,H,W,C) array", line=line)
        if not 0 <= row < arr.shape[0]:
            raise ManifestError(f"sidecar row {row} out of range for {rel}", line=line)
        return arr[row]
    target = root / payload
    if not target.exists():
        raise ManifestError(f"missing file {payload}", line=line)
    return np.load(target)


def load_manifest(path, min_examples_per_class: int | None = None) -> Dataset:
    """Load and eagerly validate a dataset manifest.

    ``min_examples_per_class`` (typically K+Q for the largest configured
    episode) turns under-populated classes into errors at load time.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError("empty manifest", line=1)
    image_shape, declared = _parse_header(lines[0])

    images, class_ids = [], []
    first_record_line = {}
    cache = {}
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ManifestError(f"malformed record: {e}", line=ln) from None
        if not isinstance(rec, dict) or not {"class_id", "split", "payload"} <= rec.keys():
            raise ManifestError("record needs class_id, split, payload", line=ln)
        cid = int(rec["class_id"])
        if cid not in declared:
            raise ManifestError(f"class {cid} not declared in header", line=ln)
        if rec["split"] != declared[cid]:
            raise SplitOverlapError(
                f"class {cid} appears in both {declared[cid]} and {rec['split']}", line=ln
            )
        img = np.asarray(_load_payload(rec["payload"], path.parent, cache, ln), dtype=np.float64)
        if img.shape != image_shape:
            raise ManifestError(
                f"class {cid} image shaped {img.shape}, expected {image_shape}", line=ln
            )
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ManifestError(f"class {cid} image values outside [0, 1]", line=ln)
        first_record_line.setdefault(cid, ln)
        images.append(img)
        class_ids.append(cid)

    for cid in sorted(declared):
        if cid not in first_record_line:
            raise InsufficientExamplesError(f"class {cid} has no examples", line=1)

    split = DatasetSplit(
        base_classes={c for c, s in declared.items() if s == "base"},
        val_classes={c for c, s in declared.items() if s == "val"},
        novel_classes={c for c, s in declared.items() if s == "novel"},
    )
    dataset = Dataset(
        images=np.stack(images),
        class_ids=np.asarray(class_ids),
        split=split,
        image_shape=image_shape,
    )
    if min_examples_per_class is not None:
        dataset.require_min_examples(min_examples_per_class)
    return dataset


def write_manifest(
    dataset: Dataset,
    out_dir,
    *,
    sidecar: bool = True,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Write a manifest plus payloads; returns the manifest path.

    ``sidecar=True`` stacks all images into one binary file; otherwise each
    example becomes its own .npy under ``payloads/``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_of = {}
    for name in SPLIT_NAMES:
        for cid in dataset.split.classes_for(name):
            split_of[int(cid)] = name
    header = {
        "image_shape": list(dataset.image_shape),
        "classes": [{"id": cid, "split": split_of[cid]} for cid in sorted(split_of)],
    }
    lines = [json.dumps(header, sort_keys=True)]
    if sidecar:
        np.save(out_dir / "images.npy", dataset.images)
        payloads = [f"images.npy#{i}" for i in range(dataset.n_examples)]
    else:
        payload_dir = out_dir / "payloads"
        payload_dir.mkdir(exist_ok=True)
        payloads = []
        for i in range(dataset.n_examples):
            rel = f"payloads/example_{i:06d}.npy"
            np.save(out_dir / rel, dataset.images[i])
            payloads.append(rel)
    for i in range(dataset.n_examples):
        cid = int(dataset.class_ids[i])
        rec = {"class_id": cid, "split": split_of[cid], "payload": payloads[i]}
        lines.append(json.dumps(rec, sort_keys=True))
    manifest_path = out_dir / manifest_name
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


# --- description corpora ---


@dataclass
class DescriptionCorpus:
    """Ordered per-class descriptions, all raw text or all vectors."""

    entries: dict  # class_id -> list[str] | list[np.ndarray]
    kind: str  # "text" | "vector"
    embed_dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("text", "vector"):
            raise ValueError(f"corpus kind must be 'text' or 'vector', got {self.kind!r}")
        for cid, items in self.entries.items():
            if not items:
                raise DescriptionFileError(f"class {cid} has zero descriptions")
            if self.kind == "vector":
                for v in items:
                    if len(v) != self.embed_dim:
                        raise DescriptionFileError(
                            f"class {cid} embedding of length {len(v)}, "
                            f"expected {self.embed_dim}"
                        )

    def classes(self) -> list:
        return sorted(self.entries)

    def d_c(self, class_id: int) -> int:
        return len(self.entries[int(class_id)])

    def descriptions(self, class_id: int) -> list:
        return self.entries[int(class_id)]

    def validate_against(self, dataset: Dataset):
        missing = sorted(set(dataset.split.base_classes) - set(self.entries))
        if missing:
            raise DescriptionFileError(
                f"no descriptions for base classes {missing}"
            )


def load_descriptions(path, dataset: Dataset) -> DescriptionCorpus:
    """Parse a description file: one record per line, class id first, then
    either one quoted string or a fixed-length vector of decimal floats."""
    path = Path(path)
    if not path.exists():
        raise DescriptionFileError(f"description file not found: {path}")
    entries: dict = {}
    kind = None
    embed_dim = None
    known = dataset.split.all_classes
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        head, _, rest = raw.strip().partition(" ")
        try:
            cid = int(head)
        except ValueError:
            raise DescriptionFileError(f"bad class id {head!r}", line=ln) from None
        if cid not in known:
            raise DescriptionFileError(f"class {cid} is not in the dataset", line=ln)
        rest = rest.strip()
        if not rest:
            raise DescriptionFileError("record has no description", line=ln)
        if rest.startswith('"'):
            try:
                value = json.loads(rest)
            except json.JSONDecodeError as e:
                raise DescriptionFileError(f"bad quoted description: {e}", line=ln) from None
            if not isinstance(value, str):
                raise DescriptionFileError("quoted description must be a string", line=ln)
            this_kind = "text"
        else:
            try:
                value = np.asarray([float(tok) for tok in rest.split()], dtype=np.float64)
            except ValueError:
                raise DescriptionFileError(
                    f"expected floats or a quoted string, got {rest[:40]!r}", line=ln
                ) from None
            this_kind = "vector"
            if embed_dim is None:
                embed_dim = value.shape[0]
            elif value.shape[0] != embed_dim:
                raise DescriptionFileError(
                    f"mixed embedding dimensions: {value.shape[0]} vs {embed_dim}", line=ln
                )
        if kind is None:
            kind = this_kind
        elif kind != this_kind:
            raise DescriptionFileError("mixed text and vector records", line=ln)
        entries.setdefault(cid, []).append(value)
    if kind is None:
        raise DescriptionFileError("description file has no records")
    corpus = DescriptionCorpus(entries=entries, kind=kind, embed_dim=embed_dim)
    corpus.validate_against(dataset)
    return corpus


def write_descriptions(corpus: DescriptionCorpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for cid in corpus.classes():
        for item in corpus.descriptions(cid):
            if corpus.kind == "text":
                lines.append(f"{cid} {json.dumps(item)}")
            else:
                lines.append(f"{cid} " + " ".join(repr(float(x)) for x in item))
    path.write_text("\n".join(lines) + "\n")
    return path


# --- synthetic generation ---


@dataclass
class SynthConfig:
    n_base_classes: int = 10
    n_val_classes: int = 4
    n_novel_classes: int = 6
    examples_per_class: int = 30
    image_shape: tuple = (16, 16, 1)
    latent_dim: int = 12
    semantic_dim: int = 512
    descriptions_per_class: int = 3
    sigma_between: float = 1.0
    sigma_within: float = 0.25
    informativeness: float = 0.8
    description_kind: str = "vector"  # "vector" | "text"
    text_tokens_per_description: int = 12
    text_signature_tokens: int = 8
    text_filler_vocab: int = 256

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        counts = {
            "n_base_classes": self.n_base_classes,
            "n_val_classes": self.n_val_classes,
            "n_novel_classes": self.n_novel_classes,
            "examples_per_class": self.examples_per_class,
            "latent_dim": self.latent_dim,
            "semantic_dim": self.semantic_dim,
            "descriptions_per_class": self.descriptions_per_class,
            "text_tokens_per_description": self.text_tokens_per_description,
            "text_signature_tokens": self.text_signature_tokens,
            "text_filler_vocab": self.text_filler_vocab,
        }
        for name, value in counts.items():
            if int(value) <= 0:
                raise ValueError(f"non-positive {name}: {value}")
        if len(self.image_shape) != 3 or any(v <= 0 for v in self.image_shape):
            raise ValueError(f"non-positive image_shape {self.image_shape}")
        if self.sigma_between <= 0 or self.sigma_within <= 0:
            raise ValueError("cluster sigmas must be positive")
        if not 0.0 <= self.informativeness <= 1.0:
            raise ValueError("informativeness must lie in [0, 1]")
        if self.description_kind not in ("vector", "text"):
            raise ValueError(f"unknown description_kind {self.description_kind!r}")

    @property
    def n_classes(self) -> int:
        return self.n_base_classes + self.n_val_classes + self.n_novel_classes


@dataclass(frozen=True)
class SynthLatentInfo:
    """Generator internals exposed for verification (same draw as the data)."""

    class_centers: np.ndarray  # (n_classes, latent_dim)
    semantic_directions: np.ndarray  # (n_classes, semantic_dim), unit rows
    latents: np.ndarray  # (n_examples, latent_dim)
    labels: np.ndarray  # (n_examples,)


_STREAMS = {"centers": 0, "latents": 1, "image-map": 2, "semantic-map": 3,
            "descriptions": 4, "text": 5}


def _rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    key = (_STREAMS[stream],) + tuple(int(v) for v in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _generate_core(config: SynthConfig, seed: int):
    n, m, L = config.n_classes, config.examples_per_class, config.latent_dim
    centers = _rng(seed, "centers").normal(0.0, config.sigma_between, (n, L))
    latents = np.concatenate(
        [
            centers[c] + _rng(seed, "latents", c).normal(0.0, config.sigma_within, (m, L))
            for c in range(n)
        ]
    )
    labels = np.repeat(np.arange(n, dtype=np.int64), m)

    flat = int(np.prod(config.image_shape))
    image_map = _rng(seed, "image-map").normal(0.0, 1.0 / np.sqrt(L), (L, flat))
    images = _sigmoid(latents @ image_map).reshape((n * m,) + config.image_shape)

    semantic_map = _rng(seed, "semantic-map").normal(0.0, 1.0 / np.sqrt(L), (L, config.semantic_dim))
    raw_dirs = centers @ semantic_map
    semantic_directions = raw_dirs / np.linalg.norm(raw_dirs, axis=1, keepdims=True)
    return centers, latents, labels, images, semantic_directions


def _vector_descriptions(config: SynthConfig, seed: int, directions: np.ndarray) -> dict:
    alpha, d_c, dim = config.informativeness, config.descriptions_per_class, config.semantic_dim
    entries = {}
    for c in range(config.n_classes):
        noise = _rng(seed, "descriptions", c).normal(0.0, 1.0, (d_c, dim)) / np.sqrt(dim)
        vecs = alpha * directions[c] + (1.0 - alpha) * noise
        entries[c] = [vecs[j] for j in range(d_c)]
    return entries


def _text_descriptions(config: SynthConfig, seed: int) -> dict:
    alpha = config.informativeness
    total = config.text_tokens_per_description
    n_sig = int(round(alpha * total))
    entries = {}
    for c in range(config.n_classes):
        rng = _rng(seed, "text", c)
        descs = []
        for _ in range(config.descriptions_per_class):
            sig = [f"class{c}tok{int(t)}" for t in rng.integers(0, config.text_signature_tokens, n_sig)]
            filler = [f"word{int(v)}" for v in rng.integers(0, config.text_filler_vocab, total - n_sig)]
            descs.append(" ".join(sig + filler))
        entries[c] = descs
    return entries


def synth_generate(config: SynthConfig, seed: int):
    """Deterministically generate a (Dataset, DescriptionCorpus) pair."""
    centers, latents, labels, images, directions = _generate_core(config, seed)
    n_b, n_v = config.n_base_classes, config.n_val_classes
    split = DatasetSplit(
        base_classes=set(range(n_b)),
        val_classes=set(range(n_b, n_b + n_v)),
        novel_classes=set(range(n_b + n_v, config.n_classes)),
    )
    dataset = Dataset(
        images=images, class_ids=labels, split=split, image_shape=config.image_shape
    )
    if config.description_kind == "vector":
        entries = _vector_descriptions(config, seed, directions)
        corpus = DescriptionCorpus(entries=entries, kind="vector", embed_dim=config.semantic_dim)
    else:
        entries = _text_descriptions(config, seed)
        corpus = DescriptionCorpus(entries=entries, kind="text")
    return dataset, corpus


def synth_latent_info(config: SynthConfig, seed: int) -> SynthLatentInfo:
    """The latent draw behind synth_generate(config, seed), for oracles."""
    centers, latents, labels, _, directions = _generate_core(config, seed)
    return SynthLatentInfo(
        class_centers=centers,
        semantic_directions=directions,
        latents=latents,
        labels=labels,
    )
