"""Two-stage training: supervised pretraining, then episodic meta-learning.

Stage 1 trains the visual encoder plus a linear head on the base classes with
SGD and a step-decay schedule, then drops the head. Stage 2 fine-tunes the
bare encoder episodically with Adam: per episode it builds visual prototypes,
classifies queries by temperature-scaled cosine similarity, and (optionally)
adds the weighted visual-semantic alignment loss computed against frozen
per-class semantic prototypes.

All randomness is derived from (seed, named stream, counter), so the RNG
state of a run is fully captured by the seed plus the epoch and episode
counters carried in TrainState; checkpoint-resume is bitwise exact.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import Dataset, DescriptionCorpus
from .encoders import (
    EncoderConfig,
    SemanticEncoder,
    VisualEncoder,
    init_visual_encoder,
    params_checksum,
    visual_encode,
)
from .episodes import episode_at
from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointVersionError,
    DescriptionFileError,
    NonFiniteError,
    TrainingDivergedError,
)
from .objectives import (
    LossBreakdown,
    ObjectiveConfig,
    PrototypeSet,
    classification_accuracy,
    combined_loss,
    cross_entropy,
    query_class_logits,
    semantic_prototype,
    visual_prototypes,
    vs_alignment_loss,
)

logger = logging.getLogger(__name__)

_DTYPE = torch.float64

_SEED_STREAMS = {
    "encoder-init": 0,
    "classifier-init": 1,
    "stage1-shuffle": 2,
    "stage2-episodes": 3,
    "stage2-val": 4,
    "semantic-encoder": 5,
}

_TAU_MIN = 1e-3


def _seed_seq(seed: int, stream: str, *extra: int) -> np.random.SeedSequence:
    key = (_SEED_STREAMS[stream],) + tuple(int(v) for v in extra)
    return np.random.SeedSequence(int(seed), spawn_key=key)


def _int_seed(seed: int, stream: str, *extra: int) -> int:
    return int(_seed_seq(seed, stream, *extra).generate_state(1, np.uint64)[0])


def _np_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_seed_seq(seed, stream, *extra)))


# --- configuration ---


@dataclass
class Stage1Config:
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 100
    batch_size: int = 64
    decay_epochs: tuple = (60, 80)
    decay_factor: float = 0.1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.optimizer != "sgd":
            raise ValueError(f"stage 1 supports sgd only, got {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing: {self.decay_epochs}")
        if any(e >= self.epochs for e in self.decay_epochs) or any(
            e < 0 for e in self.decay_epochs
        ):
            raise ValueError("decay_epochs must lie in [0, epochs)")


@dataclass
class Stage2Config:
    optimizer: str = "adam"
    lr: float = 0.001
    epochs: int = 600
    batches_per_epoch: int = 1
    tasks_per_batch: int = 4
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    use_vs_alignment: bool = True
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    select_on_val: bool = False
    val_interval: int = 10
    val_episodes: int = 60

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"stage 2 supports adam only, got {self.optimizer!r}")
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        positive = (
            self.lr > 0
            and self.epochs >= 1
            and self.batches_per_epoch >= 1
            and self.tasks_per_batch >= 1
            and self.n_way >= 2
            and self.k_shot >= 1
            and self.q_per_class >= 1
            and self.val_interval >= 1
            and self.val_episodes >= 1
        )
        if not positive:
            raise ValueError("stage 2 sizes and learning rate must be positive (n_way >= 2)")


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0
    semantic_projection: str = "frozen"  # "frozen" | "trainable"
    text_embed_dim: int = 512

    def __post_init__(self):
        if isinstance(self.stage1, dict):
            self.stage1 = Stage1Config(**self.stage1)
        if isinstance(self.stage2, dict):
            self.stage2 = Stage2Config(**self.stage2)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.semantic_projection not in ("frozen", "trainable"):
            raise ValueError("semantic_projection must be 'frozen' or 'trainable'")


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


def stage1_lr_at(config: Stage1Config, epoch: int) -> float:
    """Piecewise-constant schedule: lr decays by decay_factor at each boundary."""
    n_decays = sum(1 for boundary in config.decay_epochs if epoch >= boundary)
    return config.lr * config.decay_factor ** n_decays


# --- train state ---


@dataclass
class TrainState:
    """Everything a stage needs to continue training.

    The RNG state is implicit: all sampling derives from (seed, stream name,
    epoch or episodes_drawn), so the counters below pin it exactly.
    """

    stage: str  # "classification" | "meta"
    encoder: VisualEncoder
    config: TrainConfig
    seed: int
    epoch: int = 0  # completed epochs in the current stage
    classifier: nn.Linear | None = None
    tau_cls: torch.Tensor | None = None
    optimizer_state: dict = field(default_factory=dict)  # name -> np.ndarray
    episodes_drawn: int = 0
    metrics: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    base_class_order: tuple = ()
    semantic_checksum: str | None = None


def clone_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)


def state_checksum(state: TrainState) -> str:
    """Digest of all learnable state plus counters (side-effect detection)."""
    h = hashlib.sha256()
    h.update(params_checksum(state.encoder).encode())
    if state.classifier is not None:
        h.update(params_checksum(state.classifier).encode())
    if state.tau_cls is not None:
        h.update(state.tau_cls.detach().numpy().tobytes())
    h.update(f"{state.stage}|{state.epoch}|{state.episodes_drawn}".encode())
    for name in sorted(state.optimizer_state):
        h.update(name.encode())
        h.update(np.asarray(state.optimizer_state[name]).tobytes())
    return h.hexdigest()


class MetricsWriter:
    """Appends one JSON record per line; does nothing when path is None."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _metric(stage, epoch, step, class_loss, vs_loss, total, accuracy, lr, tau_cls) -> dict:
    return {
        "stage": stage,
        "epoch": int(epoch),
        "step": int(step),
        "class_loss": float(class_loss),
        "vs_loss": float(vs_loss),
        "total": float(total),
        "accuracy": float(accuracy),
        "lr": float(lr),
        "tau_cls": None if tau_cls is None else float(tau_cls),
    }


# --- optimizer state round-tripping ---


def _extract_optimizer_state(optimizer, param_names) -> dict:
    out = {}
    for idx, slots in optimizer.state_dict()["state"].items():
        for key, val in slots.items():
            name = f"{param_names[idx]}::{key}"
            if isinstance(val, torch.Tensor):
                out[name] = val.detach().cpu().numpy().copy()
            else:
                out[name] = np.asarray(val)
    return out


def _restore_optimizer_state(optimizer, param_names, saved: dict):
    if not saved:
        return
    sd = optimizer.state_dict()
    state = {}
    for idx, pname in enumerate(param_names):
        prefix = f"{pname}::"
        slots = {}
        for name, arr in saved.items():
            if name.startswith(prefix):
                slots[name[len(prefix):]] = torch.as_tensor(np.array(arr))
        if slots:
            state[idx] = slots
    sd["state"] = state
    optimizer.load_state_dict(sd)


# --- stage 1: supervised classification ---


def _init_classifier(output_dim: int, n_classes: int, seed: int) -> nn.Linear:
    layer = nn.Linear(output_dim, n_classes).to(_DTYPE)
    g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        layer.weight.copy_(
            torch.randn(layer.weight.shape, generator=g, dtype=_DTYPE)
            / math.sqrt(output_dim)
        )
        layer.bias.zero_()
    return layer


def _encode_images(encoder: VisualEncoder, images: np.ndarray) -> torch.Tensor:
    return visual_encode(encoder, images)


def train_classification_stage(
    dataset: Dataset,
    config: TrainConfig,
    seed: int | None = None,
    *,
    resume_from: TrainState | None = None,
    metrics_path=None,
    checkpoint_dir=None,
    checkpoint_every: int | None = None,
) -> TrainState:
    """Supervised pretraining on the base classes; returns the bare encoder.

    The linear head trained here is dropped on completion. Divergence (a
    non-finite loss) aborts with a reference to the last checkpoint written.
    """
    cfg = config.stage1
    seed = config.seed if seed is None else int(seed)
    base_classes = sorted(int(c) for c in dataset.split.base_classes)
    if not base_classes:
        raise ValueError("dataset has no base classes to pretrain on")
    label_of = {cid: i for i, cid in enumerate(base_classes)}

    if resume_from is not None:
        state = resume_from
        if state.stage != "classification":
            raise ValueError(f"cannot resume stage 1 from a {state.stage!r} state")
        if state.classifier is None and state.epoch < cfg.epochs:
            raise ValueError("mid-training stage-1 state is missing its classifier")
        state.config = config
    else:
        encoder = init_visual_encoder(config.encoder, _int_seed(seed, "encoder-init"))
        classifier = _init_classifier(
            encoder.output_dim, len(base_classes), _int_seed(seed, "classifier-init")
        )
        state = TrainState(
            stage="classification",
            encoder=encoder,
            config=config,
            seed=seed,
            classifier=classifier,
            base_class_order=tuple(base_classes),
        )

    if state.epoch >= cfg.epochs:
        state.classifier = None
        return state

    encoder, classifier = state.encoder, state.classifier
    base_idx = np.concatenate([dataset.indices_of(c) for c in base_classes])
    base_labels = np.array([label_of[int(dataset.class_ids[i])] for i in base_idx])
    n = len(base_idx)
    batches_per_epoch = math.ceil(n / cfg.batch_size)

    params = list(encoder.parameters()) + list(classifier.parameters())
    names = [f"encoder.{pname}" for pname, _ in encoder.named_parameters()] + [
        "classifier.weight",
        "classifier.bias",
    ]
    optimizer = torch.optim.SGD(
        params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    _restore_optimizer_state(optimizer, names, state.optimizer_state)

    writer = MetricsWriter(metrics_path)
    last_good = None

    for epoch in range(state.epoch, cfg.epochs):
        lr = stage1_lr_at(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = _np_rng(seed, "stage1-shuffle", epoch).permutation(n)
        epoch_loss, epoch_acc = 0.0, 0.0
        for b in range(batches_per_epoch):
            take = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            images = dataset.images[base_idx[take]]
            targets = torch.as_tensor(base_labels[take])
            try:
                logits = classifier(_encode_images(encoder, images))
                loss = cross_entropy(logits, targets)
                diverged = not bool(torch.isfinite(loss.detach()))
            except NonFiniteError:
                diverged = True
            if diverged:
                raise TrainingDivergedError(
                    f"stage-1 loss non-finite at epoch {epoch} batch {b}",
                    last_good_checkpoint=last_good,
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            acc = classification_accuracy(logits.detach(), targets)
            record = _metric(
                "classification", epoch, epoch * batches_per_epoch + b,
                float(loss.detach()), 0.0, float(loss.detach()), acc, lr, None,
            )
            state.metrics.append(record)
            writer.write(record)
            epoch_loss += float(loss.detach())
            epoch_acc += acc
        state.epoch = epoch + 1
        logger.info(
            "stage1 epoch %d/%d loss %.4f acc %.3f lr %g",
            state.epoch, cfg.epochs, epoch_loss / batches_per_epoch,
            epoch_acc / batches_per_epoch, lr,
        )
        if checkpoint_dir and checkpoint_every and state.epoch % checkpoint_every == 0:
            state.optimizer_state = _extract_optimizer_state(optimizer, names)
            last_good = Path(checkpoint_dir) / f"stage1-epoch{state.epoch:04d}.ckpt"
            save_checkpoint(state, last_good)

    state.optimizer_state = _extract_optimizer_state(optimizer, names)
    state.classifier = None  # expose the bare embedding module
    return state


# --- stage 2: episodic meta-learning ---


def class_semantic_prototypes(corpus: DescriptionCorpus, encoder: SemanticEncoder) -> dict:
    """Frozen per-class semantic prototypes (mean of description embeddings)."""
    protos = {}
    for cid in corpus.classes():
        embs = encoder.encode_batch(corpus.descriptions(cid))
        protos[cid] = semantic_prototype(embs, corpus.d_c(cid))
    return protos


def _episode_terms(encoder, tau_cls, episode, cfg2: Stage2Config, sem_protos):
    """Loss tensor plus a LossBreakdown for one episode."""
    n, k = episode.n_way, episode.k_shot
    flat_support = episode.support_images.reshape((-1,) + episode.support_images.shape[2:])
    s_emb = _encode_images(encoder, flat_support).reshape(n, k, -1)
    p_c = visual_prototypes(s_emb)
    q_emb = _encode_images(encoder, episode.query_images)
    logits = query_class_logits(q_emb, p_c, tau_cls)
    targets = torch.as_tensor(episode.query_labels)
    class_loss = cross_entropy(logits, targets)
    accuracy = classification_accuracy(logits.detach(), targets)

    lam = cfg2.objective.lambda_vs
    if cfg2.use_vs_alignment and lam != 0.0:
        p_s = torch.stack([sem_protos[c] for c in episode.class_ids])
        vs = vs_alignment_loss(
            PrototypeSet(p_c, p_s, class_ids=episode.class_ids), cfg2.objective.tau_vs
        )
        total = combined_loss(class_loss, vs, lam)
        vs_value = float(vs.detach())
    else:
        # exact baseline path: the alignment term contributes nothing
        total = class_loss
        vs_value = 0.0
    breakdown = LossBreakdown.from_components(
        float(class_loss.detach()), vs_value, lam, accuracy
    )
    return total, breakdown


def _quick_episode_accuracy(encoder, tau_cls, dataset, split_classes, cfg2, seed, n_episodes):
    accs = []
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        for i in range(n_episodes):
            ep = episode_at(
                split_classes, dataset, cfg2.n_way, cfg2.k_shot, cfg2.q_per_class, seed, i
            )
            flat = ep.support_images.reshape((-1,) + ep.support_images.shape[2:])
            p_c = visual_prototypes(
                _encode_images(encoder, flat).reshape(ep.n_way, ep.k_shot, -1)
            )
            logits = query_class_logits(_encode_images(encoder, ep.query_images), p_c, tau_cls)
            accs.append(classification_accuracy(logits, torch.as_tensor(ep.query_labels)))
    encoder.train(was_training)
    return float(np.mean(accs))


def train_meta_stage(
    state: TrainState,
    dataset: Dataset,
    corpus: DescriptionCorpus | None,
    config: TrainConfig | None = None,
    *,
    metrics_path=None,
    checkpoint_dir=None,
    checkpoint_every: int | None = None,
) -> TrainState:
    """Episodic fine-tuning of a stage-1 embedding, optionally with alignment.

    Per batch it averages the total loss of ``tasks_per_batch`` episodes and
    takes one Adam step over the encoder parameters and the trainable
    classifier temperature. With alignment enabled, per-class semantic
    prototypes are built once from the frozen semantic encoder.
    """
    config = state.config if config is None else config
    cfg2 = config.stage2

    if state.stage == "classification":
        if state.classifier is not None and state.epoch < config.stage1.epochs:
            raise ValueError("stage 1 is not complete; finish it before meta-training")
        state = TrainState(
            stage="meta",
            encoder=state.encoder,
            config=config,
            seed=state.seed,
            tau_cls=torch.tensor(cfg2.objective.tau_cls, dtype=_DTYPE, requires_grad=True),
            metrics=list(state.metrics),
            base_class_order=state.base_class_order,
        )
    elif state.stage == "meta":
        state.config = config
    else:
        raise ValueError(f"cannot meta-train from a {state.stage!r} state")

    encoder, tau_cls = state.encoder, state.tau_cls
    base_classes = sorted(int(c) for c in dataset.split.base_classes)

    sem_protos = None
    sem_encoder = None
    if cfg2.use_vs_alignment:
        if corpus is None:
            raise ValueError("use_vs_alignment requires a description corpus")
        corpus.validate_against(dataset)
        sem_encoder = SemanticEncoder.for_corpus(
            corpus,
            encoder.output_dim,
            seed=_int_seed(state.seed, "semantic-encoder"),
            text_embed_dim=config.text_embed_dim,
            projection=config.semantic_projection,
        )
        sem_protos = class_semantic_prototypes(corpus, sem_encoder)
        state.semantic_checksum = sem_encoder.checksum()

    params = list(encoder.parameters()) + [tau_cls]
    names = [f"encoder.{pname}" for pname, _ in encoder.named_parameters()] + ["tau_cls"]
    if sem_encoder is not None:
        for i, p in enumerate(sem_encoder.trainable_parameters()):
            params.append(p)
            names.append(f"semantic.projection{i}")
    optimizer = torch.optim.Adam(params, lr=cfg2.lr, betas=(0.9, 0.999), eps=1e-8)
    _restore_optimizer_state(optimizer, names, state.optimizer_state)

    episode_seed = _int_seed(state.seed, "stage2-episodes")
    writer = MetricsWriter(metrics_path)
    last_good = None
    best = None  # (val_accuracy, encoder params, tau) when select_on_val

    for epoch in range(state.epoch, cfg2.epochs):
        for b in range(cfg2.batches_per_epoch):
            totals, breakdowns = [], []
            for _ in range(cfg2.tasks_per_batch):
                episode = episode_at(
                    base_classes, dataset, cfg2.n_way, cfg2.k_shot, cfg2.q_per_class,
                    episode_seed, state.episodes_drawn,
                )
                state.episodes_drawn += 1
                if cfg2.use_vs_alignment and cfg2.objective.lambda_vs != 0.0:
                    missing = [c for c in episode.class_ids if c not in sem_protos]
                    if missing:
                        raise DescriptionFileError(
                            f"no semantic prototypes for sampled classes {missing}"
                        )
                try:
                    total, breakdown = _episode_terms(
                        encoder, tau_cls, episode, cfg2, sem_protos
                    )
                except NonFiniteError:
                    raise TrainingDivergedError(
                        f"stage-2 loss non-finite at epoch {epoch} batch {b}",
                        last_good_checkpoint=last_good,
                    ) from None
                totals.append(total)
                breakdowns.append(breakdown)
            batch_loss = torch.stack(totals).mean()
            if not bool(torch.isfinite(batch_loss.detach())):
                raise TrainingDivergedError(
                    f"stage-2 loss non-finite at epoch {epoch} batch {b}",
                    last_good_checkpoint=last_good,
                )
            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step()
            with torch.no_grad():
                tau_cls.clamp_(min=_TAU_MIN)
            step = epoch * cfg2.batches_per_epoch + b
            record = _metric(
                "meta", epoch, step,
                float(np.mean([d.class_loss for d in breakdowns])),
                float(np.mean([d.vs_loss for d in breakdowns])),
                float(batch_loss.detach()),
                float(np.mean([d.accuracy for d in breakdowns])),
                cfg2.lr, float(tau_cls.detach()),
            )
            state.metrics.append(record)
            writer.write(record)
        state.epoch = epoch + 1
        if state.epoch % 50 == 0 or state.epoch == cfg2.epochs:
            logger.info(
                "stage2 epoch %d/%d total %.4f acc %.3f tau %.3f",
                state.epoch, cfg2.epochs, record["total"], record["accuracy"],
                record["tau_cls"],
            )
        if cfg2.select_on_val and (
            state.epoch % cfg2.val_interval == 0 or state.epoch == cfg2.epochs
        ):
            val_acc = _quick_episode_accuracy(
                encoder, tau_cls, dataset, dataset.split.val_classes, cfg2,
                _int_seed(state.seed, "stage2-val"), cfg2.val_episodes,
            )
            state.val_history.append({"epoch": state.epoch, "val_accuracy": val_acc})
            if best is None or val_acc > best[0]:
                best = (
                    val_acc,
                    copy.deepcopy(encoder.state_dict()),
                    tau_cls.detach().clone(),
                )
        if checkpoint_dir and checkpoint_every and state.epoch % checkpoint_every == 0:
            state.optimizer_state = _extract_optimizer_state(optimizer, names)
            last_good = Path(checkpoint_dir) / f"stage2-epoch{state.epoch:04d}.ckpt"
            save_checkpoint(state, last_good)

    state.optimizer_state = _extract_optimizer_state(optimizer, names)
    if cfg2.select_on_val and best is not None:
        encoder.load_state_dict(best[1])
        with torch.no_grad():
            tau_cls.copy_(best[2])
    if sem_encoder is not None and config.semantic_projection == "frozen":
        assert state.semantic_checksum == sem_encoder.checksum(), "semantic encoder mutated"
    return state


# --- checkpointing ---

_MAGIC = b"PALNCKPT"
FORMAT_VERSION = 1


def _collect_arrays(state: TrainState) -> dict:
    arrays = {}
    for pname, p in state.encoder.named_parameters():
        arrays[f"encoder.{pname}"] = p.detach().numpy()
    if state.classifier is not None:
        arrays["classifier.weight"] = state.classifier.weight.detach().numpy()
        arrays["classifier.bias"] = state.classifier.bias.detach().numpy()
    if state.tau_cls is not None:
        arrays["tau_cls"] = state.tau_cls.detach().numpy().reshape(1)
    for name, arr in state.optimizer_state.items():
        arrays[f"opt.{name}"] = np.asarray(arr)
    return arrays


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a self-describing, checksummed checkpoint container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _collect_arrays(state)
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = arr.tobytes()  # C-order copy; keeps 0-dim shapes intact
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "stage": state.stage,
        "architecture": state.encoder.architecture,
        "output_dim": state.encoder.output_dim,
        "seed": state.seed,
        "epoch": state.epoch,
        "episodes_drawn": state.episodes_drawn,
        "base_class_order": list(state.base_class_order),
        "semantic_checksum": state.semantic_checksum,
        "config": config_to_dict(state.config),
        "metrics": state.metrics,
        "val_history": state.val_history,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    path.write_bytes(body + digest)
    return path


def load_checkpoint(path) -> TrainState:
    """Round-trip a checkpoint; verifies checksum, version and architecture."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(_MAGIC) + 4 + 32 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointChecksumError(f"{path} is not a checkpoint file or is truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{path} failed its checksum (corrupt or truncated)")
    header_len = struct.unpack("<I", body[len(_MAGIC) : len(_MAGIC) + 4])[0]
    header_start = len(_MAGIC) + 4
    try:
        header = json.loads(body[header_start : header_start + header_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    payload = body[header_start + header_len :]
    arrays = {}
    for meta in header["arrays"]:
        chunk = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arrays[meta["name"]] = (
            np.frombuffer(chunk, dtype=np.dtype(meta["dtype"]))
            .reshape(meta["shape"])
            .copy()
        )

    config = train_config_from_dict(header["config"])
    encoder = init_visual_encoder(config.encoder, _int_seed(header["seed"], "encoder-init"))
    if encoder.architecture != header["architecture"] or encoder.output_dim != header["output_dim"]:
        raise CheckpointError("checkpoint header disagrees with its own encoder config")
    with torch.no_grad():
        for pname, p in encoder.named_parameters():
            p.copy_(torch.as_tensor(arrays[f"encoder.{pname}"]))

    classifier = None
    if "classifier.weight" in arrays:
        w = arrays["classifier.weight"]
        classifier = nn.Linear(w.shape[1], w.shape[0]).to(_DTYPE)
        with torch.no_grad():
            classifier.weight.copy_(torch.as_tensor(w))
            classifier.bias.copy_(torch.as_tensor(arrays["classifier.bias"]))

    tau_cls = None
    if "tau_cls" in arrays:
        tau_cls = torch.tensor(float(arrays["tau_cls"][0]), dtype=_DTYPE, requires_grad=True)

    optimizer_state = {
        name[len("opt.") :]: arr for name, arr in arrays.items() if name.startswith("opt.")
    }
    return TrainState(
        stage=header["stage"],
        encoder=encoder,
        config=config,
        seed=header["seed"],
        epoch=header["epoch"],
        classifier=classifier,
        tau_cls=tau_cls,
        optimizer_state=optimizer_state,
        episodes_drawn=header["episodes_drawn"],
        metrics=header["metrics"],
        val_history=header["val_history"],
        base_class_order=tuple(header["base_class_order"]),
        semantic_checksum=header["semantic_checksum"],
    )
