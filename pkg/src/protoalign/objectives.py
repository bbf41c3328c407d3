"""Prototype and loss math for episodic training with semantic alignment.

Everything here is a pure function of its tensor inputs (float64), safe for
concurrent use, and differentiable wherever the inputs carry gradients. The
contrastive alignment loss is anchored on visual prototypes: for anchor i the
positive is its own semantic prototype, the negatives are the other visual
prototypes plus every semantic prototype (the positive pair also appears in
the denominator).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateVectorError

_DTYPE = torch.float64


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == _DTYPE else x.to(_DTYPE)
    return torch.as_tensor(x, dtype=_DTYPE)


def _row_norms(m: torch.Tensor, eps: float, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(m, dim=-1)
    if eps == 0.0 and bool((norms == 0).any()):
        raise DegenerateVectorError(f"zero-norm {what} has no direction")
    return norms + eps


def cosine_similarity(a, b, eps: float = 0.0) -> torch.Tensor:
    """Cosine similarity of two vectors.

    Zero-norm inputs are refused unless ``eps`` > 0, in which case ``eps`` is
    added to each norm (training-robustness mode, off in tests).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_similarity expects 1-D vectors")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = _row_norms(a, eps, "vector")
    nb = _row_norms(b, eps, "vector")
    return torch.dot(a, b) / (na * nb)


def cosine_matrix(a, b, eps: float = 0.0) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` (n,d) and ``b`` (m,d)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("cosine_matrix expects 2-D inputs")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = _row_norms(a, eps, "row")
    nb = _row_norms(b, eps, "row")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def visual_prototype(support_embeddings) -> torch.Tensor:
    """Mean of a class's support embeddings; gradients flow through."""
    if isinstance(support_embeddings, (list, tuple)):
        if len(support_embeddings) == 0:
            raise ValueError("cannot build a prototype from an empty support set")
        support_embeddings = torch.stack([_as_tensor(v) for v in support_embeddings])
    else:
        support_embeddings = _as_tensor(support_embeddings)
    if support_embeddings.shape[0] == 0:
        raise ValueError("cannot build a prototype from an empty support set")
    return support_embeddings.mean(dim=0)


def visual_prototypes(support_embeddings) -> torch.Tensor:
    """Per-class prototypes from a (n_way, k_shot, dim) embedding block."""
    support_embeddings = _as_tensor(support_embeddings)
    if support_embeddings.ndim != 3 or support_embeddings.shape[1] == 0:
        raise ValueError("expected a nonempty (n_way, k_shot, dim) block")
    return support_embeddings.mean(dim=1)


def semantic_prototype(description_embeddings, d_c: int | None = None) -> torch.Tensor:
    """Mean of a class's description embeddings.

    With a frozen semantic encoder the inputs carry no gradient, so none
    flows out. A cancelling set of descriptions can yield a zero vector; the
    degenerate case surfaces downstream when cosine similarity refuses it.
    """
    if isinstance(description_embeddings, (list, tuple)):
        if len(description_embeddings) == 0:
            raise ValueError("cannot build a prototype from zero descriptions")
        description_embeddings = torch.stack(
            [_as_tensor(v) for v in description_embeddings]
        )
    else:
        description_embeddings = _as_tensor(description_embeddings)
    if description_embeddings.shape[0] == 0:
        raise ValueError("cannot build a prototype from zero descriptions")
    if d_c is not None and description_embeddings.shape[0] != d_c:
        raise ValueError(
            f"expected d_c={d_c} descriptions, got {description_embeddings.shape[0]}"
        )
    return description_embeddings.mean(dim=0)


def query_class_probabilities(
    query_embedding, prototypes, tau_cls, eps: float = 0.0
) -> torch.Tensor:
    """Cosine-softmax class probabilities for one query (or a batch).

    Returns a length-N probability vector for a 1-D query, or an (M, N)
    matrix for an (M, d) batch. Scaling the query by any positive factor
    leaves the output unchanged (cosine scale invariance).
    """
    q = _as_tensor(query_embedding)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    logits = query_class_logits(q, prototypes, tau_cls, eps)
    probs = torch.softmax(logits, dim=-1)
    return probs[0] if single else probs


def query_class_logits(query_embeddings, prototypes, tau_cls, eps: float = 0.0) -> torch.Tensor:
    """Temperature-scaled cosine logits between query batch and prototypes."""
    tau = _as_tensor(tau_cls)
    if bool(tau <= 0):
        raise ValueError("tau_cls must be positive")
    return tau * cosine_matrix(query_embeddings, _as_tensor(prototypes), eps)


def cross_entropy(values, target, *, probs: bool = False) -> torch.Tensor:
    """Cross-entropy of a target index under logits (default) or probabilities.

    1-D ``values`` with an int target gives one loss; 2-D values with a
    target vector average over the batch.
    """
    v = _as_tensor(values)
    single = v.ndim == 1
    if single:
        v = v[None, :]
        t = torch.as_tensor([int(target)])
    else:
        t = torch.as_tensor(target, dtype=torch.long)
    if t.ndim != 1 or t.shape[0] != v.shape[0]:
        raise ValueError("targets must align with the value rows")
    if bool((t < 0).any()) or bool((t >= v.shape[1]).any()):
        raise IndexError(f"target out of range for {v.shape[1]} classes")
    if probs:
        picked = v[torch.arange(v.shape[0]), t]
        losses = -torch.log(picked)
    else:
        losses = torch.logsumexp(v, dim=1) - v[torch.arange(v.shape[0]), t]
    out = losses.mean()
    return out


def classification_accuracy(values, targets) -> float:
    """Fraction of rows whose argmax matches the target."""
    v = _as_tensor(values)
    t = torch.as_tensor(targets, dtype=torch.long)
    return float((v.argmax(dim=-1) == t).to(_DTYPE).mean())


@dataclass
class PrototypeSet:
    """Paired visual and semantic prototypes in episode class order.

    ``visual[i]`` and ``semantic[i]`` refer to the same class; ``class_ids``
    is optional bookkeeping for that correspondence.
    """

    visual: torch.Tensor
    semantic: torch.Tensor
    class_ids: tuple | None = None

    def __post_init__(self):
        self.visual = _as_tensor(self.visual)
        self.semantic = _as_tensor(self.semantic)
        if self.visual.ndim != 2 or self.semantic.ndim != 2:
            raise ValueError("prototype sets must be (n_classes, dim) matrices")
        if self.visual.shape != self.semantic.shape:
            raise ValueError(
                f"visual {tuple(self.visual.shape)} and semantic "
                f"{tuple(self.semantic.shape)} prototypes disagree"
            )
        if not bool(torch.isfinite(self.visual.detach()).all()) or not bool(
            torch.isfinite(self.semantic.detach()).all()
        ):
            raise ValueError("prototypes must be finite")
        if self.class_ids is not None and len(self.class_ids) != self.visual.shape[0]:
            raise ValueError("class_ids length must match prototype count")

    @property
    def n_classes(self) -> int:
        return self.visual.shape[0]

    @property
    def dim(self) -> int:
        return self.visual.shape[1]


def vs_alignment_loss(prototypes: PrototypeSet, tau_vs: float, eps: float = 0.0) -> torch.Tensor:
    """Contrastive visual-semantic alignment loss, mean over anchors.

    Anchor i contributes
    ``-log[ exp(cos(v_i, s_i)/tau) / (sum_{k!=i} exp(cos(v_i, v_k)/tau)
    + sum_k exp(cos(v_i, s_k)/tau)) ]``
    where the semantic sum runs over all k including i. Gradients flow into
    the visual prototypes only (the semantic side is frozen).
    """
    n = prototypes.n_classes
    if n < 2:
        raise ValueError("alignment loss needs at least 2 classes per episode")
    if tau_vs <= 0:
        raise ValueError("tau_vs must be positive")
    vv = cosine_matrix(prototypes.visual, prototypes.visual, eps) / tau_vs
    vs = cosine_matrix(prototypes.visual, prototypes.semantic, eps) / tau_vs
    evv = torch.exp(vv)
    evs = torch.exp(vs)
    eye = torch.eye(n, dtype=torch.bool)
    denom = evv.masked_fill(eye, 0.0).sum(dim=1) + evs.sum(dim=1)
    numer = evs.diagonal()
    per_anchor = torch.log(denom) - torch.log(numer)
    return per_anchor.mean()


def combined_loss(class_loss, vs_loss, lambda_vs) -> torch.Tensor:
    """Weighted total objective: classification loss plus lambda_vs times alignment."""
    if float(lambda_vs) < 0:
        raise ValueError("lambda_vs must be nonnegative")
    return _as_tensor(class_loss) + _as_tensor(lambda_vs) * _as_tensor(vs_loss)


@dataclass
class ObjectiveConfig:
    """Loss weighting and temperatures.

    ``tau_cls`` is the initial value of the trainable classifier temperature;
    ``tau_vs`` is fixed. ``lambda_vs`` weights the alignment term.
    """

    lambda_vs: float = 2.5
    tau_cls: float = 10.0
    tau_vs: float = 0.1

    def __post_init__(self):
        if self.lambda_vs < 0:
            raise ValueError("lambda_vs must be nonnegative")
        if self.tau_cls <= 0:
            raise ValueError("tau_cls must be positive")
        if self.tau_vs <= 0:
            raise ValueError("tau_vs must be positive")


@dataclass
class LossBreakdown:
    """Episode loss components; ``total`` always equals class + lambda * vs."""

    class_loss: float
    vs_loss: float
    total: float
    accuracy: float

    @classmethod
    def from_components(cls, class_loss, vs_loss, lambda_vs, accuracy) -> "LossBreakdown":
        total = float(combined_loss(float(class_loss), float(vs_loss), lambda_vs))
        return cls(
            class_loss=float(class_loss),
            vs_loss=float(vs_loss),
            total=total,
            accuracy=float(accuracy),
        )
