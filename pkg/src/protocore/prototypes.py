"""Prototype computation, blending, filtering, and the prototype-side losses.

Everything here is a pure function over tensors, so prototype vectors
built from live embeddings stay differentiable and losses can train
the encoder through them. Stored prototypes (anchors) enter as plain
constant tensors.

The posterior-style losses use the standard negative-log form with the
full softmax denominator; the raw-ratio form that omits the log and
excludes the positive from the denominator is kept behind
``strict_ratio`` for comparison.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .seeding import child_rng

DEFAULT_TEMPERATURE = 0.1
DEFAULT_INPUT_NOISE_FRACTION = 0.05
DEFAULT_EXTRA_TRANSFORMS = 3


@dataclass(frozen=True)
class Prototype:
    """A class anchor in embedding space."""

    class_id: int
    vector: ad.Tensor
    source: str = "real-current"  # real-current | synthetic-memory | blended | anchor

    def detached(self) -> "Prototype":
        return Prototype(self.class_id, self.vector.detach(), self.source)


@dataclass(frozen=True)
class Perturbation:
    """One member of the transformation set: identity or input-space noise."""

    kind: str  # "identity" | "input-noise"
    sd: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "input-noise"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")

    def apply(self, x: ad.Tensor, seed: int, index: int) -> ad.Tensor:
        if self.kind == "identity" or self.sd == 0.0:
            return x
        noise = child_rng(seed, "perturb", index).normal(0.0, self.sd, size=x.shape)
        return ad.add(x, ad.Tensor(noise))


@dataclass(frozen=True)
class TransformSet:
    """Ordered perturbations; each is deterministic given (seed, index)."""

    members: tuple

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("transformation set must have at least one member")

    def __len__(self):
        return len(self.members)

    def apply_all(self, x: ad.Tensor, seed: int) -> list:
        return [h.apply(x, seed, i) for i, h in enumerate(self.members)]

    @classmethod
    def identity_only(cls) -> "TransformSet":
        return cls((Perturbation("identity"),))

    @classmethod
    def default(cls, input_scale: float,
                noise_fraction: float = DEFAULT_INPUT_NOISE_FRACTION,
                extra: int = DEFAULT_EXTRA_TRANSFORMS) -> "TransformSet":
        """Identity plus ``extra`` Gaussian input-noise draws."""
        sd = noise_fraction * input_scale
        members = [Perturbation("identity")]
        members += [Perturbation("input-noise", sd) for _ in range(extra)]
        return cls(tuple(members))


@dataclass
class LossValue:
    """Scalar loss node plus its named, already-weighted contributions."""

    tensor: ad.Tensor
    breakdown: dict = field(default_factory=dict)
    notes: tuple = ()

    @property
    def value(self) -> float:
        return float(self.tensor.data)

    def consistent(self, tol: float = 1e-10) -> bool:
        return abs(self.value - sum(self.breakdown.values())) <= tol


def _zero_loss(name: str, note: str) -> LossValue:
    return LossValue(ad.Tensor(0.0), {name: 0.0}, notes=(note,))


# ---------------------------------------------------------------------------
# prototype construction


def compute_prototype(embeddings, class_id: int = -1,
                      source: str = "real-current") -> Prototype:
    """Coordinate-wise mean of a non-empty set of embeddings."""
    if isinstance(embeddings, ad.Tensor):
        if embeddings.ndim != 2 or embeddings.shape[0] == 0:
            raise ValueError("compute_prototype: need a non-empty (n, d) stack")
        vec = embeddings.mean(axis=0)
    else:
        embeddings = list(embeddings)
        if not embeddings:
            raise ValueError("compute_prototype: empty embedding list")
        vec = ad.stack_rows([e if isinstance(e, ad.Tensor) else ad.Tensor(e)
                             for e in embeddings]).mean(axis=0)
    return Prototype(class_id, vec, source)


def filter_misclassified(x: np.ndarray, y: np.ndarray, network):
    """Keep samples the classifier currently gets right.

    Returns (x, y, used_fallback); if every sample is misclassified the
    full input set comes back with the fallback flag raised, so callers
    never face an empty support set early in training.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    pred = network.predict(x)
    keep = pred == y
    if not np.any(keep):
        return x, y, True
    return x[keep], y[keep], False


def blend_prototypes(real_embs, synth_input, transforms: TransformSet,
                     network, beta1: float, beta2: float, seed: int,
                     class_id: int = -1) -> Prototype:
    """Weighted mix of a real-embedding mean and a perturbed-exemplar mean.

    p = beta1 * mean(real embeddings) + beta2 * mean_h f(h(s)). Either
    source may be absent; with only the synthetic side present the
    result is the plain beta2-weighted perturbed mean.
    """
    if real_embs is None and synth_input is None:
        raise ValueError("blend_prototypes: both sources empty")
    parts = []
    source = "blended"
    if real_embs is not None:
        if not isinstance(real_embs, ad.Tensor):
            real_embs = ad.Tensor(np.atleast_2d(real_embs))
        if real_embs.shape[0] == 0:
            raise ValueError("blend_prototypes: empty real-embedding stack")
        parts.append(ad.scale(real_embs.mean(axis=0), beta1))
        if synth_input is None:
            source = "real-current"
    if synth_input is not None:
        s = synth_input if isinstance(synth_input, ad.Tensor) else ad.Tensor(synth_input)
        perturbed = ad.stack_rows(
            [network.encode(h) for h in transforms.apply_all(s, seed)])
        parts.append(ad.scale(perturbed.mean(axis=0), beta2))
        if real_embs is None:
            source = "synthetic-memory"
    vec = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return Prototype(class_id, vec, source)


# ---------------------------------------------------------------------------
# posterior and losses


def _prototype_matrix(prototypes):
    """(class order, (C, d) tensor) from a {class_id: Tensor|Prototype} map."""
    order = sorted(prototypes)
    vecs = []
    for c in order:
        p = prototypes[c]
        vecs.append(p.vector if isinstance(p, Prototype) else p)
    return order, ad.stack_rows(vecs)


def _distances(embs: ad.Tensor, proto_mat: ad.Tensor, metric: str) -> ad.Tensor:
    d2 = ad.pairwise_sqdist(embs, proto_mat)
    if metric == "sq_euclidean":
        return d2
    if metric == "mse":
        return ad.scale(d2, 1.0 / proto_mat.shape[1])
    raise ValueError(f"unknown distance metric {metric!r}")


def proto_posterior(query, prototypes, metric: str = "sq_euclidean") -> ad.Tensor:
    """Class membership probabilities: softmax of negative distances.

    Output follows ascending class-id order and sums to one.
    """
    if len(prototypes) < 2:
        raise ValueError("proto_posterior: need at least 2 prototypes")
    q = query if isinstance(query, ad.Tensor) else ad.Tensor(query)
    if q.ndim == 1:
        q = ad.stack_rows([q])
    _, proto_mat = _prototype_matrix(prototypes)
    dist = _distances(q, proto_mat, metric)
    if not np.isfinite(dist.data).all():
        raise ad.NonFiniteError("proto_posterior: non-finite distance")
    probs = ad.softmax(ad.scale(dist, -1.0))
    return probs if probs.shape[0] > 1 else ad.rows(probs, [0]).mean(axis=0)


def posterior_nll(embs: ad.Tensor, labels, prototypes, variant: str,
                  metric: str = "mse", tau: float = DEFAULT_TEMPERATURE,
                  strict_ratio: bool = False) -> ad.Tensor:
    """Mean per-item prototype-classification loss over an embedding stack.

    prototypical: -log softmax(-d(emb, p)) at the true class.
    contrastive: InfoNCE with prototypes as candidates, cosine/tau logits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    order, proto_mat = _prototype_matrix(prototypes)
    index = {c: i for i, c in enumerate(order)}
    missing = set(labels.tolist()) - set(order)
    if missing:
        raise ValueError(f"no prototype for labels {sorted(missing)}")
    idx = np.array([index[c] for c in labels], dtype=np.intp)
    if variant == "prototypical":
        logits = ad.scale(_distances(embs, proto_mat, metric), -1.0)
    elif variant == "contrastive":
        if tau <= 0:
            raise ValueError("temperature must be positive")
        sims = ad.matmul(ad.row_normalize(embs),
                         ad.transpose(ad.row_normalize(proto_mat)))
        logits = ad.scale(sims, 1.0 / tau)
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    if strict_ratio:
        # raw ratio form: exp(l_true) / sum_{c != true} exp(l_c), no log
        e = ad.exp(logits)
        num = ad.take_per_row(e, idx)
        den = ad.sub(e.sum(axis=-1), num)
        return ad.div(num, den).mean()
    return ad.scale(ad.take_per_row(ad.log_softmax(logits), idx).mean(), -1.0)


def loss_cur_pro(embs, labels, prototypes, variant: str,
                 metric: str = "mse", tau: float = DEFAULT_TEMPERATURE,
                 strict_ratio: bool = False) -> LossValue:
    """Prototype loss on the current batch: every label needs a prototype."""
    t = posterior_nll(embs, labels, prototypes, variant, metric, tau, strict_ratio)
    return LossValue(t, {"cur_pro": float(t.data)})


def loss_pre_pro(synth_memory, real_batch, prototypes, transforms: TransformSet,
                 network, variant: str, previous_classes, seed: int,
                 metric: str = "mse", tau: float = DEFAULT_TEMPERATURE,
                 strict_ratio: bool = False, perturbed_embeddings=None) -> LossValue:
    """Prototype loss on memory: perturbed stored exemplars, plus real
    memory samples when full replay is active.

    Averages over every contributing (exemplar, perturbation) pair and
    real sample; returns exactly zero when no previous class has any
    memory content. ``perturbed_embeddings`` ({class: [tensors]}) reuses
    embeddings already computed this step instead of re-encoding.
    """
    previous_classes = set(previous_classes)
    emb_rows = []
    labels = []
    for c in sorted(previous_classes):
        if perturbed_embeddings is not None and c in perturbed_embeddings:
            for e in perturbed_embeddings[c]:
                emb_rows.append(e)
                labels.append(c)
            continue
        for slot, exemplar in enumerate(synth_memory.exemplars_for(c)):
            base = ad.Tensor(exemplar.decoded)
            for h in transforms.apply_all(base, seed=perturbation_seed(seed, c, slot)):
                emb_rows.append(network.encode(h))
                labels.append(c)
    if real_batch is not None:
        bx, by = real_batch
        for i in range(len(by)):
            if int(by[i]) in previous_classes:
                emb_rows.append(network.encode(bx[i]))
                labels.append(int(by[i]))
    if not emb_rows:
        return _zero_loss("pre_pro", "no previous classes")
    t = posterior_nll(ad.stack_rows(emb_rows), labels, prototypes, variant,
                      metric, tau, strict_ratio)
    return LossValue(t, {"pre_pro": float(t.data)})


def perturbation_seed(seed: int, class_id: int, slot: int) -> int:
    """Per-(class, exemplar-slot) seed used when perturbing stored exemplars."""
    return seed * 1000003 + class_id * 101 + slot


def info_nce(anchor, positive, negatives, tau: float) -> ad.Tensor:
    """-log exp(sim(a,p)/tau) / sum over {positive, negatives} of exp(sim/tau).

    sim is cosine similarity; the denominator includes the positive.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = anchor if isinstance(anchor, ad.Tensor) else ad.Tensor(anchor)
    cands = [positive] + list(negatives)
    cands = [c if isinstance(c, ad.Tensor) else ad.Tensor(c) for c in cands]
    sims = ad.matmul(ad.row_normalize(ad.stack_rows(cands)), ad.row_normalize(a))
    logits = ad.stack_rows([ad.scale(sims, 1.0 / tau)])
    return ad.scale(ad.take_per_row(ad.log_softmax(logits), [0]).mean(), -1.0)
