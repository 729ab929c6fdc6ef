"""End-of-task exemplar synthesis: optimize latents so decoded exemplars
embed onto class prototypes while staying aligned with stored exemplars
and anchored to stored real prototypes.

Runs once per task on a frozen network; only the latents move. The
three-term objective (current + previous + anchor alignment) is the
default; the two-term convex form is the synthetic-only variant.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .prototypes import LossValue, filter_misclassified
from .seeding import child_rng

DEFAULT_ITERATIONS = 50
DEFAULT_STEP = 0.1
DEFAULT_INIT_WEIGHT = 1e-4
DEFAULT_ALIGN_WEIGHT = 0.1


@dataclass
class SyntheticExemplar:
    """A learnable latent and its decoded input for one class slot."""

    class_id: int
    latent: np.ndarray
    decoded: np.ndarray  # always the decode of the current latent
    origin_task: int
    sigma2: float | None = None  # class embedding variance at synthesis time

    def refresh(self, decoder):
        self.decoded = decoder.decode_np(self.latent)


@dataclass
class SynthConfig:
    iterations: int = DEFAULT_ITERATIONS
    optimizer: str = "gauss-newton"  # | "adaptive-moment" | "plain"
    step_size: float = DEFAULT_STEP  # first-order optimizers only
    schedule: str = "cosine"  # "cosine" | "constant"
    init_strategy: str = "gaussian"  # or "class-input-mean"
    init_weight: float = DEFAULT_INIT_WEIGHT
    restarts: int = 4  # extra candidate starts for the least-squares solver
    align_previous: float = DEFAULT_ALIGN_WEIGHT  # weight on stored-exemplar term
    align_anchor: float = DEFAULT_ALIGN_WEIGHT    # weight on real-prototype term
    two_term_alpha: float = 0.9  # convex weight for the synthetic-only variant
    current_weight: float = 1.0  # weight on the current-prototype term
    variant: str = "three-term"  # "three-term" | "two-term"
    per_class: int = 1  # exemplar slots per class

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.align_previous, self.align_anchor) < 0:
            raise ValueError("alignment weights must be >= 0")
        if self.variant not in ("three-term", "two-term"):
            raise ValueError(f"unknown synthesis variant {self.variant!r}")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.optimizer not in ("gauss-newton", "adaptive-moment", "plain"):
            raise ValueError(f"unknown synthesis optimizer {self.optimizer!r}")


def init_exemplar(class_id: int, strategy: str, seed: int, decoder,
                  class_inputs: np.ndarray | None = None,
                  init_weight: float = DEFAULT_INIT_WEIGHT,
                  origin_task: int = 0) -> SyntheticExemplar:
    """Deterministic latent init: near-origin Gaussian or the class input mean."""
    if strategy == "gaussian":
        latent = init_weight * child_rng(seed, "latent-init", class_id).standard_normal(
            decoder.d_latent)
    elif strategy == "class-input-mean":
        if class_inputs is None or len(class_inputs) == 0:
            raise ValueError(f"class-input-mean init needs samples of class {class_id}")
        if decoder.d_latent != decoder.d_in:
            raise ValueError("class-input-mean init requires d_latent == d_in")
        latent = np.mean(np.atleast_2d(class_inputs), axis=0)
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    decoded = decoder.decode_np(latent)
    if not np.isfinite(decoded).all():
        raise ad.NonFiniteError(f"non-finite decoded exemplar for class {class_id}")
    return SyntheticExemplar(class_id, np.asarray(latent, dtype=np.float64),
                             decoded, origin_task)


# ---------------------------------------------------------------------------
# synthesis losses
#
# In-progress exemplar embeddings arrive as {class_id: [tensor per slot]}.
# A target entry may be one vector (shared by all slots, the single-
# exemplar contract) or a list matched slot by slot.


def _as_tensor(v) -> ad.Tensor:
    v = getattr(v, "vector", v)
    return v if isinstance(v, ad.Tensor) else ad.Tensor(v)


def _slot_target(entry, slot: int) -> ad.Tensor:
    if isinstance(entry, (list, tuple)):
        return _as_tensor(entry[min(slot, len(entry) - 1)])
    return _as_tensor(entry)


def _per_class_mse(new_embs: dict, targets: dict, name: str) -> LossValue:
    """Sum over classes of the mean-over-slots MSE to the class target(s)."""
    total = None
    for c in sorted(new_embs):
        if c not in targets:
            continue
        embs = new_embs[c]
        term = None
        for slot, e in enumerate(embs):
            m = ad.mse(e, _slot_target(targets[c], slot))
            term = m if term is None else ad.add(term, m)
        term = ad.scale(term, 1.0 / len(embs))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return LossValue(ad.Tensor(0.0), {name: 0.0}, notes=("no contributing classes",))
    return LossValue(total, {name: float(total.data)})


def loss_cur_syn(new_embs: dict, current_prototypes: dict) -> LossValue:
    """Pull current-class exemplar embeddings onto their real prototypes."""
    missing = set(new_embs) - set(current_prototypes)
    if missing:
        raise ValueError(f"no synthesis target prototype for classes {sorted(missing)}")
    return _per_class_mse(new_embs, current_prototypes, "cur_syn")


def loss_pre_syn(new_embs: dict, synth_memory, network) -> LossValue:
    """Align new exemplars with stored-exemplar embeddings; 0 if none stored.

    The stored-side embeddings stay in the graph so the loss is exactly
    differentiable in the encoder too (it is frozen during synthesis,
    where only the latents receive updates).
    """
    targets = {}
    for c in sorted(new_embs):
        stored = synth_memory.exemplars_for(c) if synth_memory is not None else []
        if stored:
            targets[c] = [network.encode(ex.decoded) for ex in stored]
    return _per_class_mse(new_embs, targets, "pre_syn")


def loss_shift(new_embs: dict, proto_memory) -> LossValue:
    """Anchor new exemplars to stored real prototypes; 0 if none stored."""
    targets = {}
    for c in sorted(new_embs):
        anchor = proto_memory.get(c) if proto_memory is not None else None
        if anchor is not None:
            targets[c] = ad.Tensor(anchor)
    return _per_class_mse(new_embs, targets, "shift")


def synthesis_loss(new_embs: dict, current_prototypes: dict, synth_memory,
                   proto_memory, network, config: SynthConfig) -> LossValue:
    """Combined objective: three-term sum or the two-term convex variant.

    Classes without a current prototype (memory-only classes) skip the
    current term and contribute through alignment and anchoring only.
    """
    cur = loss_cur_syn({c: e for c, e in new_embs.items()
                        if c in current_prototypes}, current_prototypes)
    pre = loss_pre_syn(new_embs, synth_memory, network)
    if config.variant == "two-term":
        a = config.two_term_alpha
        total = ad.add(ad.scale(cur.tensor, a), ad.scale(pre.tensor, 1.0 - a))
        return LossValue(total, {"cur_syn": a * cur.value,
                                 "pre_syn": (1.0 - a) * pre.value})
    shift = loss_shift(new_embs, proto_memory)
    w_cur = config.current_weight
    total = ad.add(ad.scale(cur.tensor, w_cur),
                   ad.add(ad.scale(pre.tensor, config.align_previous),
                          ad.scale(shift.tensor, config.align_anchor)))
    return LossValue(total, {"cur_syn": w_cur * cur.value,
                             "pre_syn": config.align_previous * pre.value,
                             "shift": config.align_anchor * shift.value})


# ---------------------------------------------------------------------------
# the per-task synthesis run


@dataclass
class SynthesisReport:
    iterations_run: int
    initial_loss: float
    final_loss: float
    aborted: bool = False
    # (class_id, slot) -> (initial, final) embedding-to-target distance
    distances: dict = field(default_factory=dict)


def _kmeans(points: np.ndarray, k: int, seed: int, iterations: int = 20):
    """Plain seeded Lloyd's algorithm; returns (centers, assignment)."""
    n = len(points)
    rng = child_rng(seed, "kmeans")
    centers = points[rng.choice(n, size=min(k, n), replace=False)].copy()
    assign = np.zeros(n, dtype=np.intp)
    for it in range(iterations):
        d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_assign = np.argmin(d, axis=1)
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(len(centers)):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, assign


def class_prototype_targets(x, y, network, current_classes, per_class: int,
                            seed: int) -> tuple:
    """Per-class synthesis targets from misclassification survivors.

    Slot 0 targets the full-class prototype (the single-exemplar
    contract). Extra slots target k-means centers of the class
    embeddings, so a larger synthetic budget tiles the class region
    instead of stacking copies on one point. Returns (targets,
    per-slot perturbation variances).
    """
    sx, sy, _ = filter_misclassified(x, y, network)
    targets = {}
    sigma2 = {}
    for c in sorted(current_classes):
        cls = sx[sy == c]
        if len(cls) == 0:
            cls = x[y == c]
        emb = network.encode_np(cls)
        slots = [np.mean(emb, axis=0)]
        sigma2[(c, 0)] = float(np.mean(np.var(emb, axis=0))) if len(emb) > 1 else 0.0
        if per_class > 1:
            centers, assign = _kmeans(emb, per_class - 1, child_seed_for(seed, c))
            for j, center in enumerate(centers):
                slot = len(slots)
                members = emb[assign == j]
                slots.append(center)
                sigma2[(c, slot)] = (float(np.mean(np.var(members, axis=0)))
                                     if len(members) > 1 else sigma2[(c, 0)])
            while len(slots) < per_class:  # fewer samples than slots
                slots.append(slots[0])
                sigma2[(c, len(slots) - 1)] = sigma2[(c, 0)]
        targets[c] = slots
    return targets, sigma2


def child_seed_for(seed: int, class_id: int) -> int:
    return seed * 9176 + class_id


def _initial_latents(task_x, task_y, pool, network, config: SynthConfig,
                     seed: int, current_classes, all_classes, task_id: int):
    latents = {}
    for c in all_classes:
        stored = pool.m_s.exemplars_for(c) if pool is not None else []
        for slot in range(config.per_class):
            if c in current_classes:
                ex = init_exemplar(
                    c, config.init_strategy, seed, network.decoder,
                    class_inputs=task_x[task_y == c],
                    init_weight=config.init_weight, origin_task=task_id)
                z = ex.latent
                if config.init_strategy == "class-input-mean" and slot > 0:
                    z = z + config.init_weight * child_rng(
                        seed, "slot-jitter", c, slot).standard_normal(len(z))
                elif config.init_strategy == "gaussian" and slot > 0:
                    z = config.init_weight * child_rng(
                        seed, "latent-init", c, slot).standard_normal(len(z))
            elif stored:
                # warm-start old classes from their stored exemplar
                z = stored[min(slot, len(stored) - 1)].latent.copy()
            else:
                z = init_exemplar(c, "gaussian", seed, network.decoder,
                                  init_weight=config.init_weight,
                                  origin_task=task_id).latent
            latents[(c, slot)] = ad.Tensor(z, requires_grad=True)
    return latents


def _slot_objectives(latents, targets, pool, network, config: SynthConfig,
                     current_classes):
    """Per-slot weighted alignment targets in embedding space.

    Every synthesis term has the form w * mse(f(g(z)), t) for a constant
    target t (the network is frozen), so per slot the objective is plain
    nonlinear least squares toward the weight-averaged target.
    """
    current = set(current_classes)
    w_cur = (config.two_term_alpha if config.variant == "two-term"
             else config.current_weight)
    w_pre = (1.0 - config.two_term_alpha if config.variant == "two-term"
             else config.align_previous)
    w_shift = 0.0 if config.variant == "two-term" else config.align_anchor
    objectives = {}
    for (c, slot) in latents:
        blocks = []
        if c in current and c in targets:
            blocks.append((w_cur, targets[c][min(slot, len(targets[c]) - 1)]))
        stored = pool.m_s.exemplars_for(c) if pool is not None else []
        if stored:
            ref = stored[min(slot, len(stored) - 1)]
            blocks.append((w_pre, network.encode_np(ref.decoded)))
        anchor = pool.m_p.get(c) if pool is not None else None
        if anchor is not None and w_shift > 0:
            blocks.append((w_shift, anchor))
        blocks = [(w, t) for w, t in blocks if w > 0]
        total = sum(w for w, _ in blocks)
        if total > 0:
            combined = sum(w * t for w, t in blocks) / total
            objectives[(c, slot)] = combined
    return objectives


def _gauss_newton_slot(z0: np.ndarray, target: np.ndarray, network,
                       iterations: int) -> np.ndarray:
    """Damped Gauss-Newton (Levenberg-Marquardt) on ||f(g(z)) - t||^2."""
    dec_jac = network.decoder.jacobian_np()
    z = z0.copy()
    lam = 1e-3
    decoded = network.decoder.decode_np(z)
    best = float(np.sum((network.encode_np(decoded) - target) ** 2))
    for _ in range(iterations):
        if best < 1e-24:
            break
        decoded = network.decoder.decode_np(z)
        residual = network.encode_np(decoded) - target
        jac = network.encoder.jacobian_np(decoded) @ dec_jac
        grad = jac.T @ residual
        hess = jac.T @ jac
        eye = np.eye(len(z))
        accepted = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(hess + lam * eye, grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            z_try = z - delta
            e_try = network.encode_np(network.decoder.decode_np(z_try))
            val = float(np.sum((e_try - target) ** 2))
            if np.isfinite(val) and val < best:
                z, best = z_try, val
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    return z


def _latent_from_input(x: np.ndarray, decoder) -> np.ndarray:
    """Latent whose decode best reproduces the given input."""
    if decoder.kind == "identity":
        return np.asarray(x, dtype=np.float64).copy()
    sol, *_ = np.linalg.lstsq(decoder.weight.T, x - decoder.offset, rcond=None)
    return sol


def _candidate_starts(key, z0, target, network, config, class_inputs,
                      stored, seed):
    """Deterministic extra starts for the slot solver.

    relu encoders leave the least-squares objective littered with local
    basins; restarting from on-manifold points (real class samples whose
    embeddings are nearest the target) reliably escapes them.
    """
    c, slot = key
    starts = []
    if class_inputs is not None and len(class_inputs):
        emb = network.encode_np(class_inputs)
        near = np.argsort(np.linalg.norm(emb - target, axis=1))
        for i in near[:max(config.restarts - 1, 1)]:
            starts.append(_latent_from_input(class_inputs[i], network.decoder))
        starts.append(_latent_from_input(np.mean(class_inputs, axis=0),
                                         network.decoder))
    elif stored:
        base = stored[min(slot, len(stored) - 1)].latent
        rng = child_rng(seed, "restart", c, slot)
        for scale in np.linspace(0.1, 1.0, config.restarts):
            starts.append(base + scale * rng.standard_normal(len(base)))
    return starts[:config.restarts + 1]


def _solve_slot(key, z0, target, network, config, class_inputs, stored, seed):
    best_z = _gauss_newton_slot(z0, target, network, config.iterations)
    best = float(np.sum((network.encode_np(network.decoder.decode_np(best_z))
                         - target) ** 2))
    if best < 1e-20:
        return best_z
    for start in _candidate_starts(key, z0, target, network, config,
                                   class_inputs, stored, seed):
        z = _gauss_newton_slot(start, target, network, config.iterations)
        val = float(np.sum((network.encode_np(network.decoder.decode_np(z))
                            - target) ** 2))
        if val < best:
            best_z, best = z, val
        if best < 1e-20:
            break
    return best_z


def optimize_exemplars(task_x, task_y, network, pool, config: SynthConfig,
                       seed: int, current_classes, task_id: int):
    """Synthesize exemplars for every class seen in current data or memory.

    The network is frozen throughout; only latents move. The default
    optimizer solves each slot's least-squares alignment with damped
    Gauss-Newton; the first-order optimizers descend the combined loss
    graph instead. A non-finite loss keeps the last finite iterate.
    """
    task_x = np.atleast_2d(np.asarray(task_x, dtype=np.float64))
    task_y = np.asarray(task_y, dtype=np.int64)
    current_classes = sorted(current_classes)
    memory_classes = set()
    if pool is not None:
        memory_classes = set(pool.m_s.classes()) | set(pool.m_p.classes())
    all_classes = sorted(set(current_classes) | memory_classes)

    before = network.state_payload()
    network.freeze()
    try:
        targets, slot_sigma2 = class_prototype_targets(
            task_x, task_y, network, current_classes, config.per_class, seed)
        proto_targets = {c: [ad.Tensor(v) for v in slots]
                         for c, slots in targets.items()}
        latents = _initial_latents(task_x, task_y, pool, network, config,
                                   seed, current_classes, all_classes, task_id)
        keys = sorted(latents)

        def embed_all():
            embs = {}
            for (c, slot), z in sorted(latents.items()):
                embs.setdefault(c, []).append(network.encode(network.decode(z)))
            return embs

        def loss_over(embs):
            return synthesis_loss(embs, proto_targets,
                                  pool.m_s if pool is not None else None,
                                  pool.m_p if pool is not None else None,
                                  network, config)

        def measure(embs):
            out = {}
            for c, lst in embs.items():
                for slot, e in enumerate(lst):
                    if c in targets:
                        t = targets[c][min(slot, len(targets[c]) - 1)]
                    elif pool is not None and pool.m_p.get(c) is not None:
                        t = pool.m_p.get(c)
                    else:
                        continue
                    out[(c, slot)] = float(np.linalg.norm(e.data - t))
            return out

        embs = embed_all()
        initial_loss = loss_over(embs).value
        initial_dist = measure(embs)
        report = SynthesisReport(iterations_run=0, initial_loss=initial_loss,
                                 final_loss=initial_loss)

        if config.optimizer == "gauss-newton":
            objectives = _slot_objectives(latents, targets, pool, network,
                                          config, current_classes)
            for key in keys:
                if key not in objectives:
                    continue
                c, _ = key
                class_inputs = task_x[task_y == c] if c in set(current_classes) else None
                stored = pool.m_s.exemplars_for(c) if pool is not None else []
                latents[key].data = _solve_slot(
                    key, latents[key].data, objectives[key], network, config,
                    class_inputs, stored, seed)
            report.iterations_run = config.iterations
        else:
            _first_order_descent(latents, keys, loss_over, embed_all, config,
                                 report)

        embs = embed_all()
        final_lv = loss_over(embs)
        if np.isfinite(final_lv.tensor.data).all():
            report.final_loss = final_lv.value
        final_dist = measure(embs)
        for key, d0 in initial_dist.items():
            report.distances[key] = (d0, final_dist.get(key, d0))

        exemplars = []
        for (c, slot) in keys:
            z = latents[(c, slot)].data.copy()
            prior = pool.m_s.exemplars_for(c) if pool is not None else []
            if (c, slot) in slot_sigma2:
                sigma2 = slot_sigma2[(c, slot)]
            elif prior:  # memory-only class keeps its recorded spread
                sigma2 = prior[min(slot, len(prior) - 1)].sigma2
            else:
                sigma2 = None
            exemplars.append(SyntheticExemplar(
                class_id=c,
                latent=z,
                decoded=network.decoder.decode_np(z),
                origin_task=task_id,
                sigma2=sigma2,
            ))
    finally:
        network.unfreeze()
    if network.state_payload() != before:
        raise RuntimeError("network parameters changed during exemplar synthesis")
    return exemplars, report


def _first_order_descent(latents, keys, loss_over, embed_all,
                         config: SynthConfig, report: "SynthesisReport"):
    params = [latents[k] for k in keys]
    schedule = (ad.CosineSchedule(config.step_size, config.iterations)
                if config.schedule == "cosine"
                else ad.ConstantSchedule(config.step_size))
    if config.optimizer == "adaptive-moment":
        opt = ad.Adam(params, lr=config.step_size, schedule=schedule)
    else:
        opt = ad.GradientDescent(params, lr=config.step_size, schedule=schedule)
    last_good = {k: v.data.copy() for k, v in latents.items()}
    for it in range(config.iterations):
        opt.zero_grad()
        lv = loss_over(embed_all())
        if not np.isfinite(lv.tensor.data).all():
            for key, z in latents.items():
                z.data = last_good[key]
            report.aborted = True
            return
        ad.backward(lv.tensor)
        try:
            opt.step()
        except ad.NonFiniteError:
            for key, z in latents.items():
                z.data = last_good[key]
            report.aborted = True
            return
        last_good = {k: v.data.copy() for k, v in latents.items()}
        report.iterations_run = it + 1

