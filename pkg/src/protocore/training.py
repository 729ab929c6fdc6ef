"""Per-task training orchestration, task-head losses, baselines, metrics.

Methods:
  protocore            full replay: real reservoir + synthetic exemplars
                       + prototype anchors, three-term synthesis
  protocore-synth-only synthetic exemplars only, two-term synthesis
  finetune             task cross-entropy only (forgetting baseline)
  reservoir-er         task loss + weighted replay cross-entropy
  protocore-ablation   protocore with an explicit subset of loss terms

Ablation flags follow the component numbering used throughout:
(1) cur_syn (2) pre_syn (3) shift (4) cur_pro (5) pre_pro
(6) task_cur (7) task_pre. The current-task head loss stays active in
every configuration (nothing can classify without it).
"""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import prototypes as pr
from . import synthesis as sy
from .datasets import StreamMode, iterate
from .memory import MemoryPool
from .model import Network, pretrain_linear_decoder
from .seeding import child_rng, child_seed

METHODS = ("protocore", "protocore-synth-only", "finetune", "reservoir-er",
           "protocore-ablation")
ABLATION_TERMS = {1: "cur_syn", 2: "pre_syn", 3: "shift", 4: "cur_pro",
                  5: "pre_pro", 6: "task_cur", 7: "task_pre"}


@dataclass
class RunConfig:
    method: str = "protocore"
    loss_variant: str = "contrastive"  # | "prototypical"
    seed: int = 0
    # stream
    epochs: int = 3
    stream: str = "offline"  # | "online"
    batch_current: int = 16
    batch_memory: int = 32
    # model
    hidden: int = 32
    n_layers: int = 2
    d_emb: int = 16
    decoder: str = "identity"  # | "linear"
    d_latent: int | None = None  # defaults to input dim
    # optimization
    lr: float = 0.05
    # total-loss weights: L = w*cur_pro + a1*pre_pro + a2*task_pre + a3*task_cur
    weight_cur_pro: float = 1.0
    alpha_pre_pro: float = 1.0
    alpha_task_pre: float = 1.0
    alpha_task_cur: float = 1.0
    replay_weight: float = 1.0  # reservoir-er replay coefficient
    # prototype machinery
    proto_coeff: float = 0.95  # real-data weight when blending both sources
    tau: float = 0.1
    metric: str = "mse"  # | "sq_euclidean"
    strict_ratio: bool = False
    ce_temperature: float = 1.0
    sigma2: float | None = None  # override; default is stored per exemplar
    n_draws: int = 4
    transform_extra: int = 3
    transform_noise_fraction: float = 0.05
    # memory budgets
    spc_real: int = 0  # reservoir capacity = spc_real * total classes
    spc_synth: int = 1
    # synthesis
    synth_iterations: int = 50
    synth_optimizer: str = "gauss-newton"
    synth_step: float = 0.1
    synth_schedule: str = "cosine"
    synth_init: str = "gaussian"
    synth_init_weight: float = 1e-4
    align_previous: float = 0.1
    align_anchor: float = 0.1
    two_term_alpha: float = 0.9
    synth_restarts: int = 4
    ablation_losses: tuple = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.loss_variant not in ("contrastive", "prototypical"):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        for name in ("weight_cur_pro", "alpha_pre_pro", "alpha_task_pre",
                     "alpha_task_cur", "replay_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sigma2 is not None and self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if self.method == "protocore-ablation":
            bad = set(self.ablation_losses) - set(ABLATION_TERMS)
            if bad or not self.ablation_losses:
                raise ValueError(f"ablation_losses must be a non-empty subset "
                                 f"of 1..7, got {self.ablation_losses}")
        self.ablation_losses = tuple(sorted(set(self.ablation_losses)))

    def active_terms(self) -> set:
        """Network-side loss terms in play for this method."""
        if self.method == "finetune":
            return {"task_cur"}
        if self.method == "reservoir-er":
            return {"task_cur", "task_replay"}
        if self.method == "protocore-ablation":
            names = {ABLATION_TERMS[i] for i in self.ablation_losses}
            return {"task_cur"} | (names & {"cur_pro", "pre_pro", "task_pre"})
        return {"cur_pro", "pre_pro", "task_cur", "task_pre"}

    def synth_config(self) -> sy.SynthConfig:
        variant = ("two-term" if self.method == "protocore-synth-only"
                   else "three-term")
        cur_w, pre_w, shift_w = 1.0, self.align_previous, self.align_anchor
        if self.method == "protocore-ablation":
            flags = set(self.ablation_losses)
            synth_flags = flags & {1, 2, 3}
            # task-only rows still need usable exemplars to replay
            cur_w = 1.0 if (1 in flags or not synth_flags) else 0.0
            pre_w = self.align_previous if 2 in flags else 0.0
            shift_w = self.align_anchor if 3 in flags else 0.0
        return sy.SynthConfig(
            iterations=self.synth_iterations,
            optimizer=self.synth_optimizer,
            step_size=self.synth_step,
            schedule=self.synth_schedule,
            init_strategy=self.synth_init,
            init_weight=self.synth_init_weight,
            align_previous=pre_w,
            align_anchor=shift_w,
            two_term_alpha=self.two_term_alpha,
            current_weight=cur_w,
            variant=variant,
            per_class=self.spc_synth,
            restarts=self.synth_restarts,
        )

    def uses_real_memory(self) -> bool:
        return self.method in ("protocore", "reservoir-er", "protocore-ablation")

    def uses_synth_memory(self) -> bool:
        return self.method in ("protocore", "protocore-synth-only",
                               "protocore-ablation")

    def uses_proto_memory(self) -> bool:
        return (self.method in ("protocore", "protocore-ablation")
                and self.method != "protocore-synth-only")


# ---------------------------------------------------------------------------
# task-head losses


def _masked_logits(network, embs, allowed, temperature: float):
    logits = network.classify(embs)
    if temperature != 1.0:
        logits = ad.scale(logits, 1.0 / temperature)
    if allowed is not None:
        mask = np.full(network.n_classes, -np.inf)
        mask[sorted(allowed)] = 0.0
        logits = ad.add(logits, ad.Tensor(mask))
    return logits


def loss_task_cur(x, y, network, allowed_classes, temperature: float = 1.0) -> pr.LossValue:
    """Masked cross-entropy on the current batch, mean over samples."""
    y = np.asarray(y, dtype=np.int64)
    outside = set(y.tolist()) - set(allowed_classes)
    if outside:
        raise ValueError(f"labels {sorted(outside)} outside the seen classes")
    logits = _masked_logits(network, network.encode(x), allowed_classes, temperature)
    t = ad.softmax_cross_entropy(logits, y)
    return pr.LossValue(t, {"task_cur": float(t.data)})


def loss_task_pre(synth_memory, network, sigma2, n_draws: int, seed: int,
                  allowed_classes=None, temperature: float = 1.0,
                  base_embeddings=None) -> pr.LossValue:
    """Perturbation rehearsal: classify noisy copies of exemplar embeddings.

    For each stored exemplar, n_draws Gaussian embedding-space draws are
    classified toward that class; the result is the mean cross-entropy
    over all draws, exactly 0 when nothing is stored. ``sigma2`` of None
    uses each exemplar's recorded class variance.
    """
    rows = []
    labels = []
    for c in synth_memory.classes():
        for slot, ex in enumerate(synth_memory.exemplars_for(c)):
            if base_embeddings is not None and (c, slot) in base_embeddings:
                base = base_embeddings[(c, slot)]
            else:
                base = network.encode(ex.decoded)
            var = ex.sigma2 if sigma2 is None else sigma2
            sd = float(np.sqrt(var or 0.0))
            rng = child_rng(seed, "proto-perturb", c, slot)
            for _ in range(n_draws):
                noise = sd * rng.standard_normal(base.shape)
                rows.append(ad.add(base, ad.Tensor(noise)))
                labels.append(c)
    if not rows:
        return pr.LossValue(ad.Tensor(0.0), {"task_pre": 0.0},
                            notes=("empty synthetic memory",))
    logits = _masked_logits(network, ad.stack_rows(rows), allowed_classes,
                            temperature)
    t = ad.softmax_cross_entropy(logits, np.asarray(labels, dtype=np.int64))
    return pr.LossValue(t, {"task_pre": float(t.data)})


def total_loss(parts: dict, alpha1: float, alpha2: float, alpha3: float,
               weight_cur_pro: float = 1.0) -> pr.LossValue:
    """L = w*cur_pro + a1*pre_pro + a2*task_pre + a3*task_cur (exact sum)."""
    weights = {"cur_pro": weight_cur_pro, "pre_pro": alpha1,
               "task_pre": alpha2, "task_cur": alpha3}
    tensor = None
    breakdown = {}
    for name, w in weights.items():
        part = parts.get(name)
        if part is None:
            breakdown[name] = 0.0
            continue
        t = part.tensor if isinstance(part, pr.LossValue) else part
        if not np.isfinite(t.data).all():
            raise ad.NonFiniteError(f"non-finite loss part {name!r}")
        term = ad.scale(t, w)
        breakdown[name] = float(term.data)
        tensor = term if tensor is None else ad.add(tensor, term)
    if tensor is None:
        tensor = ad.Tensor(0.0)
    return pr.LossValue(tensor, breakdown)


# ---------------------------------------------------------------------------
# metrics


class AccuracyMatrix:
    """Lower-triangular accuracies: rows[t_done - 1][t - 1]."""

    def __init__(self, rows=None):
        self.rows = [list(r) for r in (rows or [])]

    def add_row(self, accuracies):
        row = [float(a) for a in accuracies]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"expected row of length {len(self.rows) + 1}, "
                             f"got {len(row)}")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def validate(self):
        if not self.rows:
            raise ValueError("empty accuracy matrix")
        for i, row in enumerate(self.rows):
            if len(row) != i + 1:
                raise ValueError(f"row {i + 1} has {len(row)} entries, "
                                 f"expected {i + 1}")
            if any(not 0.0 <= a <= 1.0 for a in row):
                raise ValueError("accuracies must lie in [0, 1]")

    def to_csv(self) -> str:
        T = len(self.rows)
        header = "after_task," + ",".join(f"task_{t}" for t in range(1, T + 1))
        lines = [header]
        for i, row in enumerate(self.rows):
            padded = [f"{a:.10g}" for a in row] + [""] * (T - len(row))
            lines.append(f"{i + 1}," + ",".join(padded))
        return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    last_accuracy: float       # mean accuracy over all tasks after the last one
    average_accuracy: float    # mean over stages of the stage-mean accuracy
    learning_accuracy: float   # mean diagonal (just-learned) accuracy
    forgetting: float          # mean peak-to-final drop over earlier tasks

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(matrix: AccuracyMatrix) -> MetricsReport:
    matrix.validate()
    rows = matrix.rows
    T = len(rows)
    last = rows[-1]
    a_t = float(np.mean(last))
    a_bar = float(np.mean([np.mean(r) for r in rows]))
    a_l = float(np.mean([rows[t][t] for t in range(T)]))
    if T == 1:
        forgetting = 0.0
    else:
        drops = []
        for t in range(T - 1):
            peak = max(rows[tau][t] for tau in range(t, T))
            drops.append(peak - last[t])
        forgetting = float(np.mean(drops))
    return MetricsReport(a_t, a_bar, a_l, forgetting)


# ---------------------------------------------------------------------------
# the per-task loop


def evaluate(network: Network, task, seen_classes) -> float:
    pred = network.predict(task.test_x, allowed=seen_classes)
    return float(np.mean(pred == task.test_y))


def _input_scale(seq) -> float:
    first = seq.tasks[0]
    return float(np.std(first.train_x)) or 1.0


def _previous_classes(cfg: RunConfig, pool: MemoryPool, current) -> list:
    prev = set(pool.m_s.classes())
    if cfg.uses_real_memory():
        prev |= set(pool.m_x.labels().tolist())
    return sorted(prev - set(current))


def _blend_weights(cfg: RunConfig, has_real: bool, has_synth: bool):
    # degenerate cases renormalize so prototypes stay proper means
    if has_real and has_synth:
        return cfg.proto_coeff, 1.0 - cfg.proto_coeff
    if has_real:
        return 1.0, 0.0
    return 0.0, 1.0


def _step_prototypes(cfg, network, pool, embs, y, previous, transforms,
                     step_seed):
    """Class prototypes for this step plus reusable perturbed embeddings.

    Current classes use their batch embeddings. Previous classes mix a
    perturbed-exemplar mean with embeddings of any matching replay-batch
    rows, weighted by the prototype coefficient.
    """
    protos = {}
    perturbed = {}
    for c in sorted(set(y.tolist())):
        rows_c = np.where(y == c)[0]
        protos[c] = pr.compute_prototype(ad.rows(embs, rows_c), c).vector
    memory_batch = None
    if cfg.uses_real_memory() and len(pool.m_x):
        memory_batch = pool.m_x.sample_batch(cfg.batch_memory,
                                             seed=child_seed(step_seed, "replay"))
    mem_embs = None
    if memory_batch is not None and len(memory_batch[1]):
        mem_embs = network.encode(memory_batch[0])
    for c in previous:
        slots = pool.m_s.exemplars_for(c)
        if slots:
            pert = []
            for slot, ex in enumerate(slots):
                base = ad.Tensor(ex.decoded)
                pseed = pr.perturbation_seed(child_seed(step_seed, "transform"),
                                             c, slot)
                pert.extend(network.encode(h)
                            for h in transforms.apply_all(base, pseed))
            perturbed[c] = pert
        real_rows = None
        if mem_embs is not None:
            idx = np.where(memory_batch[1] == c)[0]
            if len(idx):
                real_rows = ad.rows(mem_embs, idx)
        if not slots and real_rows is None:
            continue
        beta1, beta2 = _blend_weights(cfg, real_rows is not None, bool(slots))
        parts = []
        if real_rows is not None and beta1 > 0:
            parts.append(ad.scale(real_rows.mean(axis=0), beta1))
        if slots and beta2 > 0:
            parts.append(ad.scale(ad.stack_rows(perturbed[c]).mean(axis=0), beta2))
        vec = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
        protos[c] = vec
    return protos, perturbed, memory_batch, mem_embs


def _method_losses(cfg: RunConfig, network, pool, x, y, seen, current,
                   transforms, step_seed, task_id):
    """Assemble the per-step LossValue for the configured method."""
    active = cfg.active_terms()
    allowed = sorted(seen)
    if cfg.method == "finetune":
        lv = loss_task_cur(x, y, network, allowed, cfg.ce_temperature)
        return pr.LossValue(ad.scale(lv.tensor, cfg.alpha_task_cur),
                            {"task_cur": cfg.alpha_task_cur * lv.value})
    if cfg.method == "reservoir-er":
        cur = loss_task_cur(x, y, network, allowed, cfg.ce_temperature)
        tensor = cur.tensor
        breakdown = {"task_cur": cur.value, "task_replay": 0.0}
        if cfg.replay_weight > 0 and len(pool.m_x):
            bx, by = pool.m_x.sample_batch(cfg.batch_memory,
                                           seed=child_seed(step_seed, "replay"))
            if len(by):
                replay = loss_task_cur(bx, by, network, allowed,
                                       cfg.ce_temperature)
                term = ad.scale(replay.tensor, cfg.replay_weight)
                tensor = ad.add(tensor, term)
                breakdown["task_replay"] = float(term.data)
        return pr.LossValue(tensor, breakdown)

    previous = _previous_classes(cfg, pool, current)
    embs = network.encode(x)
    protos, perturbed, memory_batch, mem_embs = _step_prototypes(
        cfg, network, pool, embs, y, previous, transforms, step_seed)

    parts = {}
    if "cur_pro" in active:
        parts["cur_pro"] = pr.loss_cur_pro(
            embs, y, protos, cfg.loss_variant, metric=cfg.metric, tau=cfg.tau,
            strict_ratio=cfg.strict_ratio)
    if "pre_pro" in active:
        real_side = None
        if cfg.method != "protocore-synth-only" and memory_batch is not None:
            real_side = memory_batch
        parts["pre_pro"] = pr.loss_pre_pro(
            pool.m_s, real_side, protos, transforms, network, cfg.loss_variant,
            previous_classes=[c for c in previous if c in protos],
            seed=child_seed(step_seed, "transform"), metric=cfg.metric,
            tau=cfg.tau, strict_ratio=cfg.strict_ratio,
            perturbed_embeddings=perturbed)
    if "task_cur" in active:
        parts["task_cur"] = loss_task_cur(x, y, network, allowed,
                                          cfg.ce_temperature)
    if "task_pre" in active:
        bases = {}
        if transforms.members[0].kind == "identity":
            for c, pert in perturbed.items():
                per_slot = len(transforms)
                for slot in range(len(pert) // per_slot):
                    bases[(c, slot)] = pert[slot * per_slot]
        synth_part = loss_task_pre(
            pool.m_s, network, cfg.sigma2, cfg.n_draws,
            seed=child_seed(step_seed, "draws"), allowed_classes=allowed,
            temperature=cfg.ce_temperature, base_embeddings=bases)
        tensor = synth_part.tensor
        value = synth_part.value
        if (cfg.method != "protocore-synth-only" and memory_batch is not None
                and mem_embs is not None):
            logits = _masked_logits(network, mem_embs, allowed,
                                    cfg.ce_temperature)
            real_ce = ad.softmax_cross_entropy(logits, memory_batch[1])
            tensor = ad.add(tensor, real_ce)
            value += float(real_ce.data)
        parts["task_pre"] = pr.LossValue(tensor, {"task_pre": value})
    return total_loss(parts, cfg.alpha_pre_pro, cfg.alpha_task_pre,
                      cfg.alpha_task_cur, cfg.weight_cur_pro)


def _anchor_prototypes(task, network) -> dict:
    """Real per-class prototypes over misclassification survivors."""
    sx, sy_, _ = pr.filter_misclassified(task.train_x, task.train_y, network)
    anchors = {}
    for c in sorted(set(task.train_y.tolist())):
        cls = sx[sy_ == c]
        if len(cls) == 0:
            cls = task.train_x[task.train_y == c]
        anchors[c] = np.mean(network.encode_np(cls), axis=0)
    return anchors


@dataclass
class TaskLog:
    task_id: int
    epoch_losses: list = field(default_factory=list)  # dicts per epoch
    synthesis: sy.SynthesisReport | None = None


def train_task(task, network: Network, pool: MemoryPool, cfg: RunConfig,
               seen_classes, transforms, task_index: int) -> TaskLog:
    """One pass of the per-task loop: model update, synthesis, memory writes."""
    log = TaskLog(task_id=task.task_id)
    opt = ad.Adam(network.parameters(), lr=cfg.lr)
    mode = (StreamMode("online") if cfg.stream == "online"
            else StreamMode("offline", cfg.epochs))
    current = sorted(task.classes)
    step = 0
    epoch_acc = {}
    epoch_counts = {}
    epochs_total = 1 if cfg.stream == "online" else cfg.epochs
    steps_per_epoch = None
    batches = list(iterate(task, mode, cfg.batch_current,
                           seed=child_seed(cfg.seed, "stream", task.task_id)))
    if batches:
        steps_per_epoch = (len(batches) + epochs_total - 1) // epochs_total
    for x, y in batches:
        epoch = step // steps_per_epoch
        step_seed = child_seed(cfg.seed, "step", task.task_id, step)
        opt.zero_grad()
        lv = _method_losses(cfg, network, pool, x, y, seen_classes, current,
                            transforms, step_seed, task.task_id)
        if not np.isfinite(lv.tensor.data).all():
            raise ad.NonFiniteError(
                f"non-finite loss at task {task.task_id} step {step}: "
                f"{lv.breakdown}")
        ad.backward(lv.tensor)
        opt.step()
        acc = epoch_acc.setdefault(epoch, {})
        for name, val in lv.breakdown.items():
            acc[name] = acc.get(name, 0.0) + val
        acc["total"] = acc.get("total", 0.0) + lv.value
        epoch_counts[epoch] = epoch_counts.get(epoch, 0) + 1
        step += 1
    for epoch in sorted(epoch_acc):
        n = epoch_counts[epoch]
        log.epoch_losses.append(
            {"task": task.task_id, "epoch": epoch + 1,
             **{k: v / n for k, v in sorted(epoch_acc[epoch].items())}})

    # end of task: synthesis on the frozen snapshot, then memory writes
    if cfg.uses_synth_memory():
        exemplars, report = sy.optimize_exemplars(
            task.train_x, task.train_y, network, pool, cfg.synth_config(),
            seed=child_seed(cfg.seed, "synthesis", task.task_id),
            current_classes=current, task_id=task.task_id)
        log.synthesis = report
    if cfg.uses_real_memory():
        pool.m_x.extend(task.train_x, task.train_y)
    if cfg.uses_synth_memory():
        pool.m_s.replace(exemplars)
    if cfg.uses_proto_memory():
        pool.m_p.replace(_anchor_prototypes(task, network))
    return log


@dataclass
class RunResult:
    config: RunConfig
    matrix: AccuracyMatrix
    metrics: MetricsReport
    task_logs: list
    pool: MemoryPool
    checkpoints: list        # per-task parameter payloads
    memory_snapshots: list   # per-task memory payloads
    seconds: float = 0.0


def build_network(seq, cfg: RunConfig) -> Network:
    decoder = None
    if cfg.decoder == "linear":
        d_latent = cfg.d_latent or seq.input_dim
        decoder = pretrain_linear_decoder(seq.tasks[0].train_x, d_latent,
                                          seed=child_seed(cfg.seed, "decoder"))
    elif cfg.decoder != "identity":
        raise ValueError(f"unknown decoder kind {cfg.decoder!r}")
    return Network(d_in=seq.input_dim, n_classes=seq.n_classes,
                   seed=child_seed(cfg.seed, "model"), hidden=cfg.hidden,
                   n_layers=cfg.n_layers, d_emb=cfg.d_emb, decoder=decoder)


def run_sequence(seq, cfg: RunConfig) -> RunResult:
    """Train tasks in order, evaluating every seen test set after each."""
    started = time.perf_counter()
    network = build_network(seq, cfg)
    pool = MemoryPool.create(cfg.spc_real * seq.n_classes, cfg.spc_synth,
                             seed=child_seed(cfg.seed, "reservoir"))
    transforms = pr.TransformSet.default(
        _input_scale(seq), noise_fraction=cfg.transform_noise_fraction,
        extra=cfg.transform_extra)
    matrix = AccuracyMatrix()
    task_logs = []
    checkpoints = []
    memory_snapshots = []
    seen = set()
    for task in seq.tasks:
        seen |= set(task.classes)
        log = train_task(task, network, pool, cfg, seen, transforms,
                         task_index=task.task_id)
        task_logs.append(log)
        matrix.add_row([evaluate(network, t, seen)
                        for t in seq.tasks[:task.task_id]])
        checkpoints.append(network.state_payload())
        memory_snapshots.append(pool.to_snapshot())
    metrics = compute_metrics(matrix)
    return RunResult(cfg, matrix, metrics, task_logs, pool, checkpoints,
                     memory_snapshots, seconds=time.perf_counter() - started)
