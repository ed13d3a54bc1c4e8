"""Gated training: total loss, per-edge logit learning rates, iterative pruning."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gator import container
from gator.cost import CostFactors, CostObjective, LatencyTable, computational_loss, cost_factors, full_counts
from gator.datasets import Dataset, iterate_batches
from gator.executor import backward as net_backward
from gator.executor import cross_entropy, forward, init_weights, predict, trainable_names
from gator.gating import (GRANULARITIES as GATE_GRANULARITIES, GateDraw, GatePlacement, GateState, init_gates,
                          logit_for_probability, place_gates, prune_check, sample_gates, theta_grad)
from gator.hypergraph import DependencyHypergraph, build_hypergraph
from gator.ir import NetworkGraph, count_flops, count_params

log = logging.getLogger(__name__)

# random stream keys: SeedSequence([seed, phase, iteration, epoch, substream])
PHASE_CODES = {"pretrain": 0, "gating": 1, "finetune": 2, "calibrate": 3, "init": 4}
DATA, NOISE, AUGMENT = 0, 1, 2


class TrainingError(RuntimeError):
    pass


def stream(seed: int, phase: str, iteration: int = 0, epoch: int = 0, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, PHASE_CODES[phase], iteration, epoch, sub]))


# -- configuration -------------------------------------------------------------

@dataclass
class TrainingConfig:
    """Every knob of a training run; serialized as JSON."""

    alpha_schedule: list = field(default_factory=lambda: [1.0])
    gamma: float | None = None          # None: calibrate from gamma_candidates
    gamma_candidates: list = field(default_factory=lambda: [1.0, 3.0, 10.0, 30.0, 100.0])
    self_prune_ceiling: float = 0.05
    calibration_epochs: int = 2
    # piecewise-constant learning rates as [[epochs, lr], ...]
    pretrain_lr: list = field(default_factory=lambda: [[20, 0.05], [10, 0.005]])
    gating_lr: list = field(default_factory=lambda: [[20, 0.01], [10, 0.001]])
    finetune_lr: list = field(default_factory=lambda: [[20, 0.001]])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    objective: str = "flops"
    latency_table: str | None = None
    p_gate: float = 0.005
    tau: float = 1.0
    granularity: str = "per-sample"
    reinit_gates: bool = False
    augment: bool = True
    crop_pad: int = 4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if any(not a >= 0 for a in self.alpha_schedule):
            raise ValueError("alpha values must be >= 0")
        if any(b < a for a, b in zip(self.alpha_schedule, self.alpha_schedule[1:])):
            raise ValueError("alpha schedule must be non-decreasing")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.gamma is None and (not self.gamma_candidates or any(not c > 0 for c in self.gamma_candidates)):
            raise ValueError("gamma candidates must be a non-empty list of positive numbers")
        for name in ("pretrain_lr", "gating_lr", "finetune_lr"):
            sched = getattr(self, name)
            for step in sched:
                if len(step) != 2 or int(step[0]) != step[0] or step[0] < 0 or not step[1] > 0:
                    raise ValueError(f"{name} entries must be [epochs >= 0, lr > 0], got {step}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight decay >= 0")
        if self.objective not in ("memory", "flops", "latency"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "latency" and not self.latency_table:
            raise ValueError("latency objective needs latency_table")
        if self.granularity not in GATE_GRANULARITIES:
            raise ValueError(f"granularity must be one of {GATE_GRANULARITIES}")
        if not 0 <= self.self_prune_ceiling <= 1:
            raise ValueError("self_prune_ceiling must be in [0, 1]")
        logit_for_probability(self.p_gate)
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**doc)

    @classmethod
    def loads(cls, text: str) -> "TrainingConfig":
        return cls.from_dict(json.loads(text))

    def cost_objective(self, base: Path | None = None) -> CostObjective:
        table = None
        if self.objective == "latency":
            p = Path(self.latency_table)
            if base is not None and not p.is_absolute():
                p = base / p
            table = LatencyTable.load(p)
        return CostObjective(self.objective, table)


def lr_at(schedule, epoch: int) -> float:
    for epochs, lr in schedule:
        if epoch < epochs:
            return float(lr)
        epoch -= epochs
    raise IndexError("epoch past the end of the schedule")


def schedule_epochs(schedule) -> int:
    return int(sum(e for e, _ in schedule))


# -- gradients -----------------------------------------------------------------

@dataclass
class GradientSet:
    weights: dict[str, np.ndarray]
    theta: dict[int, np.ndarray]
    theta_task: dict[int, np.ndarray]
    theta_prune: dict[int, np.ndarray]


@dataclass
class StepResult:
    loss_total: float
    loss_original: float
    loss_computation: float
    correct: int
    grads: GradientSet


@dataclass
class GatedNet:
    graph: NetworkGraph
    hypergraph: DependencyHypergraph
    placement: GatePlacement

    @classmethod
    def build(cls, g: NetworkGraph) -> "GatedNet":
        h = build_hypergraph(g)
        return cls(g, h, place_gates(h))


def _first_nonfinite(g: NetworkGraph, trace) -> str:
    for l in g.layers:
        a = trace.acts.get(l.id)
        if a is not None and not np.all(np.isfinite(a)):
            return l.id
    return g.output_layer.id


def backward(net: GatedNet, w, x, y, draw: GateDraw | None, gates: GateState | None,
             factors: CostFactors | None, alpha: float, mode: str = "train",
             update_stats: bool = True) -> StepResult:
    """L_total = L_original + alpha * L_computation and its gradients.

    ``draw`` holds the sampled gates (None runs the net with ``gates``'
    fixed masks, or ungated). The logit gradient of edge ``j`` is split into
    the task term and the pruning term ``alpha * lam_hat_j * dg/dtheta``.
    """
    masks = None
    if draw is not None:
        masks = draw.g
    elif gates is not None:
        masks = gates.fixed_masks()
    site = net.placement.site_masks(masks) if masks else None
    logits, trace = forward(net.graph, w, x, mode, site_masks=site, record=True, update_stats=update_stats)
    loss, dlogits = cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss; first non-finite activation at layer "
                            f"{_first_nonfinite(net.graph, trace)!r}")
    wgrads, mgrads = net_backward(net.graph, w, trace, dlogits)
    correct = int(np.count_nonzero(logits.argmax(axis=1) == y))
    lcomp = 0.0
    theta, task, prune = {}, {}, {}
    if draw is not None:
        lcomp = computational_loss(draw.sums(), factors)
        egrads = net.placement.edge_grads(mgrads)
        n = x.shape[0]
        for j in gates.edges:
            gj, xj = draw.g[j], draw.x[j]
            up = egrads.get(j, np.zeros_like(gj))
            task[j] = theta_grad(up, xj, gates.theta[j], gates.tau, gates.pruned[j])
            # dL_comp/dg = lam_hat_j, averaged over the samples of a per-sample draw
            dcomp = np.full_like(gj, alpha * factors.normalized[j] / (n if gj.ndim == 2 else 1))
            prune[j] = theta_grad(dcomp, xj, gates.theta[j], gates.tau, gates.pruned[j])
            theta[j] = task[j] + prune[j]
    total = loss + alpha * lcomp
    return StepResult(total, loss, lcomp, correct, GradientSet(wgrads, theta, task, prune))


def edge_learning_rate(eta: float, gamma: float, lam_hat: float) -> float:
    """eta_j = gamma * eta / lam_hat_j."""
    if not lam_hat > 0:
        raise ZeroDivisionError("edge cost factor is zero; edge has no logit learning rate")
    return gamma * eta / lam_hat


@dataclass
class Optimizer:
    """Momentum SGD with weight decay on weights; plain per-edge SGD on gate logits."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    gamma: float = 1.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, w, grads: GradientSet, gates: GateState | None = None,
             factors: CostFactors | None = None) -> list[int]:
        """Updates ``w`` and ``gates`` in place; returns edges skipped for lam_hat = 0."""
        for name, gr in grads.weights.items():
            d = gr + self.weight_decay * w[name] if self.weight_decay else gr
            v = self.velocity.get(name)
            v = d if v is None or not self.momentum else self.momentum * v + d
            self.velocity[name] = v
            w[name] = w[name] - self.lr * v
        skipped = []
        if gates is not None:
            for j, gr in grads.theta.items():
                lam_hat = factors.normalized[j]
                if not lam_hat > 0:
                    log.warning("edge %d has zero cost factor; logit update skipped", j)
                    skipped.append(j)
                    continue
                eta_j = edge_learning_rate(self.lr, self.gamma, lam_hat)
                live = ~gates.pruned[j]
                gates.theta[j] = np.where(live, gates.theta[j] - eta_j * gr, gates.theta[j])
        return skipped


def sgd_step(w, gates, grads: GradientSet, config: TrainingConfig, factors, lr: float, gamma: float = 1.0,
             velocity: dict | None = None) -> dict:
    """One update; returns the (new) velocity buffers."""
    opt = Optimizer(lr, config.momentum, config.weight_decay, gamma, velocity if velocity is not None else {})
    opt.step(w, grads, gates, factors)
    return opt.velocity


# -- logging -------------------------------------------------------------------

class PruningRunLog:
    """Append-only list of per-epoch records, written as JSON lines."""

    def __init__(self, path: Path | None = None, records: list | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = list(records or [])

    def append(self, record: dict) -> None:
        if self.records:
            prev = self.records[-1].get("pruned_total", 0)
            if record.get("pruned_total", 0) < prev:
                raise TrainingError("pruned channel count decreased")
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def load(cls, path) -> "PruningRunLog":
        text = Path(path).read_text() if Path(path).exists() else ""
        return cls(None, [json.loads(line) for line in text.splitlines() if line.strip()])


def accuracy(net: GatedNet, w, x, y, gates: GateState | None = None) -> float:
    masks = net.placement.site_masks(gates.fixed_masks()) if gates is not None else None
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict(net.graph, w, x, masks) == y))


def current_counts(net: GatedNet, gates: GateState | None) -> np.ndarray:
    counts = full_counts(net.hypergraph)
    if gates is not None:
        for j, c in gates.open_counts().items():
            counts[j] = c
    return counts


def _estimate(net: GatedNet, gates: GateState | None) -> tuple[int, int]:
    from gator.pruning import effective_graph

    eg = effective_graph(net.graph, net.hypergraph, current_counts(net, gates)) if gates else net.graph
    return count_flops(eg), count_params(eg)


# -- phases --------------------------------------------------------------------

@dataclass
class PhaseResult:
    weights: dict[str, np.ndarray]
    gates: GateState | None
    records: list[dict]


def run_phase(kind: str, net: GatedNet, w, gates: GateState | None, data: Dataset, config: TrainingConfig,
              alpha: float = 0.0, gamma: float | None = None, iteration: int = 0,
              objective: CostObjective | None = None, log_to: PruningRunLog | None = None,
              lr_schedule=None, stream_phase: str | None = None) -> PhaseResult:
    """Train one phase and return the new weights/gates (inputs are not modified).

    ``gating``: stochastic gates, logit updates, cost factors recomputed from
    the open channel counts every step, permanent pruning after every step.
    ``finetune`` / ``pretrain``: task loss only, pruned channels held at zero.
    """
    if kind not in ("pretrain", "gating", "finetune"):
        raise ValueError(f"unknown phase {kind!r}")
    if len(data.train_x) == 0:
        raise TrainingError("training set is empty")
    if net.graph.spatial[net.graph.output_layer.id] is not None:
        raise ValueError("training needs a network whose output is a vector of class scores")
    if kind == "gating" and gates is None:
        raise ValueError("gating phase needs a gate state")
    w = {k: v.copy() for k, v in w.items()}
    gates = gates.copy() if gates is not None else None
    schedule = lr_schedule if lr_schedule is not None else getattr(config, f"{kind}_lr")
    gamma = config.gamma if gamma is None else gamma
    objective = objective or config.cost_objective()
    sp = stream_phase or kind
    h = net.hypergraph
    denominator = cost_factors(objective, net.graph, h).denominator if kind == "gating" else None
    opt = Optimizer(0.0, config.momentum, config.weight_decay, gamma if gamma else 1.0)
    train_names = set(trainable_names(w))
    records = []
    for epoch in range(schedule_epochs(schedule)):
        opt.lr = lr_at(schedule, epoch)
        data_rng = stream(config.seed, sp, iteration, epoch, DATA)
        noise_rng = stream(config.seed, sp, iteration, epoch, NOISE)
        aug_rng = stream(config.seed, sp, iteration, epoch, AUGMENT) if config.augment else None
        sums = {"orig": [], "comp": [], "total": []}
        correct = seen = 0
        for xb, yb in iterate_batches(data.train_x, data.train_y, config.batch_size, data_rng,
                                      augment_rng=aug_rng, crop_pad=config.crop_pad):
            if kind == "gating":
                factors = cost_factors(objective, net.graph, h, current_counts(net, gates), denominator)
                per = xb.shape[0] if config.granularity == "per-sample" else None
                draw = sample_gates(gates, noise_rng, per)
                res = backward(net, w, xb, yb, draw, gates, factors, alpha)
                res.grads.weights = {k: v for k, v in res.grads.weights.items() if k in train_names}
                opt.step(w, res.grads, gates, factors)
                prune_check(gates)
            else:
                factors = None
                res = backward(net, w, xb, yb, None, gates, None, 0.0)
                opt.step(w, res.grads)
            sums["orig"].append(res.loss_original)
            sums["comp"].append(res.loss_computation)
            sums["total"].append(res.loss_total)
            correct += res.correct
            seen += len(yb)
        flops, params = _estimate(net, gates)
        pruned = {str(j): int(gates.pruned[j].sum()) for j in gates.edges} if gates else {}
        n = len(sums["orig"])
        rec = {
            "phase": kind,
            "iteration": iteration,
            "epoch": epoch,
            "alpha": alpha if kind == "gating" else 0.0,
            "gamma": gamma if kind == "gating" else None,
            "lr": opt.lr,
            "loss_original": math.fsum(sums["orig"]) / n,
            "loss_computation": math.fsum(sums["comp"]) / n,
            "loss_total": math.fsum(sums["total"]) / n,
            "train_accuracy": correct / seen,
            "eval_accuracy": accuracy(net, w, data.eval_x, data.eval_y, gates),
            "pruned_per_edge": pruned,
            "pruned_total": sum(pruned.values()),
            "flops": flops,
            "params": params,
        }
        records.append(rec)
        if log_to is not None:
            log_to.append(rec)
        log.info("%s it%d ep%d loss=%.4f comp=%.4f acc=%.3f pruned=%d flops=%d", kind, iteration, epoch,
                 rec["loss_original"], rec["loss_computation"], rec["eval_accuracy"], rec["pruned_total"], flops)
    return PhaseResult(w, gates, records)


# -- gamma calibration ---------------------------------------------------------

def select_gamma(fractions: dict[float, float], ceiling: float) -> float:
    """Largest candidate whose self-pruned fraction stays within ``ceiling``."""
    ok = [gam for gam, frac in fractions.items() if frac <= ceiling]
    if not ok:
        listing = ", ".join(f"{gam:g}: {frac:.1%}" for gam, frac in sorted(fractions.items()))
        raise TrainingError(f"every gamma candidate self-prunes more than {ceiling:.1%} ({listing})")
    return max(ok)


def calibrate_gamma(net: GatedNet, w, data: Dataset, config: TrainingConfig,
                    candidates=None, epochs: int | None = None, objective: CostObjective | None = None):
    """Short alpha=0 gating runs per candidate; returns (gamma, report).

    Every candidate sees the same data order, augmentation and gate noise.
    """
    candidates = list(candidates if candidates is not None else config.gamma_candidates)
    if not candidates or any(not c > 0 for c in candidates):
        raise ValueError("gamma candidates must be positive")
    epochs = config.calibration_epochs if epochs is None else epochs
    lr = config.gating_lr[0][1] if config.gating_lr else 0.01
    report = []
    fractions = {}
    for gam in candidates:
        gates = init_gates(net.hypergraph, config.p_gate, config.tau)
        res = run_phase("gating", net, w, gates, data, config, alpha=0.0, gamma=gam, objective=objective,
                        lr_schedule=[[epochs, lr]], stream_phase="calibrate")
        frac = res.gates.total_pruned() / res.gates.total_channels()
        fractions[gam] = frac
        report.append({"gamma": gam, "self_pruned_fraction": frac, "self_pruned": res.gates.total_pruned(),
                       "eval_accuracy": res.records[-1]["eval_accuracy"] if res.records else None})
    return select_gamma(fractions, config.self_prune_ceiling), report


# -- iterative schedule --------------------------------------------------------

@dataclass
class RunResult:
    weights: dict[str, np.ndarray]
    gates: GateState
    log: PruningRunLog
    gamma: float | None
    baseline_accuracy: float | None = None
    calibration: list = field(default_factory=list)


def _save_checkpoint(out: Path | None, stem: str, w, gates: GateState | None) -> None:
    if out is None:
        return
    container.save(out / f"{stem}.weights", w)
    if gates is not None:
        container.save_gates(out / f"{stem}.gates", gates)


def run_iterative_pruning(net: GatedNet, w, data: Dataset, config: TrainingConfig,
                          out: Path | None = None, objective: CostObjective | None = None,
                          resume: bool = False, pretrain: bool = False) -> RunResult:
    """Optional pretraining and gamma calibration, then gating + finetune per alpha.

    Each iteration restarts from the previous gating-phase weights and gate
    logits. With ``out`` set, every phase leaves ``<stem>.weights`` /
    ``<stem>.gates`` checkpoints and ``progress.json``; ``resume`` skips the
    phases already recorded there.
    """
    objective = objective or config.cost_objective()
    objective.check_covers(net.hypergraph)
    out = Path(out) if out else None
    progress = {"done": [], "gamma": config.gamma, "baseline_accuracy": None, "calibration": []}
    runlog = PruningRunLog(out / "log.jsonl" if out else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "progress.json").exists():
            progress = json.loads((out / "progress.json").read_text())
            runlog = PruningRunLog.load(out / "log.jsonl")
            runlog.path = out / "log.jsonl"
            # drop records of a phase that was interrupted mid-way
            done_phases = {tuple(p) for p in progress["done"]}
            kept = [r for r in runlog.records if (r["phase"], r["iteration"]) in done_phases]
            if len(kept) != len(runlog.records):
                runlog.records = kept
                (out / "log.jsonl").write_text(runlog.dumps())
        else:
            (out / "log.jsonl").write_text("")
            (out / "config.json").write_text(config.dumps())

    def done(phase: str, it: int) -> bool:
        return [phase, it] in progress["done"]

    def mark(phase: str, it: int, w_, gates_) -> None:
        _save_checkpoint(out, phase if phase in ("pretrain",) else f"iter{it}_{phase}", w_, gates_)
        progress["done"].append([phase, it])
        if out is not None:
            (out / "progress.json").write_text(json.dumps(progress, indent=1, sort_keys=True) + "\n")

    def load(stem: str):
        wl = container.load(out / f"{stem}.weights")
        gp = out / f"{stem}.gates"
        return wl, (container.load_gates(gp) if gp.exists() else None)

    if pretrain and schedule_epochs(config.pretrain_lr):
        if done("pretrain", 0):
            w, _ = load("pretrain")
        else:
            w = run_phase("pretrain", net, w, None, data, config, objective=objective, log_to=runlog).weights
            progress["baseline_accuracy"] = accuracy(net, w, data.eval_x, data.eval_y)
            mark("pretrain", 0, w, None)
    if progress["baseline_accuracy"] is None:
        progress["baseline_accuracy"] = accuracy(net, w, data.eval_x, data.eval_y)

    gamma = progress["gamma"]
    if gamma is None and config.alpha_schedule:
        gamma, report = calibrate_gamma(net, w, data, config, objective=objective)
        progress["gamma"], progress["calibration"] = gamma, report
        if out is not None:
            (out / "progress.json").write_text(json.dumps(progress, indent=1, sort_keys=True) + "\n")

    gates = init_gates(net.hypergraph, config.p_gate, config.tau)
    final_w = w
    for it, alpha in enumerate(config.alpha_schedule):
        if it and config.reinit_gates:
            theta0 = logit_for_probability(config.p_gate)
            for j in gates.edges:
                gates.theta[j] = np.where(gates.pruned[j], gates.theta[j], theta0)
        if done("gating", it):
            w, gates = load(f"iter{it}_gating")
        else:
            res = run_phase("gating", net, w, gates, data, config, alpha=alpha, gamma=gamma, iteration=it,
                            objective=objective, log_to=runlog)
            w, gates = res.weights, res.gates
            mark("gating", it, w, gates)
        if done("finetune", it):
            final_w, _ = load(f"iter{it}_finetune")
        else:
            final_w = run_phase("finetune", net, w, gates, data, config, iteration=it, objective=objective,
                                log_to=runlog).weights
            mark("finetune", it, final_w, gates)
    return RunResult(final_w, gates, runlog, gamma, progress["baseline_accuracy"], progress["calibration"])


def initial_weights(g: NetworkGraph, seed: int) -> dict[str, np.ndarray]:
    return init_weights(g, stream(seed, "init"))
