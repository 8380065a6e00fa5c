"""Search, warm-up and KCR-regularized retraining, with per-epoch bound records."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import Dataset, to_float
from .errors import DegenerateKernelError, KcrError, PipelineError, StalenessError
from .kernel import BoundReport, NystromFactors, akc, kcr_bounds, nystrom, spectrum_from_features, kc_exact
from .model import AdamW, KcrNet, LossSpec, ModelConfig, backward, extract_features, init_net, init_pruned, predict
from .numerics import Rng
from .selection import CostModel, anneal, architecture_dict, flops_block, flops_total

log = logging.getLogger(__name__)

CSV_COLUMNS = ["epoch", "phase", "ce", "kcr", "akc", "lower", "upper", "train_sq", "val_sq", "val_acc", "flops", "tau"]


@dataclass
class FeatureBank:
    """Epoch-frozen features and Nystrom factors for the separable regularizer."""

    F_snapshot: np.ndarray
    factors: NystromFactors
    r: int
    u_rows: np.ndarray
    P_r: np.ndarray
    epoch_stamp: int

    @property
    def n(self) -> int:
        return self.F_snapshot.shape[0]


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    ce: float
    kcr_loss: float
    akc: float
    bound: BoundReport | None
    train_sq: float
    val_sq: float
    val_accuracy: float
    hard_flops: int
    tau: float

    def row(self) -> list:
        nan = float("nan")
        lower = self.bound.lower if self.bound else nan
        upper = self.bound.upper if self.bound else nan
        return [self.epoch, self.phase, self.ce, self.kcr_loss, self.akc, lower, upper,
                self.train_sq, self.val_sq, self.val_accuracy, self.hard_flops, self.tau]


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % v


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        w.writerow([_fmt(v) for v in rec.row()])
    return buf.getvalue()


def kcr_batch_loss(batch_indices, live_features, bank: FeatureBank, r: int, n: int, epoch=None):
    """Batch regularizer and its gradient w.r.t. the live feature rows.

    Per sample ``c_i = (|f_i|^2 - <u_i, f_i P_r>) / n`` with ``u_i`` and
    ``P_r`` frozen in the bank; the batch value is the mean ``(1 / B) * sum c_i``,
    whose expectation over uniform batches is the approximate truncated nuclear
    norm divided by ``n`` (a full batch at the snapshot gives exactly that).
    """
    if bank is None:
        raise StalenessError("no feature bank: refresh before regularized training")
    if epoch is not None and bank.epoch_stamp != epoch:
        raise StalenessError(f"feature bank is stamped for epoch {bank.epoch_stamp}, not {epoch}")
    if r > bank.factors.r0:
        raise StalenessError(f"rank {r} exceeds the bank's factor rank {bank.factors.r0}")
    idx = np.asarray(batch_indices, dtype=np.intp)
    f = np.asarray(live_features, dtype=np.float64)
    u = bank.factors.U_tilde[idx, :r]
    P = bank.factors.P[:, :r]
    B = len(idx)
    c = (np.sum(f * f, axis=1) - np.sum((f @ P) * u, axis=1)) / n
    value = float(np.sum(c) / B)
    grad = (2.0 * f - u @ P.T) / (n * B)
    return value, grad


def refresh_bank(net: KcrNet, images, cfg: RunConfig, rng: Rng, landmarks=None, epoch_stamp=0):
    """Extract features, factorize, and cache the per-sample rows.

    Returns ``(bank, landmarks)``; pass the landmarks back in to keep the set
    fixed across refreshes. A degenerate landmark gram is retried once with a
    fresh draw.
    """
    F = extract_features(net, images)
    n, d = F.shape
    m = min(cfg.m_land, n)
    for attempt in range(2):
        if landmarks is None or attempt == 1:
            landmarks = np.sort(rng.choice(n, m))
        try:
            factors = nystrom(F, landmarks, epoch_stamp=epoch_stamp)
            break
        except DegenerateKernelError:
            if attempt == 1:
                raise
            log.warning("degenerate landmark gram; redrawing landmarks")
    r = min(cfg.rank(n, d), factors.r0)
    bank = FeatureBank(F, factors, r, factors.U_tilde[:, :r].copy(), factors.P[:, :r].copy(), epoch_stamp)
    return bank, landmarks


def evaluate(net: KcrNet, images, labels):
    """Hard-mode ``(accuracy, squared loss vs one-hot, cross-entropy)``."""
    logits = predict(net, images)
    return evaluate_logits(logits, labels)


def evaluate_logits(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros_like(logits)
    onehot[np.arange(len(labels)), labels] = 1.0
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    sq = float(np.mean(np.sum((logits - onehot) ** 2, axis=1)))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = float(-np.mean(logp[np.arange(len(labels)), labels]))
    return acc, sq, ce


def cost_model(net: KcrNet, lam: float) -> CostModel:
    return CostModel([(net.cfg.mlp_layers, sel) for sel in net.selectors()], lam)


def hard_flops(net: KcrNet) -> int:
    if net.pruned:
        return sum(flops_block(net.cfg.mlp_layers, len(k)) for k in net.keep)
    return flops_total(cost_model(net, 0.0))


def _batches(order, size):
    return [order[s: s + size] for s in range(0, len(order), size)]


@dataclass
class TrainState:
    """Optimizer state and counters carried across epochs of one phase."""

    opt: AdamW
    arch_opt: AdamW | None = None
    step: int = 0
    total_steps: int = 1
    landmarks: np.ndarray | None = None
    bank: FeatureBank | None = None
    extras: dict = field(default_factory=dict)


def search_epoch(net: KcrNet, data: Dataset, cfg: RunConfig, rng: Rng, epoch: int, state: TrainState) -> EpochRecord:
    """One supernet epoch under fresh per-batch soft masks.

    The first ``split_weights`` fraction of a seeded shuffle updates the
    weights with CE; the rest updates the alphas with CE plus
    ``lam * log(soft_cost)``. The temperature is annealed once at the end.
    """
    x = to_float(data.train_x)
    y = np.asarray(data.train_y)
    n = len(y)
    erng = rng.fork(epoch)
    order = erng.permutation(n)
    n_w = math.ceil(cfg.split_weights * n)
    noise_rng = erng.fork(1)
    weights, alphas = net.weight_names(), net.alpha_names()
    ces = []
    for idx in _batches(order[:n_w], cfg.batch):
        lr = _cosine(cfg, state)
        grads, parts = backward(net, x[idx], y[idx], LossSpec(mode="soft", rng=noise_rng))
        state.opt.step(net.params, grads, lr, weights)
        state.step += 1
        ces.append(parts["ce"])
    for idx in _batches(order[n_w:], cfg.batch):
        grads, parts = backward(net, x[idx], y[idx], LossSpec(mode="soft", rng=noise_rng, cost_weight=cfg.lam))
        state.arch_opt.step(net.params, grads, cfg.arch_lr, alphas)
        ces.append(parts["ce"])
    tau_used = net.tau
    net.tau = anneal(net.tau, cfg.tau_decay)
    _, train_sq, _ = evaluate(net, x, y)
    val_acc, val_sq, _ = evaluate(net, to_float(data.val_x), data.val_y) if len(data.val_y) else (math.nan,) * 3
    return EpochRecord(epoch, "search", float(np.mean(ces)), 0.0, math.nan, None, train_sq, val_sq, val_acc,
                       hard_flops(net), tau_used)


def _cosine(cfg: RunConfig, state: TrainState) -> float:
    frac = min(state.step / max(state.total_steps, 1), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def train_epoch(net: KcrNet, data: Dataset, cfg: RunConfig, epoch: int, rng: Rng, state: TrainState) -> EpochRecord:
    """One retraining epoch.

    Epochs ``<= t_warm`` use cross-entropy only; later epochs add
    ``kcr_weight * KCR_j`` computed against ``state.bank``, which must carry
    this epoch's stamp. At the end of every epoch from ``t_warm`` on, the bank
    is refreshed for the next epoch and its factors give the recorded A-KC.
    """
    x = to_float(data.train_x)
    y = np.asarray(data.train_y)
    n = len(y)
    regularized = epoch > cfg.t_warm
    bank = state.bank
    if regularized and (bank is None or bank.epoch_stamp != epoch):
        raise StalenessError(f"epoch {epoch} is regularized but the feature bank is missing or stale")
    order = rng.fork(epoch).permutation(n)
    steps_per_epoch = math.ceil(n / cfg.batch)
    ces, kcrs = [], []
    for idx in _batches(order, cfg.batch):
        spec = LossSpec(mode="hard")
        if regularized:
            spec.kcr_weight = cfg.kcr_weight
            spec.kcr = (bank.u_rows[idx], bank.P_r, n)
        grads, parts = backward(net, x[idx], y[idx], spec)
        state.opt.step(net.params, grads, cfg.lr_at(state.step, state.total_steps, steps_per_epoch))
        state.step += 1
        ces.append(parts["ce"])
        kcrs.append(cfg.kcr_weight * parts["kcr"] if regularized else 0.0)
    _, train_sq, _ = evaluate(net, x, y)
    val_acc, val_sq, _ = evaluate(net, to_float(data.val_x), data.val_y) if len(data.val_y) else (math.nan,) * 3
    a, report = math.nan, None
    if epoch >= cfg.t_warm:
        state.bank, state.landmarks = refresh_bank(net, x, cfg, rng.fork(10_000), state.landmarks, epoch + 1)
        a, _ = akc(state.bank.F_snapshot, state.bank.factors)
        kc, _ = exact_kc(state.bank.F_snapshot)
        report = kcr_bounds(train_sq, a, n, cfg.x, epoch=epoch, kc=kc)
        a = report.akc
    phase = "regularized" if regularized else "warmup"
    return EpochRecord(epoch, phase, float(np.mean(ces)), float(np.mean(kcrs)), a, report, train_sq, val_sq,
                       val_acc, hard_flops(net), net.tau)


@dataclass
class PipelineResult:
    net: KcrNet
    supernet: KcrNet
    architecture: dict
    records: list
    curves: dict

    def metrics_csv(self) -> str:
        return records_to_csv(self.records)


def run_search(model_cfg: ModelConfig, cfg: RunConfig, data: Dataset, records=None):
    """Search phase on a fresh supernet; returns ``(supernet, records)``."""
    root = Rng(cfg.seed)
    supernet = init_net(model_cfg, root.fork(1))
    supernet.tau = cfg.tau_init
    records = [] if records is None else records
    n_w = math.ceil(cfg.split_weights * len(data.train_y))
    state = TrainState(AdamW(cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay),
                       AdamW(cfg.beta1, cfg.beta2, weight_decay=0.0),
                       total_steps=cfg.t_search * math.ceil(n_w / cfg.batch))
    search_rng = root.fork(3)
    for epoch in range(1, cfg.t_search + 1):
        try:
            rec = search_epoch(supernet, data, cfg, search_rng, epoch, state)
        except KcrError as exc:
            raise PipelineError("search", epoch, exc) from exc
        log.info("search %d ce=%.4f val_acc=%.3f flops=%d", epoch, rec.ce, rec.val_accuracy, rec.hard_flops)
        records.append(rec)
    return supernet, records


def run_retrain(model_cfg: ModelConfig, cfg: RunConfig, data: Dataset, masks, records=None):
    """Retrain a freshly initialized net with the given architecture."""
    root = Rng(cfg.seed)
    net = init_pruned(model_cfg, masks, root.fork(2))
    records = [] if records is None else records
    n = len(data.train_y)
    state = TrainState(AdamW(cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay),
                       total_steps=cfg.t_train * math.ceil(n / cfg.batch))
    train_rng = root.fork(4)
    if cfg.t_warm == 0:
        state.bank, state.landmarks = refresh_bank(net, to_float(data.train_x), cfg, train_rng.fork(10_000), None, 1)
    for epoch in range(1, cfg.t_train + 1):
        try:
            rec = train_epoch(net, data, cfg, epoch, train_rng, state)
        except KcrError as exc:
            raise PipelineError(rec_phase(cfg, epoch), epoch, exc) from exc
        log.info("%s %d ce=%.4f kcr=%.4f akc=%.4f val_acc=%.3f", rec.phase, epoch, rec.ce, rec.kcr_loss, rec.akc,
                 rec.val_accuracy)
        records.append(rec)
    return net, records


def rec_phase(cfg: RunConfig, epoch: int) -> str:
    return "regularized" if epoch > cfg.t_warm else "warmup"


def run_pipeline(model_cfg: ModelConfig, cfg: RunConfig, data: Dataset, supernet=None) -> PipelineResult:
    """Search, harden, retrain from scratch with warm-up then KCR regularization.

    ``supernet`` (a finished search result) skips the search phase; its
    records are then not repeated.
    """
    records = []
    if supernet is None:
        supernet, records = run_search(model_cfg, cfg, data)
    masks = supernet.hard_masks()
    arch = architecture_dict([model_cfg.mlp_layers] * model_cfg.depth, masks)
    arch["unpruned_flops"] = flops_block(model_cfg.mlp_layers, model_cfg.D) * model_cfg.depth
    net, records = run_retrain(model_cfg, cfg, data, masks, records)
    return PipelineResult(net, supernet, arch, records, bound_curves(records))


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0 or not math.isfinite(denom):
        return None
    return float(np.sum(da * db) / denom)


def bound_curves(rows) -> dict:
    """Plot-ready series from records (or CSV dict rows), plus corr(upper, val_sq) over regularized epochs."""
    def get(r, k):
        if isinstance(r, dict):
            return r[k]
        return dict(zip(CSV_COLUMNS, r.row()))[k]

    keys = ["epoch", "train_sq", "val_sq", "lower", "upper", "akc"]
    series = {k: [] for k in keys}
    phases = []
    for r in rows:
        for k in keys:
            v = get(r, k)
            series[k].append(int(v) if k == "epoch" else _num(v))
        phases.append(get(r, "phase"))
    reg = [i for i, p in enumerate(phases) if p == "regularized"]
    corr = pearson([series["upper"][i] for i in reg], [series["val_sq"][i] for i in reg])
    series = {k: [None if isinstance(v, float) and math.isnan(v) else v for v in vals] for k, vals in series.items()}
    return {"series": series, "phase": phases, "pearson_upper_val_sq": corr, "regularized_epochs": len(reg),
            "constants": "unit-constant"}


def _num(v):
    return float(v)


def exact_kc(F):
    """Exact KC of the features' normalized gram (via the smaller gram)."""
    return kc_exact(spectrum_from_features(F))
