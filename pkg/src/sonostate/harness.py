"""Pairs, label normalization, folds, the training loop and evaluation reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment_conditioned, lcn
from .data import Dataset, SamplePair, Trial
from .errors import InvalidArgument, InvalidConfiguration, InvalidData, InvalidState, NumericFailure
from .model import (
    SIGNALS, ModelParams, NetworkSpec, backward_gated, build_network, forward, loss_mae, zero_grads,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics


def _paired(est, truth):
    est = np.asarray(est, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if est.shape != truth.shape:
        raise InvalidArgument(f"length mismatch: {est.size} estimates vs {truth.size} truths")
    if est.size == 0:
        raise InvalidArgument("need at least one value")
    return est, truth


def smape(est, truth) -> float:
    """Symmetric mean absolute percentage error in [0, 200]; 0/0 terms count as 0."""
    est, truth = _paired(est, truth)
    num = np.abs(est - truth)
    den = (np.abs(est) + np.abs(truth)) / 2
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * terms.mean())


def accuracy(est, truth) -> float:
    return 100.0 - smape(est, truth)


def mae(est, truth) -> float:
    est, truth = _paired(est, truth)
    return float(np.mean(np.abs(est - truth)))


# ---------------------------------------------------------------- pairs


def pair_indices(n: int, mode: str = "canonical", n_sampled: int = 0, swap: bool = False,
                 rng: np.random.Generator | None = None, ref_index: int = 0) -> np.ndarray:
    """(P, 2) array of (reference, test) frame indices."""
    if n <= 0:
        raise InvalidArgument("trial has no frames")
    if mode == "canonical":
        if not 0 <= ref_index < n:
            raise InvalidArgument(f"reference index {ref_index} outside trial of {n} frames")
        idx = np.column_stack([np.full(n, ref_index), np.arange(n)])
    elif mode == "sampled":
        if rng is None:
            raise InvalidArgument("sampled pairs need an rng")
        idx = rng.integers(0, n, size=(n_sampled, 2))
    else:
        raise InvalidArgument(f"unknown pair mode {mode!r}")
    if swap:
        idx = np.concatenate([idx, idx[:, ::-1]])
    return idx.astype(np.int64)


def make_pair(trial: Trial, ref: int, test: int) -> SamplePair:
    return SamplePair(
        trial.participant, trial.name, int(ref), int(test),
        np.stack([trial.gm[ref], trial.gm[test]]), np.stack([trial.so[ref], trial.so[test]]),
        trial.labels[ref].copy(), trial.labels[test] - trial.labels[ref],
    )


def make_pairs(trial: Trial, mode: str = "canonical", n_sampled: int = 0, swap: bool = False,
               rng: np.random.Generator | None = None, ref_index: int = 0) -> list[SamplePair]:
    idx = pair_indices(len(trial), mode, n_sampled, swap, rng, ref_index)
    return [make_pair(trial, r, t) for r, t in idx]


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class Normalizer:
    """Per-signal standard deviations of difference labels."""

    std: np.ndarray

    @classmethod
    def fit(cls, diffs) -> "Normalizer":
        d = np.asarray(diffs, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != len(SIGNALS) or len(d) < 2:
            raise InvalidData("need at least 2 difference labels of length 4")
        std = d.std(axis=0)
        if np.any(std == 0) or not np.all(np.isfinite(std)):
            bad = [SIGNALS[i] for i in np.flatnonzero(~(std > 0))]
            raise InvalidData(f"zero-variance signal(s) in training labels: {bad}")
        return cls(std)

    def apply(self, diff):
        return np.asarray(diff, dtype=np.float64) / self.std

    def invert(self, norm):
        return np.asarray(norm, dtype=np.float64) * self.std


# ---------------------------------------------------------------- early stopping


class EarlyStopper:
    """Stops once every monitored stream has gone ``patience`` evaluations
    without a new minimum (patience 0 behaves like 1)."""

    def __init__(self, patience: int = 8, streams: int = 2):
        if patience < 0 or streams < 1:
            raise InvalidArgument("patience must be >= 0 and streams >= 1")
        self.patience = patience
        self.best = [np.inf] * streams
        self.best_index = [-1] * streams
        self.stale = [0] * streams
        self.count = 0

    def update(self, *errors) -> bool:
        if len(errors) != len(self.best):
            raise InvalidArgument(f"expected {len(self.best)} error values")
        for s, e in enumerate(errors):
            if e < self.best[s]:
                self.best[s] = e
                self.best_index[s] = self.count
                self.stale[s] = 0
            else:
                self.stale[s] += 1
        self.count += 1
        return self.should_stop

    @property
    def should_stop(self) -> bool:
        return all(st >= max(self.patience, 1) for st in self.stale)


def early_stop_trace(*streams, patience: int = 8):
    """Replay error streams; returns (stop index or None, best index per stream)."""
    stopper = EarlyStopper(patience, len(streams))
    for i, errs in enumerate(zip(*streams)):
        if stopper.update(*errs):
            return i, list(stopper.best_index)
    return None, list(stopper.best_index)


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class Fold:
    index: int
    test: str
    validation: str
    training: tuple

    @property
    def held_out(self) -> tuple:
        return (self.test, self.validation)


def make_folds(participants, pairing=None) -> list[Fold]:
    """Default pairing: sorted participants (2k, 2k+1) form fold k."""
    ps = sorted(participants)
    if pairing is None:
        if len(ps) % 2:
            raise InvalidConfiguration("default pairing needs an even number of participants")
        pairing = [(ps[2 * k], ps[2 * k + 1]) for k in range(len(ps) // 2)]
    folds = [Fold(k, t, v, tuple(p for p in ps if p not in (t, v))) for k, (t, v) in enumerate(pairing)]
    check_folds(folds, ps)
    return folds


def check_folds(folds, participants) -> None:
    ps = set(participants)
    seen = []
    for f in folds:
        if f.test == f.validation:
            raise InvalidConfiguration(f"fold {f.index}: test and validation are both {f.test}")
        if set(f.held_out) & set(f.training):
            raise InvalidConfiguration(f"fold {f.index}: held-out participant in training set")
        if set(f.training) != ps - set(f.held_out):
            raise InvalidConfiguration(f"fold {f.index}: training set must be all remaining participants")
        seen.extend(f.held_out)
    if sorted(seen) != sorted(ps):
        missing = sorted(ps - set(seen))
        dup = sorted({p for p in seen if seen.count(p) > 1})
        raise InvalidConfiguration(f"fold coverage violated (missing {missing}, repeated {dup})")


# ---------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    lr: float = 5e-5
    lr_schedule: str = "constant"   # or "cosine": anneal to 0 over max_steps
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    eval_every: int = 500
    patience: int = 8
    max_steps: int = 50_000
    pair_budget: int = 20_000
    swap: bool = True
    eval_stride: int = 1     # frame subsampling for periodic (not final) evaluation
    symmetric_eval: bool = False   # average f(ref, test) with -f(test, ref) at inference
    seed: int = 0

    def validate(self) -> None:
        self.network.validate()
        for name in ("batch_size", "eval_every", "max_steps", "pair_budget", "eval_stride"):
            if getattr(self, name) < 1:
                raise InvalidConfiguration(f"{name} must be >= 1")
        if self.patience < 0:
            raise InvalidConfiguration("patience must be >= 0")
        if not self.lr > 0:
            raise InvalidConfiguration("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidConfiguration(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that follows ``step`` completed steps."""
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + np.cos(np.pi * step / self.max_steps))
        return self.lr


# ---------------------------------------------------------------- conditioned data


class Conditioned:
    """LCN-normalized region stacks per trial, computed once and cached."""

    def __init__(self, dataset: Dataset, window: int = 31):
        self.dataset = dataset
        self.window = window
        self._cache = {}

    def get(self, trial: Trial):
        key = (trial.participant, trial.name)
        if key not in self._cache:
            self._cache[key] = tuple(
                np.stack([lcn(im, self.window) for im in stack]).astype(np.float32)
                for stack in (trial.gm, trial.so))
        return self._cache[key]


def _trials(dataset: Dataset, participants):
    out = []
    for p in participants:
        if p not in dataset.trials:
            raise InvalidConfiguration(f"dataset has no participant {p!r}")
        out.extend(dataset.of(p))
    return out


@dataclass
class TrialPrediction:
    participant: str
    trial: str
    frames: np.ndarray
    truth: np.ndarray     # (N, 4) absolute labels
    pred: np.ndarray      # (N, 4) absolute estimates


def pair_output(params: ModelParams, gm, so, ref: int, test: int, symmetric: bool = False) -> np.ndarray:
    """Normalized difference estimate for one (ref, test) pair of conditioned stacks.

    The symmetric form is antisymmetric by construction, so the self-pair gives
    exactly zero; the plain form defines the self-pair as zero."""
    if ref == test:
        return np.zeros(4)
    out = np.asarray(forward(gm[[ref, test]], so[[ref, test]], params), dtype=np.float64)
    if symmetric:
        back = np.asarray(forward(gm[[test, ref]], so[[test, ref]], params), dtype=np.float64)
        out = (out - back) / 2
    return out


def predict_trial(params: ModelParams, trial: Trial, cond: Conditioned, ref_index: int = 0,
                  stride: int = 1, symmetric: bool = False) -> TrialPrediction:
    """Canonical-pair predictions: the reference frame paired with every frame."""
    gm, so = cond.get(trial)
    idx = np.arange(0, len(trial), stride)
    ref = trial.labels[ref_index]
    preds = np.empty((len(idx), 4))
    for k, t in enumerate(idx):
        preds[k] = ref + pair_output(params, gm, so, ref_index, int(t), symmetric) * params.label_std
    return TrialPrediction(trial.participant, trial.name, trial.frames[idx], trial.labels[idx].copy(), preds)


def monitored_error(params: ModelParams, trials, cond: Conditioned, stride: int = 1,
                    symmetric: bool = False) -> float:
    """Mean normalized MAE over the 4 signals on canonical pairs."""
    errs = []
    for tr in trials:
        p = predict_trial(params, tr, cond, stride=stride, symmetric=symmetric)
        errs.append(np.abs(p.pred - p.truth) / params.label_std)
    return float(np.concatenate(errs).mean())


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class EvalRow:
    participant: str
    signal: str
    mae: float
    accuracy: float
    samples: int


@dataclass
class EvalReport:
    rows: list

    @classmethod
    def from_predictions(cls, preds, tasks=None) -> "EvalReport":
        """Per participant x signal rows; ``tasks`` maps signal -> allowed trial names."""
        rows = []
        for p in sorted({x.participant for x in preds}):
            for s, sig in enumerate(SIGNALS):
                allowed = None if tasks is None else tasks.get(sig)
                sel = [x for x in preds if x.participant == p and (allowed is None or x.trial in allowed)]
                if not sel:
                    continue
                est = np.concatenate([x.pred[:, s] for x in sel])
                tru = np.concatenate([x.truth[:, s] for x in sel])
                rows.append(EvalRow(p, sig, mae(est, tru), accuracy(est, tru), len(est)))
        return cls(rows)

    def participants(self) -> list:
        return sorted({r.participant for r in self.rows})

    def aggregate(self) -> dict:
        out = {}
        for sig in SIGNALS:
            rs = [r for r in self.rows if r.signal == sig]
            if not rs:
                continue
            agg = {"samples": int(sum(r.samples for r in rs)), "participants": len(rs)}
            for key in ("mae", "accuracy"):
                v = np.array([getattr(r, key) for r in rs])
                agg[key] = {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v)),
                            "min": float(v.min()), "max": float(v.max())}
            out[sig] = agg
        return out

    def summary_table(self) -> str:
        lines = ["signal\tmae_mean\tmae_std\taccuracy_mean\taccuracy_std\taccuracy_median\t"
                 "accuracy_min\taccuracy_max\tsamples"]
        for sig, a in self.aggregate().items():
            m, acc = a["mae"], a["accuracy"]
            lines.append(f"{sig}\t{m['mean']:.6g}\t{m['std']:.6g}\t{acc['mean']:.6g}\t{acc['std']:.6g}\t"
                         f"{acc['median']:.6g}\t{acc['min']:.6g}\t{acc['max']:.6g}\t{a['samples']}")
        return "\n".join(lines) + "\n"

    def detail_table(self) -> str:
        lines = ["participant\tsignal\tmae\taccuracy\tsamples"]
        for r in self.rows:
            lines.append(f"{r.participant}\t{r.signal}\t{r.mae:.6g}\t{r.accuracy:.6g}\t{r.samples}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- training


@dataclass
class FoldResult:
    fold: Fold
    test_model: ModelParams        # lowest validation error; predicts the test participant
    validation_model: ModelParams  # lowest test error; predicts the validation participant
    final_params: ModelParams
    normalizer: Normalizer
    predictions: list
    report: EvalReport
    history: list                  # (step, train loss, validation error, test error)
    steps: int
    touched: set


def training_pairs(trials, budget: int, swap: bool, rng) -> list:
    """(trial index, ref, test) triples; the budget counts pairs after swap-doubling."""
    per = max(1, budget // (len(trials) * (2 if swap else 1)))
    out = []
    for k, tr in enumerate(trials):
        idx = pair_indices(len(tr), "sampled", per, swap, rng)
        out.extend((k, int(r), int(t)) for r, t in idx)
    return out


def _seeds(seed: int, fold_index: int):
    ss = np.random.SeedSequence([seed, fold_index])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def train_model(config: TrainConfig, train_trials, cond: Conditioned, monitor=None,
                on_step=None, fold_index: int = 0, training_ids=None, pairs=None):
    """Core loop. ``monitor(params) -> errors tuple`` runs every ``eval_every``
    steps and drives early stopping on all returned streams. ``pairs`` fixes the
    (trial index, ref, test) training set instead of sampling it."""
    config.validate()
    rng_init, rng_pairs, rng_aug, rng_drop = _seeds(config.seed, fold_index)
    if pairs is None:
        pairs = training_pairs(train_trials, config.pair_budget, config.swap, rng_pairs)
    elif len(pairs) == 0:
        raise InvalidArgument("explicit training pair list is empty")
    diffs = np.array([train_trials[k].labels[t] - train_trials[k].labels[r] for k, r, t in pairs])
    norm = Normalizer.fit(diffs)
    params = build_network(config.network, rng_init)
    params.label_std = norm.std.copy()
    states = {k: T.AdamState.zeros_like(v) for k, v in params.named_arrays().items()}
    allowed = set(training_ids) if training_ids is not None else None

    touched = set()
    history = []
    best = {}
    stopper = None
    order = np.empty(0, dtype=np.int64)
    pos = 0
    step = 0
    run_loss = 0.0
    while step < config.max_steps:
        grads = zero_grads(params)
        batch_loss = 0.0
        for _ in range(config.batch_size):
            if pos >= len(order):
                order = rng_pairs.permutation(len(pairs))
                pos = 0
            k, r, t = pairs[order[pos]]
            pos += 1
            tr = train_trials[k]
            if allowed is not None and tr.participant not in allowed:
                raise InvalidState(f"participant {tr.participant} is not in the training set")
            touched.add(tr.participant)
            gm, so = cond.get(tr)
            gm_pair, so_pair = augment_conditioned(gm[[r, t]], so[[r, t]], config.augment, rng_aug, "train")
            label = norm.apply(tr.labels[t] - tr.labels[r])
            out, cache = forward(gm_pair, so_pair, params, "train", rng_drop)
            loss, g = loss_mae(out, label)
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite loss at step {step} (fold {fold_index}, "
                                     f"participant {tr.participant}, trial {tr.name}, pair {r}->{t})")
            batch_loss += loss
            backward_gated(cache, g / config.batch_size, params, grads)
        lr = config.lr_at(step)
        for name, arr in params.named_arrays().items():
            T.adam_step(arr, grads[name], states[name], lr, config.beta1, config.beta2, config.eps)
        params.head.weights *= params.mask
        step += 1
        batch_loss /= config.batch_size
        run_loss = batch_loss if step == 1 else 0.98 * run_loss + 0.02 * batch_loss
        if not all(np.all(np.isfinite(a)) for a in params.named_arrays().values()):
            raise NumericFailure(f"non-finite parameters after step {step} (fold {fold_index})")
        if on_step is not None:
            on_step(step, batch_loss, params)
        if monitor is not None and step % config.eval_every == 0:
            errs = tuple(monitor(params))
            history.append((step, run_loss, *errs))
            log.info("fold %d step %d loss %.4f errors %s", fold_index, step, run_loss, errs)
            if stopper is None:
                stopper = EarlyStopper(config.patience, len(errs))
            before = list(stopper.best_index)
            stop = stopper.update(*errs)
            for s, (b0, b1) in enumerate(zip(before, stopper.best_index)):
                if b1 != b0:
                    best[s] = params.copy()
            if stop:
                break
    return params, norm, history, best, step, touched


def run_fold(fold: Fold, dataset: Dataset, config: TrainConfig) -> FoldResult:
    """Train on ``fold.training``; the validation stream selects the model that
    predicts the test participant and vice versa."""
    if set(fold.held_out) & set(fold.training):
        raise InvalidConfiguration("held-out participant in training set")
    train_trials = _trials(dataset, fold.training)
    val_trials = _trials(dataset, [fold.validation])
    test_trials = _trials(dataset, [fold.test])
    cond = Conditioned(dataset, config.augment.lcn_window)

    def monitor(params):
        return (monitored_error(params, val_trials, cond, config.eval_stride, config.symmetric_eval),
                monitored_error(params, test_trials, cond, config.eval_stride, config.symmetric_eval))

    final, norm, history, best, steps, touched = train_model(
        config, train_trials, cond, monitor, fold_index=fold.index, training_ids=fold.training)
    leaked = touched & set(fold.held_out)
    if leaked:
        raise InvalidState(f"held-out participants used in weight updates: {sorted(leaked)}")
    test_model = best.get(0, final)
    val_model = best.get(1, final)
    sym = config.symmetric_eval
    preds = [predict_trial(test_model, tr, cond, symmetric=sym) for tr in test_trials]
    preds += [predict_trial(val_model, tr, cond, symmetric=sym) for tr in val_trials]
    return FoldResult(fold, test_model, val_model, final, norm, preds,
                      EvalReport.from_predictions(preds), history, steps, touched)


def select_checkpoints(val_errors, test_errors):
    """(checkpoint for test predictions, checkpoint for validation predictions)."""
    return int(np.argmin(val_errors)), int(np.argmin(test_errors))


@dataclass
class CVResult:
    report: EvalReport
    folds: list

    @property
    def predictions(self) -> list:
        return [p for f in self.folds for p in f.predictions]


def run_cv(dataset: Dataset, folds, config: TrainConfig, on_fold=None) -> CVResult:
    check_folds(folds, dataset.participants)
    results = []
    for f in folds:
        res = run_fold(f, dataset, config)
        results.append(res)
        if on_fold is not None:
            on_fold(res)
    preds = [p for r in results for p in r.predictions]
    report = EvalReport.from_predictions(preds)
    if sorted(report.participants()) != sorted(dataset.participants):
        raise InvalidState("cross-validation did not report every participant exactly once")
    return CVResult(report, results)
