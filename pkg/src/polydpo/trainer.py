"""Pretraining, winner-only SFT and Diffusion-DPO / Poly-DPO training loops."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .checkpoint import atomic_write_text
from .data import PreferenceDataset, PreferencePair, Task
from .denoiser import Adam, Denoiser, DenoiserSpec
from .diffusion import dm_loss, draw_noise, forward_corrupt, loss_weights
from .losses import DomainError, dpo_gradient, dpo_loss, poly_dpo_gradient, poly_dpo_loss, preference_probability
from .rng import derive_rng
from .schedule import NoiseSchedule

SFT_MODES = ("winner-only", "winner-and-loser", "none")
LOSS_KINDS = ("poly-dpo", "diffusion-dpo")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``snapshot`` holds the offending step's state."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class ReferenceMutated(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    beta: float = 500.0
    alpha: float = 0.0
    learning_rate: float = 1e-3
    n_steps: int = 500
    batch_size: int = 64
    seed: int = 0
    schedule: str = "cosine"
    weight_mode: str = "constant"
    weight: float = 1.0
    sft_mode: str = "winner-only"
    loss: str = "poly-dpo"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.n_steps < 1 or self.batch_size < 1:
            raise ValueError("n_steps and batch_size must be >= 1")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.sft_mode not in SFT_MODES:
            raise ValueError(f"sft_mode must be one of {SFT_MODES}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.weight_mode not in ("constant", "schedule"):
            raise ValueError("weight_mode must be 'constant' or 'schedule'")

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule)

    def with_(self, **kw) -> "TrainerConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class LossBreakdown:
    total_loss: float
    mean_logit: float
    mean_preference_prob: float
    mean_implicit_acc: float
    gradient_norm: float


METRIC_FIELDS = ("step",) + tuple(f.name for f in fields(LossBreakdown))


class FrozenReference:
    """Read-only view of a deep copy of the reference network.

    Only ``predict`` is exposed, the parameter buffers are flagged
    non-writeable, and ``verify`` compares against the checksum taken at
    construction time.
    """

    def __init__(self, model: Denoiser):
        self._model = model.copy()
        for p in self._model.params:
            p.flags.writeable = False
        self.checksum = self._model.checksum()

    @property
    def spec(self) -> DenoiserSpec:
        return self._model.spec

    def predict(self, x_t, c, t) -> np.ndarray:
        return self._model.predict(x_t, c, t)

    def verify(self) -> None:
        if self._model.checksum() != self.checksum:
            raise ReferenceMutated("reference parameters changed during training")

    def clone_params(self) -> Denoiser:
        return self._model.copy()


def _as_reference(reference) -> FrozenReference:
    return reference if isinstance(reference, FrozenReference) else FrozenReference(reference)


def _squared_errors(pred: np.ndarray, eps: np.ndarray) -> np.ndarray:
    d = pred - eps
    return np.sum(d * d, axis=1)


def batch_logits(policy: Denoiser, reference, cond, x_w, x_l, t, eps, cfg: TrainerConfig, schedule: NoiseSchedule | None = None, with_cache: bool = False):
    """Diffusion-DPO logits for a batch with one shared (t, eps) per pair.

    ``logit = -beta * w * ((e_pol(w) - e_ref(w)) - (e_pol(l) - e_ref(l)))``
    where ``e`` is the squared noise-prediction error.
    """
    schedule = schedule or cfg.noise_schedule()
    x_w = np.asarray(x_w, dtype=np.float64)
    x_l = np.asarray(x_l, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_w.shape != x_l.shape or x_w.shape != eps.shape:
        raise ValueError(f"dimension mismatch: winner {x_w.shape}, loser {x_l.shape}, eps {eps.shape}")
    b = x_w.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    cond = np.broadcast_to(np.asarray(cond), (b,))
    t2 = np.concatenate([t, t])
    c2 = np.concatenate([cond, cond])
    eps2 = np.concatenate([eps, eps])
    x_t = forward_corrupt(np.concatenate([x_w, x_l]), t2, eps2, schedule)
    pred, cache = policy.forward(x_t, c2, t2)
    pred_ref = reference.predict(x_t, c2, t2)
    e_pol = _squared_errors(pred, eps2)
    e_ref = _squared_errors(pred_ref, eps2)
    w = loss_weights(schedule, t, cfg.weight_mode, cfg.weight)
    logit = -cfg.beta * w * ((e_pol[:b] - e_ref[:b]) - (e_pol[b:] - e_ref[b:]))
    if not with_cache:
        return logit
    return logit, (cache, pred, eps2, w)


def dpo_logit(policy: Denoiser, reference, pair: PreferencePair, t: float, eps, cfg: TrainerConfig) -> float:
    """Logit of a single pair at a given ``(t, eps)``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != pair.winner.shape:
        raise ValueError("eps must match the sample dimension")
    out = batch_logits(policy, reference, [pair.condition], pair.winner[None], pair.loser[None], [t], eps[None], cfg)
    return float(out[0])


def preference_loss_and_grads(policy: Denoiser, reference, cond, x_w, x_l, t, eps, cfg: TrainerConfig, schedule=None):
    """Mean preference loss over the batch, its policy gradients and the logits."""
    logit, (cache, pred, eps2, w) = batch_logits(policy, reference, cond, x_w, x_l, t, eps, cfg, schedule, with_cache=True)
    b = logit.shape[0]
    if cfg.loss == "diffusion-dpo":
        losses = dpo_loss(logit)
        dl = dpo_gradient(logit)
    else:
        losses = poly_dpo_loss(logit, cfg.alpha)
        dl = poly_dpo_gradient(logit, cfg.alpha)
    loss = float(np.mean(losses))
    coef = (dl / b) * (2.0 * cfg.beta) * w
    grad_out = np.concatenate([-coef[:, None] * (pred[:b] - eps2[:b]), coef[:, None] * (pred[b:] - eps2[b:])])
    grads = policy.backward(cache, grad_out)
    return loss, grads, logit


def preference_step(
    policy: Denoiser,
    reference,
    batch: PreferenceDataset | tuple,
    cfg: TrainerConfig,
    step_index: int,
    optimizer: Adam | None = None,
    schedule: NoiseSchedule | None = None,
) -> LossBreakdown:
    """One optimizer step of mean Poly-DPO loss; updates ``policy`` in place.

    ``batch`` is a dataset (or ``(cond, winner, loser)`` arrays). The
    per-pair ``(t, eps)`` stream is derived from ``(cfg.seed, step_index)``.
    """
    reference = _as_reference(reference)
    if isinstance(batch, PreferenceDataset):
        cond, x_w, x_l = batch.condition, batch.winner, batch.loser
    else:
        cond, x_w, x_l = batch
    rng = derive_rng(cfg.seed, "preference_step", step_index)
    t, eps = draw_noise(rng, len(cond), x_w.shape[1])

    def diverged(loss, gnorm, logit):
        return TrainingDiverged(
            f"non-finite loss at step {step_index}",
            {"step": step_index, "loss": loss, "gradient_norm": gnorm, "logits": np.array(logit, copy=True), "params": [p.copy() for p in policy.params]},
        )

    try:
        loss, grads, logit = preference_loss_and_grads(policy, reference, cond, x_w, x_l, t, eps, cfg, schedule)
    except DomainError:
        logit = batch_logits(policy, reference, cond, x_w, x_l, t, eps, cfg, schedule)
        raise diverged(math.nan, math.nan, logit) from None
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not (math.isfinite(loss) and math.isfinite(gnorm)):
        raise diverged(loss, gnorm, logit)
    if optimizer is None:
        optimizer = Adam(policy.params, cfg.learning_rate)
    optimizer.step(policy.params, grads)
    p = preference_probability(logit)
    return LossBreakdown(
        total_loss=loss,
        mean_logit=float(np.mean(logit)),
        mean_preference_prob=float(np.mean(p)),
        mean_implicit_acc=float(np.mean(logit > 0)),
        gradient_norm=gnorm,
    )


def epoch_batches(n: int, batch_size: int, seed: int, component: str):
    """Endless stream of index batches: seeded shuffle per epoch, last partial batch dropped."""
    bs = min(batch_size, n)
    epoch = 0
    while True:
        order = derive_rng(seed, component, epoch).permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield order[start : start + bs]
        epoch += 1


def train_run(ds: PreferenceDataset, cfg: TrainerConfig, init: Denoiser, schedule: NoiseSchedule | None = None):
    """Preference-train a copy of ``init`` against a frozen copy of ``init``.

    Returns ``(policy, history)``; raises :class:`ReferenceMutated` if the
    reference changed.
    """
    schedule = schedule or cfg.noise_schedule()
    reference = FrozenReference(init)
    policy = init.copy()
    opt = Adam(policy.params, cfg.learning_rate)
    batches = epoch_batches(len(ds), cfg.batch_size, cfg.seed, "train_batches")
    history = []
    for step in range(cfg.n_steps):
        idx = next(batches)
        history.append(
            preference_step(policy, reference, (ds.condition[idx], ds.winner[idx], ds.loser[idx]), cfg, step, opt, schedule)
        )
    reference.verify()
    return policy, history


@dataclass(frozen=True)
class SFTRecord:
    step: int
    loss: float
    samples: int


def sft_run(model: Denoiser, ds: PreferenceDataset, cfg: TrainerConfig, schedule: NoiseSchedule | None = None):
    """Diffusion-loss fine-tuning on winners (optionally winners and losers).

    Returns ``(model_copy, history)``; the input model is left untouched.
    """
    if cfg.sft_mode == "none":
        raise ValueError("sft_run needs sft_mode other than 'none'")
    schedule = schedule or cfg.noise_schedule()
    model = model.copy()
    opt = Adam(model.params, cfg.learning_rate)
    batches = epoch_batches(len(ds), cfg.batch_size, cfg.seed, "sft_batches")
    history = []
    for step in range(cfg.n_steps):
        idx = next(batches)
        x, c = ds.winner[idx], ds.condition[idx]
        if cfg.sft_mode == "winner-and-loser":
            x = np.concatenate([x, ds.loser[idx]])
            c = np.concatenate([c, c])
        loss, grads = dm_loss(model, x, c, derive_rng(cfg.seed, "sft_step", step), schedule, cfg.weight_mode, cfg.weight)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite SFT loss at step {step}", {"step": step, "loss": loss})
        opt.step(model.params, grads)
        history.append(SFTRecord(step, loss, int(x.shape[0])))
    return model, history


def pretrain_run(task: Task, spec: DenoiserSpec, cfg: TrainerConfig, schedule: NoiseSchedule | None = None):
    """Train a fresh denoiser on the task's base generator (the 'base model')."""
    schedule = schedule or cfg.noise_schedule()
    model = Denoiser.init(spec, derive_rng(cfg.seed, "init"))
    opt = Adam(model.params, cfg.learning_rate)
    history = []
    for step in range(cfg.n_steps):
        rng = derive_rng(cfg.seed, "pretrain_step", step)
        c = rng.integers(task.n_conditions, size=cfg.batch_size)
        x = task.sample_base(rng, c)
        loss, grads = dm_loss(model, x, c, rng, schedule, cfg.weight_mode, cfg.weight)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite pretraining loss at step {step}", {"step": step, "loss": loss})
        opt.step(model.params, grads)
        history.append(SFTRecord(step, loss, int(x.shape[0])))
    return model, history


def heldout_dm_loss(model: Denoiser, x, c, seed: int, schedule: NoiseSchedule, n_repeats: int = 8, cfg: TrainerConfig | None = None) -> float:
    """Diffusion loss on fixed data averaged over ``n_repeats`` fixed noise draws."""
    cfg = cfg or TrainerConfig()
    x = np.asarray(x, dtype=np.float64)
    xs = np.concatenate([x] * n_repeats)
    cs = np.concatenate([np.asarray(c)] * n_repeats)
    loss, _ = dm_loss(model, xs, cs, derive_rng(seed, "heldout"), schedule, cfg.weight_mode, cfg.weight, with_grad=False)
    return loss


# -- metrics files -----------------------------------------------------------


def metrics_to_csv(history) -> str:
    buf = io.StringIO()
    if history and isinstance(history[0], SFTRecord):
        buf.write("step,loss,samples\n")
        for r in history:
            buf.write(f"{r.step},{r.loss!r},{r.samples}\n")
        return buf.getvalue()
    buf.write(",".join(METRIC_FIELDS) + "\n")
    for step, rec in enumerate(history):
        d = asdict(rec)
        buf.write(",".join([str(step)] + [repr(float(d[k])) for k in METRIC_FIELDS[1:]]) + "\n")
    return buf.getvalue()


def save_metrics(path, history) -> None:
    atomic_write_text(path, metrics_to_csv(history))


def read_metrics(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
