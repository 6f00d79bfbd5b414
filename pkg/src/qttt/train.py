"""Multi-task training, test-time training (batch and online), and the
first-order probe of the one-step-descent property.

Training minimizes the sigma-weighted sum of the two branch losses with Adam
over all segments; gradients come from the batched shift-rule/FD machinery in
`grad`.  TTT re-optimizes only (theta_L, theta_E, theta_D) on the unlabeled
test features' QAE loss; (theta_M, alpha, sigma) are never touched.  Batch
TTT returns the best iterate of its trace, so its final QAE loss can never
exceed the starting one; online TTT adapts each arriving sample from the
trained parameters, predicts with the final iterate, then discards the
adaptation.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .circuits import NoiseSpec, QtttParams
from .data import Dataset
from .grad import ae_grad_batch, mt_grad_batch, total_grad_batch
from .model import batch_fidelities, batch_qae_losses, evaluate_batch, main_task_loss_from_fid

TTT_UPDATE_SEGMENTS = ("theta_L", "theta_E", "theta_D")
TTT_FROZEN_SEGMENTS = ("theta_M", "alpha", "sigma")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    tol: float = 1e-12           # early-stop threshold on epoch-loss change
    frozen_segments: tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 0 or self.batch_size == 0:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if min(self.learning_rate, self.beta1, self.beta2, self.adam_eps, self.tol) <= 0:
            raise ValueError("learning rate, betas, eps and tol must be positive")


@dataclass(frozen=True)
class TttConfig:
    mode: str = "batch"          # batch | online
    epochs: int = 10
    learning_rate: float = 0.1
    optimizer: str = "sgd"       # sgd (plain gradient descent) | adam
    update_segments: tuple[str, ...] = TTT_UPDATE_SEGMENTS

    def __post_init__(self):
        if self.mode not in ("batch", "online"):
            raise ValueError(f"unknown TTT mode {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown TTT optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning rate positive")
        illegal = set(self.update_segments) & set(TTT_FROZEN_SEGMENTS)
        if illegal:
            raise ValueError(f"TTT must not update {sorted(illegal)}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(
    values: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One Adam update; pure in (values, grads, state)."""
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergedError("non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads**2
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new_values = values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_values, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# multi-task training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_total: float
    l_mt: float
    l_ae: float
    sigma_mt: float
    sigma_ae: float
    train_acc: float
    test_acc: float


HISTORY_COLUMNS = (
    "epoch",
    "l_total",
    "l_mt",
    "l_ae",
    "sigma_mt",
    "sigma_ae",
    "train_acc",
    "test_acc",
)


def history_to_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for r in history:
        buf.write(
            f"{r.epoch},{r.l_total!r},{r.l_mt!r},{r.l_ae!r},"
            f"{r.sigma_mt!r},{r.sigma_ae!r},{r.train_acc!r},{r.test_acc!r}\n"
        )
    return buf.getvalue()


def fit(
    dataset: Dataset, arch, config: TrainConfig
) -> tuple[QtttParams, list[EpochRecord]]:
    """Minimize the mean multi-task loss on the train split (always noise-free)."""
    params = QtttParams.init(arch, config.seed)
    state = AdamState.zeros(params.values.size)
    rng = np.random.default_rng(config.seed)
    x_train, y_train = dataset.train_features, dataset.train_labels
    history: list[EpochRecord] = []
    prev_total, still = None, 0
    for epoch in range(config.epochs):
        order = rng.permutation(x_train.shape[0])
        for lo in range(0, order.size, config.batch_size):
            sel = order[lo : lo + config.batch_size]
            grad, metrics = total_grad_batch(
                x_train[sel], y_train[sel], params, None, config.frozen_segments
            )
            if not np.isfinite(metrics["l_total"]):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch} (l_mt={metrics['l_mt']},"
                    f" l_ae={metrics['l_ae']})"
                )
            new_values, state = optimizer_step(
                params.values, grad, state, config.learning_rate, config.beta1,
                config.beta2, config.adam_eps,
            )
            params = QtttParams(arch, new_values)
        history.append(_epoch_record(epoch, dataset, params))
        total = history[-1].l_total
        if prev_total is not None and abs(prev_total - total) < config.tol:
            still += 1
            if still >= 3:
                break
        else:
            still = 0
        prev_total = total
    if not history:  # zero epochs: record the initial point
        history.append(_epoch_record(0, dataset, params))
    return params, history


def fit_single_task(
    dataset: Dataset,
    start: QtttParams,
    config: TrainConfig,
    task: str,
) -> tuple[QtttParams, list[EpochRecord]]:
    """Minimize one branch loss alone (no sigma weighting), from given params.

    task "mt" trains (theta_L, theta_E, theta_M, alpha) on the raw main-task
    loss; task "ae" trains (theta_L, theta_E, theta_D) on the QAE loss.
    frozen_segments further restricts either set.  This is the training mode
    of the no-multi-task ablation: the main branch first, then the decoder
    with the shared segments frozen.
    """
    if task not in ("mt", "ae"):
        raise ValueError(f"unknown task {task!r}")
    frozen = set(config.frozen_segments)
    if task == "mt":
        segs = tuple(s for s in ("theta_L", "theta_E", "theta_M") if s not in frozen)
    else:
        segs = tuple(s for s in ("theta_L", "theta_E", "theta_D") if s not in frozen)
    params = start.copy()
    state = AdamState.zeros(params.values.size)
    rng = np.random.default_rng(config.seed)
    x_train, y_train = dataset.train_features, dataset.train_labels
    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        order = rng.permutation(x_train.shape[0])
        for lo in range(0, order.size, config.batch_size):
            sel = order[lo : lo + config.batch_size]
            if task == "mt":
                g, f_base, l_mt = mt_grad_batch(
                    x_train[sel], y_train[sel], params, None, segs
                )
                grad = np.mean(g, axis=0)
                if "alpha" not in frozen:
                    resid = params.alpha[None] * f_base - y_train[sel][:, :, None]
                    grad[params.seg_slice("alpha")] = np.mean(
                        resid * f_base, axis=0
                    ).ravel()
                loss = float(np.mean(l_mt))
            else:
                g, l_ae = ae_grad_batch(x_train[sel], params, None, segs)
                grad = np.mean(g, axis=0)
                loss = float(np.mean(l_ae))
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"{task} loss became non-finite at epoch {epoch}")
            values, state = optimizer_step(
                params.values, grad, state, config.learning_rate, config.beta1,
                config.beta2, config.adam_eps,
            )
            params = QtttParams(params.arch, values)
        history.append(_epoch_record(epoch, dataset, params))
    if not history:
        history.append(_epoch_record(0, dataset, params))
    return params, history


def _epoch_record(epoch: int, dataset: Dataset, params: QtttParams) -> EpochRecord:
    tr = evaluate_batch(dataset.train_features, dataset.train_labels, params)
    te = evaluate_batch(dataset.test_features, dataset.test_labels, params)
    sig_mt, sig_ae = params.sigma
    return EpochRecord(
        epoch=epoch,
        l_total=tr.l_total,
        l_mt=tr.l_mt,
        l_ae=tr.l_ae,
        sigma_mt=float(sig_mt),
        sigma_ae=float(sig_ae),
        train_acc=tr.accuracy,
        test_acc=te.accuracy,
    )


# ---------------------------------------------------------------------------
# test-time training
# ---------------------------------------------------------------------------

@dataclass
class TttResult:
    params: QtttParams
    trace: np.ndarray            # mean QAE loss per iterate, trace[0] = before
    reverted: bool = False
    snapshots: list[np.ndarray] | None = None   # per-iterate values, when kept

    @property
    def l_ae_before(self) -> float:
        return float(self.trace[0])

    @property
    def l_ae_after(self) -> float:
        return float(np.min(self.trace))


def ttt_batch(
    params_star: QtttParams,
    test_features: np.ndarray,
    noise: NoiseSpec | None,
    config: TttConfig,
    keep_snapshots: bool = False,
) -> TttResult:
    """Adapt the shared segments on the test set's QAE loss; labels never enter.

    Keeps the best iterate of the trace (the starting parameters are a
    candidate), so the returned QAE loss never exceeds the initial one.
    """
    arch = params_star.arch
    values = params_star.values.copy()
    state = AdamState.zeros(values.size)
    snapshots = [values.copy()]
    losses = []
    for _ in range(config.epochs):
        grads, l_base = ae_grad_batch(
            test_features, QtttParams(arch, values), noise, config.update_segments
        )
        losses.append(float(np.mean(l_base)))
        if not np.all(np.isfinite(grads)) or not np.isfinite(losses[-1]):
            return TttResult(params_star.copy(), np.array(losses[:1] or [np.nan]), True)
        g = np.mean(grads, axis=0)
        if config.optimizer == "sgd":
            values = values - config.learning_rate * g
        else:
            values, state = optimizer_step(values, g, state, config.learning_rate)
        snapshots.append(values.copy())
    final = QtttParams(arch, snapshots[-1])
    losses.append(float(np.mean(batch_qae_losses(test_features, final, noise))))
    trace = np.array(losses)
    best = QtttParams(arch, snapshots[int(np.argmin(trace))])
    return TttResult(best, trace, snapshots=snapshots if keep_snapshots else None)


@dataclass(frozen=True)
class OnlineRecord:
    prediction: int
    l_ae_before: float
    l_ae_after: float


def ttt_online(
    params_star: QtttParams,
    test_features: np.ndarray,
    noise: NoiseSpec | None,
    config: TttConfig,
) -> list[OnlineRecord]:
    """One-sample learning: adapt on each arriving sample alone, predict,
    discard the adaptation before the next sample."""
    arch = params_star.arch
    out = []
    for x in np.asarray(test_features, dtype=np.float64):
        values = params_star.values.copy()
        state = AdamState.zeros(values.size)
        l_before = None
        diverged = False
        for _ in range(config.epochs):
            grads, l_base = ae_grad_batch(
                x[None], QtttParams(arch, values), noise, config.update_segments
            )
            if l_before is None:
                l_before = float(l_base[0])
            if not np.all(np.isfinite(grads)):
                values, diverged = params_star.values.copy(), True
                break
            if config.optimizer == "sgd":
                values = values - config.learning_rate * grads[0]
            else:
                values, state = optimizer_step(values, grads[0], state, config.learning_rate)
        adapted = QtttParams(arch, values)
        l_after = float(batch_qae_losses(x[None], adapted, noise)[0])
        if l_before is None:  # zero TTT epochs
            l_before = l_after
        if diverged:
            l_after = l_before
        f = batch_fidelities(x[None], adapted, noise)[0]
        pred = int(np.argmax(np.sum(adapted.alpha * f, axis=1)))
        out.append(OnlineRecord(pred, l_before, l_after))
    return out


# ---------------------------------------------------------------------------
# first-order descent probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TheoremProbeReport:
    inner_product: float
    grad_mt_norm: float
    grad_ae_norm: float
    l_mt_before: float
    etas: tuple[float, ...]
    l_mt_after: tuple[float, ...]
    deltas: tuple[float, ...]
    directional_estimates: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "inner_product": self.inner_product,
            "grad_mt_norm": self.grad_mt_norm,
            "grad_ae_norm": self.grad_ae_norm,
            "l_mt_before": self.l_mt_before,
            "etas": list(self.etas),
            "l_mt_after": list(self.l_mt_after),
            "deltas": list(self.deltas),
            "directional_estimates": list(self.directional_estimates),
        }


def shared_segment_grads(
    params: QtttParams, x: np.ndarray, y: np.ndarray, noise: NoiseSpec | None
) -> tuple[np.ndarray, np.ndarray]:
    """Full-length gradients of l_MT and l_AE over the shared (theta_L, theta_E)."""
    X = np.asarray(x, dtype=np.float64)[None]
    Y = np.asarray(y, dtype=np.float64)[None]
    g_mt, _, _ = mt_grad_batch(X, Y, params, noise, ("theta_L", "theta_E"))
    g_ae, _ = ae_grad_batch(X, params, noise, ("theta_L", "theta_E"))
    return g_mt[0], g_ae[0]


def theorem_probe(
    params: QtttParams,
    x: np.ndarray,
    y: np.ndarray,
    noise: NoiseSpec | None = None,
    eta_grid: tuple[float, ...] | None = None,
    eta_scale: float = 0.02,
) -> TheoremProbeReport:
    """Measure d l_MT along a TTT step theta_LE - eta * grad l_AE.

    As eta -> 0 the ratio delta(l_MT)/eta approaches minus the inner product
    of the two shared-segment gradients.  The default grid scales eta with
    eta_scale * |inner| / |grad l_AE|^2 and halves it twice.
    """
    g_mt, g_ae = shared_segment_grads(params, x, y, noise)
    inner = float(g_mt @ g_ae)
    ae_sq = float(g_ae @ g_ae)
    if eta_grid is None:
        eta0 = eta_scale * abs(inner) / ae_sq if ae_sq > 1e-18 and inner != 0 else 1e-4
        eta0 = min(eta0, 0.1)
        eta_grid = (eta0, eta0 / 2, eta0 / 4)
    X = np.asarray(x, dtype=np.float64)[None]
    y = np.asarray(y, dtype=np.float64)
    f0 = batch_fidelities(X, params, noise)[0]
    l0 = main_task_loss_from_fid(f0, y, params.alpha)
    after, deltas, estimates = [], [], []
    for eta in eta_grid:
        stepped = QtttParams(params.arch, params.values - eta * g_ae)
        f = batch_fidelities(X, stepped, noise)[0]
        l1 = main_task_loss_from_fid(f, y, stepped.alpha)
        after.append(l1)
        deltas.append(l1 - l0)
        estimates.append((l1 - l0) / eta if eta > 0 else np.nan)
    return TheoremProbeReport(
        inner_product=inner,
        grad_mt_norm=float(np.linalg.norm(g_mt)),
        grad_ae_norm=float(np.linalg.norm(g_ae)),
        l_mt_before=l0,
        etas=tuple(eta_grid),
        l_mt_after=tuple(after),
        deltas=tuple(deltas),
        directional_estimates=tuple(estimates),
    )
