"""Toy-scale masked-LM pre-training and classification fine-tuning.

Linear warmup-then-decay schedule, optional L2 penalty on weight
matrices (required by default for normalized-attention stacks, where it
compensates for the removed dropout), divergence detection, and fully
seeded synthetic data so every run is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import attention as A
from . import encoder as E
from .tensor import Tensor

# reserved token ids shared by all synthetic tasks
PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
MARKER_IDS = (3, 4)
FIRST_STATE_ID = 5


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    seq_len: int = 32
    l2_lambda: float = 0.0
    mask_fraction: float = 0.15
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_norm_threshold: float = 1e3
    divergence_patience: int = 5
    eval_batches: int = 8
    task_kind: str = "markov"
    task_states: int = 64
    allow_zero_l2_for_bandd: bool = False

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise TrainConfigError("warmup_steps must be <= total_steps")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise TrainConfigError("mask_fraction must be in [0, 1)")
        if self.l2_lambda < 0:
            raise TrainConfigError("l2_lambda must be >= 0")
        if self.optimizer != "adam":
            raise TrainConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.task_kind not in ("markov", "copy_noise"):
            raise TrainConfigError(f"unknown task_kind {self.task_kind!r}")


_TC_INT = {"warmup_steps", "total_steps", "batch_size", "seq_len", "seed",
           "divergence_patience", "eval_batches", "task_states"}
_TC_FLOAT = {"peak_lr", "l2_lambda", "mask_fraction", "beta1", "beta2",
             "adam_eps", "grad_norm_threshold"}
_TC_BOOL = {"allow_zero_l2_for_bandd"}


def train_config_from_text(text: str) -> TrainConfig:
    pairs = E.parse_flat_config(text)
    valid = set(TrainConfig.__dataclass_fields__)
    unknown = set(pairs) - valid
    if unknown:
        raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in pairs.items():
        if key in _TC_INT:
            kwargs[key] = int(value)
        elif key in _TC_FLOAT:
            kwargs[key] = float(value)
        elif key in _TC_BOOL:
            kwargs[key] = E._parse_bool(value, key)
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return train_config_from_text(fh.read())


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticTask:
    """Deterministic corpus generator standing in for a real corpus.

    ``markov``: sequences from a sparse first-order chain with peaked
    transitions, so context makes masked tokens predictable.
    ``copy_noise``: second half of each sequence copies the first half
    with a small resampling probability.
    """

    kind: str
    vocab_size: int
    seed: int
    n_states: int = 64

    def __post_init__(self):
        if self.n_states + FIRST_STATE_ID > self.vocab_size:
            raise TrainConfigError(
                f"vocab_size {self.vocab_size} too small for "
                f"{self.n_states} states plus reserved ids")
        rng = np.random.default_rng([self.seed, 7])
        # two successors per state, probability 0.85 / 0.15
        self._succ = np.stack([rng.permutation(self.n_states),
                               rng.permutation(self.n_states)], axis=1)

    def rng(self, split: str) -> np.random.Generator:
        offset = {"train": 0, "eval": 1}[split]
        return np.random.default_rng([self.seed, 13, offset])

    def sample_batch(self, rng: np.random.Generator, batch: int, seq_len: int
                     ) -> np.ndarray:
        if self.kind == "markov":
            states = np.empty((batch, seq_len), dtype=np.int64)
            states[:, 0] = rng.integers(0, self.n_states, size=batch)
            branch = (rng.random((batch, seq_len)) < 0.15).astype(np.int64)
            for t in range(1, seq_len):
                states[:, t] = self._succ[states[:, t - 1], branch[:, t]]
            return states + FIRST_STATE_ID
        # copy_noise
        half = seq_len // 2
        first = rng.integers(0, self.n_states, size=(batch, seq_len - half))
        second = first[:, :half].copy()
        noisy = rng.random((batch, half)) < 0.1
        second[noisy] = rng.integers(0, self.n_states, size=int(noisy.sum()))
        return np.concatenate([first, second], axis=1) + FIRST_STATE_ID


@dataclass
class ClassificationTask:
    """Binary sequence classification: one marker token is planted in
    each sequence and the label is the parity of the marker's id."""

    vocab_size: int
    seed: int
    n_states: int = 64

    def sample_batch(self, rng: np.random.Generator, batch: int, seq_len: int):
        ids = rng.integers(FIRST_STATE_ID, FIRST_STATE_ID + self.n_states,
                           size=(batch, seq_len))
        ids[:, 0] = CLS_ID
        labels = rng.integers(0, 2, size=batch)
        pos = rng.integers(1, seq_len, size=batch)
        ids[np.arange(batch), pos] = np.asarray(MARKER_IDS)[labels]
        return ids, labels

    def rng(self, split: str) -> np.random.Generator:
        offset = {"train": 0, "eval": 1}[split]
        return np.random.default_rng([self.seed, 17, offset])


# ---------------------------------------------------------------------------
# schedule, loss, optimizer


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at the end."""
    if step < 0 or step > config.total_steps:
        raise TrainConfigError(f"step {step} outside [0, {config.total_steps}]")
    w, total, peak = config.warmup_steps, config.total_steps, config.peak_lr
    if step <= w:
        return peak if w == 0 else peak * step / w
    return peak * (total - step) / (total - w)


def weight_matrices(params) -> list[Tensor]:
    """The tensors the L2 term penalizes: 2-d weights only; biases and
    layernorm / score gain-bias parameters are excluded."""
    return [t for t in params if t.data.ndim == 2]


def loss_with_l2(task_loss: Tensor, params, l2_lambda: float) -> Tensor:
    if l2_lambda < 0:
        raise TrainConfigError("l2_lambda must be >= 0")
    if l2_lambda == 0.0:
        return task_loss
    total = task_loss
    for w in weight_matrices(params):
        total = T.add(total, T.scale(T.sum_all(T.mul(w, w)), l2_lambda))
    return total


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0.0:
                continue
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# run logging and divergence detection


@dataclass(frozen=True)
class RunStatus:
    kind: str  # Completed | Converged | Diverged | Healthy
    step: int | None = None
    reason: str | None = None

    def __str__(self):
        if self.kind == "Diverged":
            return f"Diverged:{self.step}:{self.reason}"
        return self.kind

    @staticmethod
    def parse(text: str) -> "RunStatus":
        if text.startswith("Diverged:"):
            _, step, reason = text.split(":", 2)
            return RunStatus("Diverged", int(step), reason)
        return RunStatus(text)


HEALTHY = RunStatus("Healthy")


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    loss: float
    l2_term: float
    grad_norm: float
    wall_ms: float


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    status: RunStatus = field(default_factory=lambda: RunStatus("Completed"))
    initial_eval_loss: float | None = None
    final_eval_loss: float | None = None

    def deterministic_rows(self):
        """Rows minus wall-clock time, for reproducibility comparison."""
        return [(r.step, r.lr, r.loss, r.l2_term, r.grad_norm) for r in self.rows]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["step", "lr", "loss", "l2_term", "grad_norm", "wall_ms"])
        for r in self.rows:
            writer.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.l2_term),
                             repr(r.grad_norm), f"{r.wall_ms:.3f}"])
        if self.initial_eval_loss is not None:
            out.write(f"# initial_eval_loss={self.initial_eval_loss!r}\n")
        if self.final_eval_loss is not None:
            out.write(f"# final_eval_loss={self.final_eval_loss!r}\n")
        out.write(f"# status={self.status}\n")
        return out.getvalue()

    @staticmethod
    def from_csv(text: str) -> "RunLog":
        log = RunLog()
        lines = text.splitlines()
        for line in lines[1:]:
            if line.startswith("#"):
                key, value = line[1:].strip().split("=", 1)
                if key == "status":
                    log.status = RunStatus.parse(value)
                elif key == "initial_eval_loss":
                    log.initial_eval_loss = float(value)
                elif key == "final_eval_loss":
                    log.final_eval_loss = float(value)
                continue
            step, lr, loss, l2, gn, wall = line.split(",")
            log.rows.append(StepRecord(int(step), float(lr), float(loss),
                                       float(l2), float(gn), float(wall)))
        return log


def detect_divergence(window, grad_norm_threshold: float = 1e3,
                      patience: int = 5) -> RunStatus:
    """Diverged on any NaN/Inf, or on ``patience`` consecutive steps of
    grad_norm above the threshold; otherwise Healthy."""
    if not window:
        raise TrainConfigError("divergence window must be non-empty")
    streak = 0
    for row in window:
        if not (np.isfinite(row.loss) and np.isfinite(row.grad_norm)):
            return RunStatus("Diverged", row.step, "NaN")
        if row.grad_norm > grad_norm_threshold:
            streak += 1
            if streak >= patience:
                return RunStatus("Diverged", row.step, "grad-explosion")
        else:
            streak = 0
    return HEALTHY


# ---------------------------------------------------------------------------
# masked-LM pre-training


@dataclass
class MLMHead:
    w: Tensor
    b: Tensor

    def params(self):
        return [self.w, self.b]


def make_mlm_head(config: E.EncoderConfig, seed: int) -> MLMHead:
    rng = np.random.default_rng([seed, 3])
    w = Tensor(E._trunc_normal(rng, (config.hidden_size, config.vocab_size)),
               requires_grad=True)
    b = Tensor(np.zeros(config.vocab_size), requires_grad=True)
    return MLMHead(w, b)


def _apply_mlm_mask(ids: np.ndarray, task: SyntheticTask, frac: float,
                    rng: np.random.Generator):
    """BERT masking: of the selected positions, 80% MASK, 10% random
    token, 10% unchanged. Returns (corrupted ids, flat positions, labels)."""
    batch, seq = ids.shape
    n_mask = max(1, int(round(frac * seq)))
    corrupted = ids.copy()
    # n_mask positions per sequence, without replacement
    cols = np.argsort(rng.random((batch, seq)), axis=1)[:, :n_mask].reshape(-1)
    rows = np.repeat(np.arange(batch), n_mask)
    labels = ids[rows, cols]
    roll = rng.random(rows.size)
    fill = np.full(rows.size, MASK_ID, dtype=np.int64)
    random_ids = rng.integers(FIRST_STATE_ID, FIRST_STATE_ID + task.n_states,
                              size=rows.size)
    fill[roll >= 0.8] = random_ids[roll >= 0.8]
    keep = roll >= 0.9
    fill[keep] = labels[keep]
    corrupted[rows, cols] = fill
    flat = rows * seq + cols
    return corrupted, flat, labels


def _mlm_loss(stack, head, ids, flat_pos, labels, training, rng):
    hidden = E.forward(stack, ids, training=training, rng=rng)
    bsz, seq, h = hidden.shape
    flat = T.reshape(hidden, (bsz * seq, h))
    picked = T.gather_rows(flat, flat_pos)
    logits = T.add(T.matmul(picked, head.w), head.b)
    return T.cross_entropy_logits(logits, labels)


def mlm_eval_loss(stack: E.EncoderStack, head: MLMHead, task: SyntheticTask,
                  config: TrainConfig, n_batches: int | None = None) -> float:
    """Mean masked-LM loss over deterministic held-out batches."""
    n_batches = n_batches or config.eval_batches
    rng = task.rng("eval")
    losses = []
    with T.no_grad():
        for _ in range(n_batches):
            ids = task.sample_batch(rng, config.batch_size, config.seq_len)
            corrupted, flat_pos, labels = _apply_mlm_mask(
                ids, task, config.mask_fraction, rng)
            loss = _mlm_loss(stack, head, corrupted, flat_pos, labels,
                             training=False, rng=None)
            losses.append(loss.item())
    return float(np.mean(losses))


def pretrain_mlm(stack: E.EncoderStack, task: SyntheticTask,
                 config: TrainConfig) -> tuple[RunLog, MLMHead]:
    """Train the stack on masked-token prediction; returns the run log
    (with before/after eval losses) and the prediction head."""
    cfg = stack.config
    if (cfg.attention_kind == A.NORMALIZED_BANDD and config.l2_lambda == 0.0
            and not config.allow_zero_l2_for_bandd):
        raise TrainConfigError(
            "normalized-attention stacks train with an L2 term by default "
            "(it replaces the removed dropout); set l2_lambda > 0 or "
            "allow_zero_l2_for_bandd = true")

    head = make_mlm_head(cfg, config.seed)
    stack.set_trainable(True)
    params = stack.param_tensors() + head.params()
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    data_rng = task.rng("train")
    model_rng = np.random.default_rng([config.seed, 2])

    log = RunLog()
    log.initial_eval_loss = mlm_eval_loss(stack, head, task, config)
    window = []
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        ids = task.sample_batch(data_rng, config.batch_size, config.seq_len)
        corrupted, flat_pos, labels = _apply_mlm_mask(
            ids, task, config.mask_fraction, data_rng)
        with T.fresh_tape() as tape:
            task_loss = _mlm_loss(stack, head, corrupted, flat_pos, labels,
                                  training=True, rng=model_rng)
            total = loss_with_l2(task_loss, params, config.l2_lambda)
            T.backward(total, tape)
        gnorm = global_grad_norm(params)
        lr = lr_schedule(step, config)
        row = StepRecord(step, lr, total.item(),
                         total.item() - task_loss.item(), gnorm,
                         (time.perf_counter() - t0) * 1e3)
        log.rows.append(row)
        window.append(row)
        window = window[-max(config.divergence_patience, 1):]
        status = detect_divergence(window, config.grad_norm_threshold,
                                   config.divergence_patience)
        if status.kind == "Diverged":
            log.status = status
            T.zero_grads(params)
            return log, head
        opt.step(lr)
        T.zero_grads(params)

    log.final_eval_loss = mlm_eval_loss(stack, head, task, config)
    log.status = RunStatus("Completed")
    return log, head


# ---------------------------------------------------------------------------
# classification fine-tuning


@dataclass
class ClassifierHead:
    w: Tensor
    b: Tensor

    def params(self):
        return [self.w, self.b]


def make_classifier_head(config: E.EncoderConfig, seed: int,
                         n_classes: int = 2) -> ClassifierHead:
    rng = np.random.default_rng([seed, 5])
    w = Tensor(E._trunc_normal(rng, (config.hidden_size, n_classes)),
               requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    return ClassifierHead(w, b)


def _classifier_logits(stack, head, ids, training, rng):
    hidden = E.forward(stack, ids, training=training, rng=rng)
    pooled = E.pool_first(stack, hidden)
    return T.add(T.matmul(pooled, head.w), head.b)


def classifier_accuracy(stack: E.EncoderStack, head: ClassifierHead,
                        task: ClassificationTask, config: TrainConfig,
                        n_batches: int | None = None) -> float:
    n_batches = n_batches or config.eval_batches
    rng = task.rng("eval")
    correct = total = 0
    with T.no_grad():
        for _ in range(n_batches):
            ids, labels = task.sample_batch(rng, config.batch_size,
                                            config.seq_len)
            logits = _classifier_logits(stack, head, ids, False, None)
            correct += int((logits.data.argmax(axis=-1) == labels).sum())
            total += labels.size
    return correct / total


def finetune_classifier(checkpoint: bytes, task: ClassificationTask,
                        config: TrainConfig) -> dict:
    """Attach a classifier on the pooled first position and train all
    weights. Returns accuracies before and after plus the run log."""
    stack = E.load_checkpoint(checkpoint)
    head = make_classifier_head(stack.config, config.seed)
    stack.set_trainable(True)
    params = stack.param_tensors() + head.params()
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    data_rng = task.rng("train")
    model_rng = np.random.default_rng([config.seed, 2])

    accuracy_before = classifier_accuracy(stack, head, task, config)
    log = RunLog()
    window = []
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        ids, labels = task.sample_batch(data_rng, config.batch_size,
                                        config.seq_len)
        with T.fresh_tape() as tape:
            loss = T.cross_entropy_logits(
                _classifier_logits(stack, head, ids, True, model_rng), labels)
            total = loss_with_l2(loss, params, config.l2_lambda)
            T.backward(total, tape)
        gnorm = global_grad_norm(params)
        lr = lr_schedule(step, config)
        row = StepRecord(step, lr, total.item(), total.item() - loss.item(),
                         gnorm, (time.perf_counter() - t0) * 1e3)
        log.rows.append(row)
        window.append(row)
        window = window[-max(config.divergence_patience, 1):]
        status = detect_divergence(window, config.grad_norm_threshold,
                                   config.divergence_patience)
        if status.kind == "Diverged":
            log.status = status
            T.zero_grads(params)
            break
        opt.step(lr)
        T.zero_grads(params)
    else:
        log.status = RunStatus("Completed")

    accuracy_after = classifier_accuracy(stack, head, task, config)
    return {"accuracy_before": accuracy_before,
            "accuracy_after": accuracy_after,
            "status": log.status,
            "log": log,
            "stack": stack,
            "head": head}
