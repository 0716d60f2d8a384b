"""Loss, optimizers, evaluation, the training loop, and gradient checking.

Everything here is deterministic given its seeds: batch order comes from a
seeded generator, the optimizers are exact update rules, and no
time-dependent state enters the math.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, compose, accumulate_grad, no_grad

OPTIMIZERS = ("sgd", "adam")


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 5e-4
    momentum: float = 0.9       # sgd velocity decay
    beta1: float = 0.9          # adam first-moment decay
    beta2: float = 0.999        # adam second-moment decay
    batch_size: int = 8
    epochs: int = 8
    seed: int = 0
    clip_norm: float = 0.0      # 0 disables gradient clipping

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer {self.optimizer!r} must be one of "
                             f"{OPTIMIZERS}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr must be positive, batch_size and epochs "
                             "at least 1")
        if not (0 <= self.momentum < 1 and 0 < self.beta1 < 1
                and 0 < self.beta2 < 1):
            raise ValueError("momentum must be in [0,1), betas in (0,1)")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")


# ---------------------------------------------------------------------------
# loss

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    Computed through a float64 log-sum-exp, so it stays finite and
    accurate for logits up to ~1e4 in magnitude.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got "
                         f"{logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match "
                         f"batch size {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = float((lse[:, 0] - z[rows, labels]).mean())
    probs = np.exp(z - lse)

    def backward(g):
        gz = probs.copy()
        gz[rows, labels] -= 1.0
        gz *= float(g) / b
        accumulate_grad(logits, gz.astype(logits.data.dtype))

    return compose(np.asarray(loss, dtype=logits.data.dtype), (logits,),
                   backward)


# ---------------------------------------------------------------------------
# optimizers

def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def _require_grads(params):
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise RuntimeError(f"optimizer step with missing gradients for "
                           f"parameter indices {missing[:8]}"
                           f"{'...' if len(missing) > 8 else ''}")


def _maybe_clip(params, clip_norm):
    if not clip_norm:
        return
    norm = global_grad_norm(params)
    if norm > clip_norm:
        scale = clip_norm / norm
        for p in params:
            p.grad *= scale


class SGD:
    """Momentum update: v <- momentum*v + g ; p <- p - lr*v."""

    def __init__(self, params, lr, momentum=0.9, clip_norm=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        _require_grads(self.params)
        _maybe_clip(self.params, self.clip_norm)
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Bias-corrected adaptive update, eps = 1e-8."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, clip_norm=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = 1e-8
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        _require_grads(self.params)
        _maybe_clip(self.params, self.clip_norm)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(params, config):
    if config.optimizer == "sgd":
        return SGD(params, config.lr, config.momentum, config.clip_norm)
    return Adam(params, config.lr, config.beta1, config.beta2,
                config.clip_norm)


# ---------------------------------------------------------------------------
# batching and evaluation

def clips_to_batch(clips):
    """Stack clip videos into a (B, 3, T, H, W) tensor plus a label array."""
    x = np.stack([c.video for c in clips])
    labels = np.array([c.label for c in clips], dtype=np.int64)
    return Tensor(x), labels


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (classes, classes); rows = true, cols = pred
    count: int


def evaluate(net, clips, batch_size=16):
    """Top-1 accuracy and confusion matrix, in eval mode, no gradients."""
    if not clips:
        raise ValueError("cannot evaluate on an empty dataset")
    k = net.config.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            for start in range(0, len(clips), batch_size):
                chunk = clips[start:start + batch_size]
                x, labels = clips_to_batch(chunk)
                pred = net(x).data.argmax(axis=1)
                for true, p in zip(labels, pred):
                    confusion[true, p] += 1
    finally:
        net.train(was_training)
    correct = int(np.trace(confusion))
    return EvalResult(correct / len(clips), confusion, len(clips))


def fit_epoch(net, optimizer, clips, rng, batch_size):
    """One shuffled pass; returns the epoch's mean per-batch loss."""
    order = rng.permutation(len(clips))
    net.train()
    losses = []
    for start in range(0, len(clips), batch_size):
        batch = [clips[i] for i in order[start:start + batch_size]]
        x, labels = clips_to_batch(batch)
        optimizer.zero_grad()
        loss = cross_entropy(net(x), labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at training step "
                                 f"{len(losses)} of this epoch")
        loss.backward()
        optimizer.step()
        losses.append(value)
    return float(np.mean(losses))


def train_loop(net, train_clips, test_clips, config, emit=None):
    """Full training run; returns one metrics dict per epoch.

    ``emit``, if given, receives each metrics dict as it is produced.
    Batch order depends only on config.seed, so two runs with equal
    arguments produce identical parameters and metrics.
    """
    optimizer = make_optimizer(net.parameters(), config)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([int(config.seed), 2]))
    history = []
    for epoch in range(1, config.epochs + 1):
        loss = fit_epoch(net, optimizer, train_clips, shuffle_rng,
                         config.batch_size)
        record = {"epoch": epoch, "train_loss": loss}
        if test_clips:
            result = evaluate(net, test_clips,
                              batch_size=max(config.batch_size, 16))
            record["test_accuracy"] = result.accuracy
        history.append(record)
        if emit is not None:
            emit(record)
    return history


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    """Max relative error per parameter group, against tolerance ``tol``."""
    tol: float
    groups: dict = field(default_factory=dict)  # name -> max rel err

    @property
    def worst(self):
        return max(self.groups.values()) if self.groups else 0.0

    @property
    def failures(self):
        return sorted(n for n, e in self.groups.items() if e >= self.tol)

    @property
    def ok(self):
        return not self.failures

    def to_text(self):
        lines = [f"gradient check: {len(self.groups)} groups, "
                 f"tolerance {self.tol:g}, worst {self.worst:.3e}, "
                 f"{'PASS' if self.ok else 'FAIL'}"]
        for name in sorted(self.groups, key=self.groups.get, reverse=True):
            err = self.groups[name]
            flag = "  OVER" if err >= self.tol else ""
            lines.append(f"  {name}: {err:.3e}{flag}")
        return "\n".join(lines)


def _unit_direction(rng, shape):
    """A random direction of unit Euclidean norm, so the eps-step stays
    genuinely small regardless of how many elements the group has."""
    d = rng.standard_normal(shape)
    return d / np.linalg.norm(d.reshape(-1))


def _directional_error(loss, param, grad, direction, eps):
    """Relative error between the analytic directional derivative and a
    central difference of ``loss`` along ``direction``; ``param`` is
    perturbed in place and restored."""
    analytic = float((grad.astype(np.float64) * direction).sum())
    param += eps * direction
    plus = loss()
    param -= 2.0 * eps * direction
    minus = loss()
    param += eps * direction
    fd = (plus - minus) / (2.0 * eps)
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-3)


def grad_check_function(build, arrays, eps=1e-3, tol=1e-2, seed=0):
    """Check an op: ``build(*tensors) -> Tensor``; one group per input.

    The whole check runs in float64 so that only the backward rule itself
    is on trial, not float32 rounding.
    """
    rng = np.random.default_rng(seed)
    arrays64 = [np.asarray(a, np.float64) for a in arrays]
    tensors = [Tensor(a, dtype=np.float64, requires_grad=True)
               for a in arrays64]
    out = build(*tensors)
    probe = rng.standard_normal(out.shape)
    (out * Tensor(probe, dtype=np.float64)).sum().backward()

    def loss():
        with no_grad():
            res = build(*[Tensor(a, dtype=np.float64) for a in arrays64])
        return float((res.data * probe).sum())

    report = GradCheckReport(tol=tol)
    for i, (t, a64) in enumerate(zip(tensors, arrays64)):
        report.groups[f"arg{i}"] = _directional_error(
            loss, a64, t.grad, _unit_direction(rng, a64.shape), eps)
    return report


def grad_check_model(net, x, labels, eps=1e-3, tol=1e-2, seed=0):
    """Check a model's analytic gradients against central differences of
    the training loss, one random direction per parameter group (every
    named parameter is a group).

    Runs on a float64 copy of the model: central differences at eps=1e-3
    resolve the loss to ~1e-10 there, so any group error near the 1e-2
    tolerance indicates a wrong backward rule rather than rounding.  The
    model being checked is left untouched.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)

    net64 = copy.deepcopy(net)
    net64.astype(np.float64)
    net64.train()
    x64 = Tensor(np.asarray(x, np.float64), dtype=np.float64)

    net64.zero_grad()
    cross_entropy(net64(x64), labels).backward()
    grads = {name: p.grad.copy() for name, p in net64.named_parameters()}
    missing = [n for n, g in grads.items() if g is None]
    if missing:
        raise RuntimeError(f"no gradient reached parameters {missing[:5]}")

    def loss():
        with no_grad():
            return float(cross_entropy(net64(x64), labels).data)

    report = GradCheckReport(tol=tol)
    for name, p64 in net64.named_parameters():
        report.groups[name] = _directional_error(
            loss, p64.data, grads[name],
            _unit_direction(rng, p64.data.shape), eps)
    return report
