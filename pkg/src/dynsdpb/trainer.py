"""Training loop for fine-tuning baselines and last-mini-batch self-distillation.

One iteration runs forward, CE, the optional consistency term against the
cached outputs of the previous iteration, backward and an AdamW step, and
finally caches the fresh half's detached outputs for the next iteration.
The cache is cleared at every epoch boundary.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import distill as D
from . import tensor as T
from .config import RunConfig
from .data import ClassificationData, SequenceData, make_dataset
from .errors import ConfigError, ContractError, StateError
from .metrics import MetricsRecord, MetricsWriter, write_gradnorms
from .models import (
    EOS,
    ClassifierModel,
    DecoderModel,
    Model,
    generate_batch,
    parameter_norms,
    save_checkpoint,
)
from .sampler import OverlapBatch, SamplerMode, make_epoch_stream, make_plain_stream
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    FINETUNE = "finetune"
    DOUBLE_FINETUNE = "double_finetune"
    DYNAMIC_FINETUNE = "dynamic_finetune"
    DLB_SEQUENTIAL = "dlb_sequential"
    DLB_RANDOM = "dlb_random"
    DYNSDPB = "dynsdpb"


@dataclass(frozen=True)
class ModeSpec:
    sampler: SamplerMode = None  # None: disjoint shuffled batches
    loss: str = "finetune"  # finetune | dynamic_ce | static | dynamic
    epoch_multiplier: int = 1

    @property
    def distills(self):
        return self.loss in ("static", "dynamic")


MODE_SPECS = {
    TrainMode.FINETUNE: ModeSpec(),
    TrainMode.DOUBLE_FINETUNE: ModeSpec(epoch_multiplier=2),
    TrainMode.DYNAMIC_FINETUNE: ModeSpec(loss="dynamic_ce"),
    TrainMode.DLB_SEQUENTIAL: ModeSpec(SamplerMode.SEQUENTIAL, "static"),
    TrainMode.DLB_RANDOM: ModeSpec(SamplerMode.SHUFFLED, "static"),
    TrainMode.DYNSDPB: ModeSpec(SamplerMode.SHUFFLED, "dynamic"),
}


def mode_spec(cfg: RunConfig) -> ModeSpec:
    spec = MODE_SPECS[TrainMode(cfg.mode)]
    if spec.loss == "dynamic" and not cfg.dynamic:
        spec = ModeSpec(spec.sampler, "static", spec.epoch_multiplier)
    return spec


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay and linear warmup/decay of the rate."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 total_steps=1, warmup_frac=0.06):
        self.params = list(params)
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = max(1, int(total_steps))
        self.warmup_steps = math.ceil(warmup_frac * self.total_steps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            factor = (step + 1) / self.warmup_steps
        else:
            factor = (self.total_steps - step) / max(1, self.total_steps - self.warmup_steps)
        return self.base_lr * min(1.0, max(0.0, factor))

    def step(self) -> float:
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0.0:
                continue
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    data: object
    config: RunConfig
    cache: D.LogitsCache = field(default_factory=D.LogitsCache)
    t: int = 0
    epoch: int = 0
    skipped_empty_total: int = 0

    @property
    def spec(self) -> ModeSpec:
        return mode_spec(self.config)


def build_model(cfg: RunConfig, data) -> Model:
    if isinstance(data, ClassificationData):
        return ClassifierModel(data.in_dim, data.num_classes, hidden=tuple(cfg.hidden),
                               seed=cfg.seed)
    return DecoderModel(data.vocab_size, d_model=cfg.d_model, n_heads=cfg.n_heads,
                        n_blocks=cfg.n_blocks, max_len=cfg.max_len, seed=cfg.seed)


def _mean_or_none(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or not np.all(np.isfinite(x)):
        return None
    return float(x.mean())


# ---------------------------------------------------------------------------
# forward passes per model family


def _classifier_forward(state, ids):
    data = state.data
    logits = state.model.forward(data.x_train[list(ids)])
    ce = T.cross_entropy(logits, data.y_train[list(ids)], reduction="none")
    return logits, ce


def _teacher_forcing(data: SequenceData, pairs):
    """Padded inputs plus (row, position, target) for every target token."""
    width = max(len(p) + len(t) - 1 for p, t in pairs)
    inputs = np.full((len(pairs), width), EOS, dtype=np.int64)
    rows, cols, targets, seg = [], [], [], []
    for i, (p, t) in enumerate(pairs):
        seq = p + t[:-1]
        inputs[i, : len(seq)] = seq
        for j, tok in enumerate(t):
            rows.append(i)
            cols.append(len(p) - 1 + j)
            targets.append(tok)
        seg.append(len(t))
    return inputs, np.array(rows), np.array(cols), np.array(targets), seg


def _decoder_forward(model, data: SequenceData, pairs):
    """Returns per-token logits [N_tok x V], per-sample mean token CE [n], and row spans."""
    inputs, rows, cols, targets, seg = _teacher_forcing(data, pairs)
    logits = model.forward(inputs)
    tok_logits = logits[rows, cols]
    ce_tok = T.cross_entropy(tok_logits, targets, reduction="none")
    n = len(pairs)
    averager = np.zeros((n, len(targets)))
    spans, start = [], 0
    for i, m in enumerate(seg):
        averager[i, start:start + m] = 1.0 / m
        spans.append((start, start + m))
        start += m
    ce = (Tensor(averager) @ ce_tok.reshape(-1, 1)).reshape(n)
    return tok_logits, ce, spans


def _max_new(cfg, data):
    return cfg.max_new if cfg.max_new is not None else data.max_target_len


# ---------------------------------------------------------------------------
# one iteration


def _check_batch(state, batch):
    spec = state.spec
    if spec.distills:
        if not isinstance(batch, OverlapBatch):
            raise ContractError("distillation modes need an OverlapBatch")
        if len(batch.carried_ids) != len(batch.fresh_ids):
            raise ContractError("carried and fresh halves must have equal size")
    cache = state.cache
    if not cache.empty and cache.stamp != batch.t - 1:
        raise StateError(f"cache stamped {cache.stamp} used at iteration {batch.t}")


def _factors(spec, cfg, u, U, ce):
    if spec.loss == "dynamic":
        return D.dynamic_factors(u, U, ce, cfg.alpha, cfg.tau, cfg.tau_min_frac)
    return D.static_factors(len(ce), cfg.alpha, cfg.tau, U)


def _classifier_step(state, batch):
    cfg, spec, cache = state.config, state.spec, state.cache
    logits, ce = _classifier_forward(state, batch.ids)
    info = {}
    if spec.loss == "dynamic_ce":
        probs = T.softmax(logits.data).data
        w = D.dynamic_ce_weights(D.uncertainty(probs), D.normalizer(logits.shape[1]))
        return (ce * w).mean(), ce, logits, info
    if not spec.distills or cache.empty:
        return D.total_loss(ce, mode="finetune"), ce, logits, info

    half = len(batch.carried_ids)
    cached = np.stack(cache.lookup(batch.carried_ids))
    current = logits[:half]
    U = D.normalizer(logits.shape[1])
    u = D.uncertainty(T.softmax(current.data).data)
    factors = _factors(spec, cfg, u, U, ce.data[:half])
    lmbc = D.lmbc_loss(cached, current, factors.tau_eff, reduction="none")
    loss = D.total_loss(ce, lmbc, factors, mode=spec.loss)
    info.update(lmbc=lmbc.data, factors=factors)
    return loss, ce, logits, info


def _decoder_step(state, batch):
    cfg, spec, cache, data = state.config, state.spec, state.cache, state.data
    model = state.model
    pairs = [data.train[i] for i in batch.ids]
    tok_logits, ce, spans = _decoder_forward(model, data, pairs)
    V = data.vocab_size
    U = D.normalizer(V)
    info = {"skipped": 0}

    if spec.loss == "dynamic_ce":
        probs = T.softmax(tok_logits.data).data
        u = np.array([D.uncertainty(probs[a:b]).mean() for a, b in spans])
        w = D.dynamic_ce_weights(u, U)
        return (ce * w).mean(), ce, None, info
    if not spec.distills:
        return D.total_loss(ce, mode="finetune"), ce, None, info

    half = len(batch.carried_ids)
    have_cache = not cache.empty
    to_cache = []
    terms, keep = [], []
    u_list = []

    if cfg.lmbc_mode == "token":
        for i, (a, b) in enumerate(spans[half:]):
            to_cache.append(tok_logits.data[a:b])
        if have_cache:
            cached_rows = cache.lookup(batch.carried_ids)
            probs = T.softmax(tok_logits.data).data
            for i in range(half):
                a, b = spans[i]
                keep.append(i)
                u_list.append(D.uncertainty(probs[a:b]).mean())
                terms.append((cached_rows[i], tok_logits[a:b]))
    else:
        prompts = [p for p, _ in pairs]
        max_new = _max_new(cfg, data)
        if have_cache:
            gens = generate_batch(model, prompts, max_new)
        else:
            with T.no_grad():
                gens = [None] * half + generate_batch(model, prompts[half:], max_new)
        for g in gens[half:]:
            to_cache.append(D.vocabulary_map(g).values.data if len(g) else None)
        if have_cache:
            cached_maps = cache.lookup(batch.carried_ids)
            for i in range(half):
                if cached_maps[i] is None or len(gens[i]) == 0:
                    info["skipped"] += 1
                    continue
                keep.append(i)
                u_list.append(D.uncertainty(gens[i].probs.data).mean())
                terms.append((cached_maps[i], D.vocabulary_map(gens[i])))

    info["to_cache"] = to_cache
    if not have_cache or not keep:
        return D.total_loss(ce, mode="finetune"), ce, None, info

    factors = _factors(spec, cfg, np.array(u_list), U, ce.data[keep])
    per_sample = []
    for (cached, current), tau_i in zip(terms, factors.tau_eff):
        if cfg.lmbc_mode == "token":
            per_sample.append(D.lmbc_loss(cached, current, tau_i))
        else:
            per_sample.append(D.vmm_lmbc_loss(cached, current, tau_i))
    lmbc = T.stack(per_sample)
    loss = D.total_loss(ce, lmbc, factors, mode=spec.loss)
    info.update(lmbc=lmbc.data, factors=factors)
    return loss, ce, None, info


def train_step(state: TrainState, batch, track_norms: bool = False) -> MetricsRecord:
    """Run one optimisation step on ``batch`` and return its metrics."""
    _check_batch(state, batch)
    spec = state.spec
    state.optimizer.zero_grad()
    if isinstance(state.data, ClassificationData):
        loss, ce, logits, info = _classifier_step(state, batch)
    else:
        loss, ce, logits, info = _decoder_step(state, batch)

    loss.backward()
    norms = parameter_norms(state.model) if track_norms else None
    lr = state.optimizer.step()

    if spec.distills:
        half = len(batch.carried_ids)
        if logits is not None:
            rows = logits.data[half:]
        else:
            rows = info["to_cache"]
        state.cache.store(batch.fresh_ids, list(rows), batch.t)

    factors = info.get("factors")
    lmbc = info.get("lmbc")
    skipped = info.get("skipped", 0)
    state.skipped_empty_total += skipped
    state.t = batch.t + 1
    rec = MetricsRecord(
        iteration=batch.t,
        epoch=state.epoch,
        ce_loss=float(ce.data.mean()),
        total_loss=float(loss.data),
        lmbc_loss=_mean_or_none(lmbc) if lmbc is not None else None,
        lmbc_samples=0 if lmbc is None else int(len(lmbc)),
        skipped_empty=int(skipped),
        lr=float(lr),
        grad_norms=norms,
    )
    if factors is not None and state.config.log_factors:
        rec.alpha_eff = _mean_or_none(factors.alpha_eff)
        rec.tau_eff = _mean_or_none(factors.tau_eff)
        if factors.dynamic:
            rec.u_over_U = _mean_or_none(factors.u_over_U)
            rec.d = _mean_or_none(factors.d)
    return rec


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Model, data, split: str = "test", chunk: int = 256):
    """``(accuracy, mean_loss)`` on a split.

    Classifier accuracy is argmax agreement; decoder accuracy is exact match
    of the greedy generation (including the end token) against the target.
    """
    if isinstance(data, ClassificationData):
        x = data.x_test if split == "test" else data.x_train
        y = data.y_test if split == "test" else data.y_train
        if len(y) == 0:
            raise ContractError(f"empty {split} split")
        with T.no_grad():
            correct, loss = 0, 0.0
            for s in range(0, len(y), chunk):
                logits = model.forward(x[s:s + chunk])
                correct += int((logits.data.argmax(axis=1) == y[s:s + chunk]).sum())
                loss += float(T.cross_entropy(logits, y[s:s + chunk], "none").data.sum())
        return correct / len(y), loss / len(y)

    pairs = data.test if split == "test" else data.train
    if not pairs:
        raise ContractError(f"empty {split} split")
    max_new = data.max_target_len
    correct, loss = 0, 0.0
    with T.no_grad():
        for s in range(0, len(pairs), chunk):
            part = pairs[s:s + chunk]
            gens = generate_batch(model, [p for p, _ in part], max_new)
            correct += sum(int(g.tokens == t) for g, (_, t) in zip(gens, part))
            _, ce, _ = _decoder_forward(model, data, part)
            loss += float(ce.data.sum())
    return correct / len(pairs), loss / len(pairs)


# ---------------------------------------------------------------------------
# full run


def epoch_batches(cfg: RunConfig, n_train: int, epoch: int, t0: int):
    spec = mode_spec(cfg)
    ids = range(n_train)
    if spec.sampler is None:
        return make_plain_stream(ids, cfg.batch_size, seed=cfg.seed, epoch=epoch, t0=t0)
    return make_epoch_stream(ids, cfg.batch_size, spec.sampler, seed=cfg.seed, epoch=epoch, t0=t0)


def total_epochs(cfg: RunConfig) -> int:
    return cfg.epochs * mode_spec(cfg).epoch_multiplier


def init_state(cfg: RunConfig, data=None, total_steps: int = None) -> TrainState:
    data = make_dataset(cfg) if data is None else data
    model = build_model(cfg, data)
    if total_steps is None:
        total_steps = sum(len(epoch_batches(cfg, data.n_train, e, 0))
                          for e in range(total_epochs(cfg)))
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay, total_steps=total_steps,
                warmup_frac=cfg.warmup_frac)
    return TrainState(model=model, optimizer=opt, data=data, config=cfg)


@dataclass
class RunArtifacts:
    out_dir: Path
    summary: dict
    records: list

    @property
    def metrics_path(self):
        return self.out_dir / "metrics.jsonl"


def run_experiment(cfg: RunConfig, out_dir=None) -> RunArtifacts:
    """Train and evaluate one configuration, writing all artifacts to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    data = make_dataset(cfg)
    if cfg.family == "decoder" and data.max_total_len > cfg.max_len:
        raise ConfigError(f"task sequences need max_len >= {data.max_total_len}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())

    state = init_state(cfg, data)
    layers = state.model.layer_names()
    norm_rows, records, accs = [], [], []
    every = cfg.grad_norm_every
    t = 0
    with MetricsWriter(out / "metrics.jsonl") as writer:
        for epoch in range(total_epochs(cfg)):
            state.epoch = epoch
            state.cache.clear()
            batches = epoch_batches(cfg, data.n_train, epoch, t)
            for k, batch in enumerate(batches):
                track = every > 0 and batch.t % every == 0
                rec = train_step(state, batch, track_norms=track)
                if track:
                    norm_rows.append((batch.t, rec.grad_norms))
                if k == len(batches) - 1:
                    rec.eval_accuracy, rec.eval_loss = evaluate(state.model, data)
                    accs.append(rec.eval_accuracy)
                    log.info("epoch %d acc %.4f loss %.4f", epoch, rec.eval_accuracy,
                             rec.eval_loss)
                writer.write(rec)
                records.append(rec)
            t += len(batches)

    if every > 0:
        write_gradnorms(out / "gradnorms.csv", layers, norm_rows)
    save_checkpoint(state.model, out / "checkpoint.npz")
    best = int(np.argmax(accs))
    summary = {
        "task": cfg.task,
        "mode": cfg.mode,
        "alpha": cfg.alpha,
        "tau": cfg.tau,
        "seed": cfg.seed,
        "epochs": len(accs),
        "iterations": t,
        "epoch_accuracies": accs,
        "best_accuracy": accs[best],
        "best_epoch": best,
        "final_accuracy": accs[-1],
        "skipped_empty": state.skipped_empty_total,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return RunArtifacts(out, summary, records)
