"""Training loops: Adam with linear warmup/decay, gradient accumulation,
early stopping on validation loss, the optional masked-LM stage, seeded
multi-seed experiments, and the majority-vote seed ensemble."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from germeval_mtl import autodiff as ad
from germeval_mtl import data as dt
from germeval_mtl import metrics as mx
from germeval_mtl import model as md
from germeval_mtl import objectives as obj
from germeval_mtl import tokenizer as tok

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss or gradient went non-finite; training cannot continue."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    num_epochs: int = 3
    adam_epsilon: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    warmup_ratio: float = 0.1
    warmup_steps: int = 0
    max_grad_norm: float = 1.0
    batch_size: int = 8
    eval_every_batches: int = 100
    early_stop_patience_evals: int = 10
    gradient_accumulation_steps: int = 1
    environment: str = md.MTL  # "stl" or "mtl"
    lm_stage: bool = False
    seeds: tuple = (1, 2, 3, 4, 5)
    split_seed: int = 20210  # one dataset split shared by every seed

    def __post_init__(self):
        for name in ("learning_rate", "adam_epsilon", "warmup_ratio", "max_grad_norm"):
            if getattr(self, name) <= 0 and name != "warmup_ratio":
                raise ValueError(f"{name} must be positive")
        if self.warmup_ratio < 0 or self.warmup_steps < 0:
            raise ValueError("warmup settings must be nonnegative")
        if self.batch_size < 1 or self.num_epochs < 1 or self.gradient_accumulation_steps < 1:
            raise ValueError("batch_size, num_epochs, gradient_accumulation_steps must be >= 1")
        if self.early_stop_patience_evals < 1 or self.eval_every_batches < 1:
            raise ValueError("patience and eval cadence must be >= 1")
        if self.environment not in (md.STL, md.MTL):
            raise ValueError(f"environment must be {md.STL!r} or {md.MTL!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def environment_label(self) -> str:
        base = "STL" if self.environment == md.STL else "MTL"
        return f"LM+{base}" if self.lm_stage else base


@dataclass
class RunRecord:
    seed: int
    eval_history: list = field(default_factory=list)  # (step, val_loss, {task: f1})
    stopped_early: bool = False
    best_checkpoint_step: int = -1


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict = {}
        self.v: dict = {}


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients by max_norm/norm when their global norm exceeds it."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


def adam_step(tensors: dict, state: AdamState, lr_t: float, cfg: TrainConfig) -> None:
    """Global-norm clip, bias-corrected Adam update, then grad reset."""
    grads = {}
    for name, t in tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    grads, _ = clip_by_global_norm(grads, cfg.max_grad_norm)

    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, t in tensors.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_epsilon)
        t.data = t.data - lr_t * update
        t.grad = None


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then linear decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_steps if cfg.warmup_steps > 0 else math.ceil(cfg.warmup_ratio * total_steps)
    if step <= warmup:
        return cfg.learning_rate * step / max(warmup, 1)
    return cfg.learning_rate * (total_steps - step) / max(total_steps - warmup, 1)


def _micro_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    micro = math.ceil(n / cfg.batch_size)
    return math.ceil(micro / cfg.gradient_accumulation_steps)


def _batch_loss(params: md.ModelParams, ds: dt.EncodedDataset, idx: np.ndarray,
                train_mode: bool, rng) -> ad.Tensor:
    ids, mask = ds.ids[idx], ds.attention_mask[idx]
    if params.environment == md.STL:
        probs = md.stl_forward(params, ids, mask, train_mode, rng)
        return obj.task_loss(probs, ds.labels[params.task][idx])
    outputs = md.mtl_forward(params, ids, mask, train_mode, rng)
    labels = {t: ds.labels[t][idx] for t in dt.TASKS}
    return obj.loss_bundle(outputs, labels).l_multi


def predict_dataset(params: md.ModelParams, ds: dt.EncodedDataset, batch_size: int = 32) -> dict:
    """Hard 0/1 labels for every covered task, deterministically."""
    preds: dict = {t: [] for t in params.head_tasks}
    with ad.no_grad():
        for start in range(0, len(ds), batch_size):
            ids = ds.ids[start : start + batch_size]
            mask = ds.attention_mask[start : start + batch_size]
            h_cls = md.encoder_forward(params, ids, mask)[:, 0, :]
            for t in params.head_tasks:
                preds[t].append(md.predict_labels(md.classify(params.head(t), h_cls)))
    return {t: np.concatenate(chunks) for t, chunks in preds.items()}


def evaluate_model(params: md.ModelParams, ds: dt.EncodedDataset, batch_size: int = 32) -> tuple[float, dict]:
    """(validation loss, per-task macro F1) in eval mode.

    The loss is the quantity training minimizes: the task's own
    cross-entropy for a single-task model, the equal-weight multitask mean
    otherwise.
    """
    total = 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        loss = _batch_loss(params, ds, idx, train_mode=False, rng=None)
        total += float(loss.data) * len(idx)
    val_loss = total / len(ds)
    preds = predict_dataset(params, ds, batch_size)
    f1s = {t: mx.score(preds[t], ds.labels[t], "macro").f1 for t in params.head_tasks}
    return val_loss, f1s


def _classifier_tensors(params: md.ModelParams) -> dict:
    return {n: t for n, t in params.tensors.items() if not n.startswith("mlm.")}


def train_one(params: md.ModelParams, train_ds: dt.EncodedDataset, val_ds: dt.EncodedDataset,
              cfg: TrainConfig, seed: int, val_metrics_fn=None) -> tuple[md.ModelParams, RunRecord]:
    """Train until the epoch budget or early stopping, keep the best checkpoint.

    Validation runs after every ``eval_every_batches`` optimizer steps (and
    once more at the end); ``early_stop_patience_evals`` evaluations without
    a strictly better validation loss halt training. ``val_metrics_fn`` may
    replace the real validation pass (test hook).
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation sets must be nonempty")
    overlap = set(train_ds.example_ids) & set(val_ds.example_ids)
    if overlap:
        raise ValueError(f"train/validation sets overlap on {len(overlap)} example ids")
    evaluate = val_metrics_fn or (lambda p, step: evaluate_model(p, val_ds, cfg.batch_size))

    record = RunRecord(seed=seed)
    shuffle_rng = np.random.default_rng((seed, 10))
    dropout_rng = np.random.default_rng((seed, 11))
    state = AdamState()
    optimizer_tensors = _classifier_tensors(params)

    total_steps = cfg.num_epochs * _steps_per_epoch(len(train_ds), cfg)
    accum = cfg.gradient_accumulation_steps
    best_loss = math.inf
    best_arrays = None
    bad_evals = 0
    opt_step = 0
    stop = False

    def run_eval() -> None:
        nonlocal best_loss, best_arrays, bad_evals, stop
        val_loss, f1s = evaluate(params, opt_step)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at step {opt_step}")
        record.eval_history.append((opt_step, val_loss, f1s))
        if val_loss < best_loss:
            best_loss = val_loss
            best_arrays = params.clone_arrays()
            record.best_checkpoint_step = opt_step
            bad_evals = 0
        else:
            bad_evals += 1
            if bad_evals >= cfg.early_stop_patience_evals:
                record.stopped_early = True
                stop = True

    for _ in range(cfg.num_epochs):
        pending = 0
        for idx in _micro_batches(len(train_ds), cfg.batch_size, shuffle_rng):
            loss = _batch_loss(params, train_ds, idx, train_mode=True, rng=dropout_rng)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at step {opt_step}")
            scaled = loss / accum if accum > 1 else loss
            scaled.backward()
            pending += 1
            if pending == accum:
                adam_step(optimizer_tensors, state, lr_at(opt_step, total_steps, cfg), cfg)
                opt_step += 1
                pending = 0
                if opt_step % cfg.eval_every_batches == 0:
                    run_eval()
                    if stop:
                        break
        else:
            if pending:  # flush a partial accumulation window at epoch end
                adam_step(optimizer_tensors, state, lr_at(opt_step, total_steps, cfg), cfg)
                opt_step += 1
            continue
        break

    if not stop and (not record.eval_history or record.eval_history[-1][0] != opt_step):
        run_eval()

    if best_arrays is not None:
        params.load_arrays(best_arrays)
    return params, record


def lm_finetune(params: md.ModelParams, corpus: list, vocab: tok.Vocab, cfg: TrainConfig,
                seed: int, max_len: int, mask_prob: float = 0.15) -> md.ModelParams:
    """Masked-LM training of the encoder; classification heads stay untouched.

    Reuses the classification hyperparameters (epochs, learning rate,
    schedule). Heads are not part of the masked-LM graph and are excluded
    from the optimizer, so their bits are identical before and after.
    """
    if not params.has_mlm_head:
        raise ValueError("lm_finetune needs a model with an MLM head")
    if not corpus:
        raise ValueError("empty corpus for the LM stage")
    encoded = [tok.encode(vocab, text, max_len) for text in corpus]
    lm_tensors = {
        n: t for n, t in params.tensors.items()
        if not n.startswith("head.")
    }
    state = AdamState()
    shuffle_rng = np.random.default_rng((seed, 20))
    dropout_rng = np.random.default_rng((seed, 21))
    n = len(encoded)
    total_steps = cfg.num_epochs * _steps_per_epoch(n, cfg)
    accum = cfg.gradient_accumulation_steps
    opt_step = 0
    for epoch in range(cfg.num_epochs):
        pending = 0
        for idx in _micro_batches(n, cfg.batch_size, shuffle_rng):
            masked, labels = [], []
            for j in idx:
                m, lab = tok.mask_for_mlm(vocab, encoded[j], rng_seed=(seed, 22, epoch, int(j)), mask_prob=mask_prob)
                masked.append(m)
                labels.append(lab)
            ids, attn = md.stack_batch(masked)
            logits = md.mlm_forward(params, ids, attn, train_mode=True, rng=dropout_rng)
            loss = obj.mlm_loss(logits, np.asarray(labels))
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite masked-LM loss at step {opt_step}")
            if loss.requires_grad:  # a batch with nothing masked contributes no gradient
                scaled = loss / accum if accum > 1 else loss
                scaled.backward()
            pending += 1
            if pending == accum:
                adam_step(lm_tensors, state, lr_at(opt_step, total_steps, cfg), cfg)
                opt_step += 1
                pending = 0
        if pending:
            adam_step(lm_tensors, state, lr_at(opt_step, total_steps, cfg), cfg)
            opt_step += 1
    return params


def mlm_top1_accuracy(params: md.ModelParams, corpus: list, vocab: tok.Vocab, max_len: int,
                      mask_prob: float = 0.15, seed: int = 0) -> float:
    """Fraction of masked positions whose top-1 prediction is the original id."""
    hits = total = 0
    with ad.no_grad():
        for j, text in enumerate(corpus):
            enc = tok.encode(vocab, text, max_len)
            masked, labels = tok.mask_for_mlm(vocab, enc, rng_seed=(seed, 23, j), mask_prob=mask_prob)
            labels = np.asarray(labels)
            if (labels == tok.IGNORE_INDEX).all():
                continue
            ids, attn = md.stack_batch([masked])
            logits = md.mlm_forward(params, ids, attn).data[0]
            picks = logits.argmax(axis=-1)
            chosen = labels != tok.IGNORE_INDEX
            hits += int((picks[chosen] == labels[chosen]).sum())
            total += int(chosen.sum())
    return hits / total if total else 0.0


def ensemble_predict(per_seed_labels) -> np.ndarray:
    """Per-example majority vote over seeds; even-count ties go to 0."""
    votes = np.asarray(per_seed_labels, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[0] < 1:
        raise ValueError(f"expected a (seeds, examples) matrix, got shape {votes.shape}")
    if not np.isin(votes, (0, 1)).all():
        raise ValueError("votes must be 0/1")
    n_seeds = votes.shape[0]
    return (2 * votes.sum(axis=0) > n_seeds).astype(np.int64)


@dataclass
class ExperimentResult:
    environment: str
    seeds: tuple
    records: dict  # seed -> {model_key: RunRecord}; model_key is task name or "mtl"
    per_seed_preds: dict  # task -> (n_seeds, n_val) array
    ensemble_preds: dict  # task -> (n_val,) array
    val_ids: list
    val_gold: dict  # task -> (n_val,) array
    models: dict  # seed -> {model_key: ModelParams}

    def metrics(self, averaging: str = "macro") -> dict:
        return {
            t: mx.score(self.ensemble_preds[t], self.val_gold[t], averaging)
            for t in dt.TASKS
        }

    def seed_metrics(self, averaging: str = "macro") -> dict:
        out = {}
        for pos, seed in enumerate(self.seeds):
            out[seed] = {
                t: mx.score(self.per_seed_preds[t][pos], self.val_gold[t], averaging)
                for t in dt.TASKS
            }
        return out


def run_experiment(cfg: TrainConfig, examples: list, vocab: tok.Vocab,
                   enc_cfg: md.EncoderConfig, max_len: int | None = None,
                   split_ratio: float = 0.8) -> ExperimentResult:
    """Run the configured environment end to end over every seed.

    Single-task mode trains three independent models per seed (one per
    task); multitask mode trains one. With ``lm_stage`` the encoder is
    first fine-tuned with masked language modeling on the training texts,
    then classification heads are freshly initialized and classification
    training starts from the adapted encoder.
    """
    max_len = max_len or enc_cfg.max_seq_len
    train_ex, val_ex = dt.split(examples, split_ratio, cfg.split_seed)
    train_ds = dt.encode_examples(vocab, train_ex, max_len)
    val_ds = dt.encode_examples(vocab, val_ex, max_len)
    train_texts = [ex.text for ex in train_ex]

    records: dict = {}
    models: dict = {}
    preds_by_task: dict = {t: [] for t in dt.TASKS}
    for seed in cfg.seeds:
        records[seed] = {}
        models[seed] = {}
        lm_encoder_arrays = None
        if cfg.lm_stage:
            carrier = md.init_model(enc_cfg, md.MTL, with_mlm_head=True, seed=seed)
            lm_finetune(carrier, train_texts, vocab, cfg, seed, max_len)
            lm_encoder_arrays = {
                n: carrier.tensors[n].data.copy() for n in carrier.encoder_tensor_names()
            }

        if cfg.environment == md.MTL:
            params = md.init_model(enc_cfg, md.MTL, seed=seed)
            if lm_encoder_arrays is not None:
                params.load_arrays(lm_encoder_arrays)
                md.reinit_heads(params, seed)
            params, record = train_one(params, train_ds, val_ds, cfg, seed)
            records[seed]["mtl"] = record
            models[seed]["mtl"] = params
            preds = predict_dataset(params, val_ds, cfg.batch_size)
            for t in dt.TASKS:
                preds_by_task[t].append(preds[t])
        else:
            for t in dt.TASKS:
                params = md.init_model(enc_cfg, md.STL, task=t, seed=seed)
                if lm_encoder_arrays is not None:
                    params.load_arrays(lm_encoder_arrays)
                    md.reinit_heads(params, seed)
                params, record = train_one(params, train_ds, val_ds, cfg, seed)
                records[seed][t] = record
                models[seed][t] = params
                preds_by_task[t].append(predict_dataset(params, val_ds, cfg.batch_size)[t])
        logger.info("seed %d done (%s)", seed, cfg.environment_label)

    per_seed = {t: np.stack(preds_by_task[t]) for t in dt.TASKS}
    return ExperimentResult(
        environment=cfg.environment_label,
        seeds=cfg.seeds,
        records=records,
        per_seed_preds=per_seed,
        ensemble_preds={t: ensemble_predict(per_seed[t]) for t in dt.TASKS},
        val_ids=list(val_ds.example_ids),
        val_gold={t: val_ds.labels[t] for t in dt.TASKS},
        models=models,
    )
