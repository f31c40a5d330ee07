"""Cross-entropy and distribution-alignment training.

The alignment objective adds ``lambda_align * JSD(P_full, P_detached)`` to the
cross-entropy of the full model.  Both forward passes share parameters and,
by default, gradients flow through both branches.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import McqInstance
from .metrics import EvalRecord, MetricReport, report
from .model import FusionModel, GraphBatch, ModelConfig, TextBatch, is_text_param, statement_tokens

log = logging.getLogger(__name__)

MODES = ("baseline_ce", "lkda")
STOP_GRADIENT = ("none", "full", "detached")
CHECKPOINT_FORMAT = "lkda-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "ce_loss", "align_loss", "train_acc", "dev_acc", "dev_fkg", "dev_clk")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_text: float = 1e-3
    lr_graph: float = 1e-3
    lambda_align: float = 1.0
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "lkda"
    jsd_weight: float = 0.5
    stop_gradient: str = "none"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.stop_gradient not in STOP_GRADIENT:
            raise ValueError(f"stop_gradient must be one of {STOP_GRADIENT}")
        if self.lambda_align < 0:
            raise ValueError("lambda_align must be >= 0")
        if self.lr_text <= 0 or self.lr_graph <= 0:
            raise ValueError("learning rates must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.epochs < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("epochs >= 0, batch_size > 0 and eval_every > 0 required")
        if not 0.0 < self.jsd_weight < 1.0:
            raise ValueError("jsd_weight must lie in (0, 1)")

    @property
    def effective_lambda(self) -> float:
        return self.lambda_align if self.mode == "lkda" else 0.0


# -------------------------------------------------------------------- losses


def ce_loss(scores: Tensor, gold) -> Tensor:
    """Mean of ``-log softmax(scores)[gold]`` over the rows of ``scores``."""
    if scores.values.ndim == 1:
        scores = ad.reshape(scores, (1, scores.shape[0]))
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    B, C = scores.shape
    if gold.shape != (B,) or gold.min() < 0 or gold.max() >= C:
        raise ad.ContractError(f"gold indices {gold.tolist()} invalid for {C} choices")
    logp = ad.log_softmax_rows(scores)
    picked = ad.gather_rows(ad.reshape(logp, (B * C, 1)), np.arange(B) * C + gold)
    return ad.scale(ad.sum(picked), -1.0 / B)


def jsd_loss(scores_p: Tensor, scores_q: Tensor, lam: float = 0.5) -> Tensor:
    """Mean weighted JSD between row-softmax distributions of two score matrices."""
    logp = ad.log_softmax_rows(scores_p)
    logq = ad.log_softmax_rows(scores_q)
    p, q = ad.exp(logp), ad.exp(logq)
    mix = ad.add(ad.scale(p, lam), ad.scale(q, 1.0 - lam))
    logm = ad.log(mix)
    kl_p = ad.sum(ad.mul(p, ad.sub(logp, logm)))
    kl_q = ad.sum(ad.mul(q, ad.sub(logq, logm)))
    B = scores_p.shape[0]
    return ad.scale(ad.add(ad.scale(kl_p, lam), ad.scale(kl_q, 1.0 - lam)), 1.0 / B)


def _detach(t: Tensor) -> Tensor:
    return Tensor(t.values)


def lkda_loss(model: FusionModel, instances: list[McqInstance], lambda_align: float,
              jsd_weight: float = 0.5, stop_gradient: str = "none", rng=None,
              align_grad: bool = True):
    """Total objective and its parts for a batch.

    Returns ``(total, parts)`` where ``parts`` holds the cross-entropy and
    alignment tensors plus both score matrices.  With ``align_grad=False`` the
    detached pass is evaluated off-tape (its value is only logged).
    """
    if lambda_align < 0:
        raise ad.ContractError("lambda_align must be >= 0")
    cfg = model.config
    graphs = GraphBatch.build([g for inst in instances for g in inst.subgraphs], cfg)
    C = instances[0].n_choices
    texts = TextBatch.build([statement_tokens(i, c) for i in instances for c in range(C)], cfg)
    full = model.forward(instances, graphs=graphs, texts=texts, rng=rng)
    gold = [inst.gold_index for inst in instances]
    ce = ce_loss(full.scores, gold)
    if align_grad:
        det = model.forward(instances, detached=True, graphs=graphs, rng=rng)
        sp, sq = full.scores, det.scores
        if stop_gradient == "full":
            sp = _detach(sp)
        elif stop_gradient == "detached":
            sq = _detach(sq)
        align = jsd_loss(sp, sq, jsd_weight)
        total = ad.add(ce, ad.scale(align, lambda_align))
    else:
        with ad.no_grad():
            det = model.forward(instances, detached=True, graphs=graphs)
            align = jsd_loss(full.scores, det.scores, jsd_weight)
        total = ce
    return total, {"ce": ce, "align": align, "full": full.scores, "detached": det.scores}


# ----------------------------------------------------------------- optimizer


class Adam:
    """Adam with one learning rate per parameter group."""

    def __init__(self, params: dict[str, Tensor], lrs: dict[str, float],
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            step = self.lrs[name] * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.values = p.values - step

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return math.sqrt(math.fsum(float(np.sum(p.grad * p.grad)) for p in params.values()
                               if p.grad is not None))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale gradients so their global norm is at most ``max_norm``; return the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------- evaluation


def evaluate(model: FusionModel, instances: list[McqInstance], chunk: int = 200) -> list[EvalRecord]:
    """Full and detached distributions for every instance (no tape)."""
    records = []
    with ad.no_grad():
        for lo in range(0, len(instances), chunk):
            part = instances[lo:lo + chunk]
            graphs = GraphBatch.build([g for inst in part for g in inst.subgraphs], model.config)
            full = model.forward(part, graphs=graphs).distributions()
            det = model.forward(part, detached=True, graphs=graphs).distributions()
            for inst, f, d in zip(part, full, det):
                records.append(EvalRecord(inst.gold_index, f.probabilities, d.probabilities))
    return records


def evaluate_report(model: FusionModel, instances, lam: float = 0.5) -> MetricReport:
    return report(evaluate(model, instances), lam)


# ------------------------------------------------------------------ training


@dataclass
class EpochLog:
    epoch: int
    ce_loss: float
    align_loss: float
    train_acc: float
    dev_acc: float | None = None
    dev_fkg: float | None = None
    dev_clk: float | None = None


@dataclass
class TrainLog:
    entries: list[EpochLog] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for e in self.entries:
            writer.writerow([_cell(getattr(e, c)) for c in LOG_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @property
    def last(self) -> EpochLog | None:
        return self.entries[-1] if self.entries else None


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def _copy_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.values.copy() for k, p in params.items()}


def _lr_groups(params: dict[str, Tensor], config: TrainConfig) -> dict[str, float]:
    return {k: (config.lr_text if is_text_param(k) else config.lr_graph) for k in params}


def train(config: TrainConfig, train_set: list[McqInstance], dev_set: list[McqInstance],
          model: FusionModel, state_path=None, resume: bool = False,
          stop_after: int | None = None):
    """Optimise ``model`` in place and return ``(model, TrainLog)``.

    On return the model holds the parameters with the best dev accuracy seen
    at an evaluation epoch (earliest wins ties).  When ``state_path`` is set,
    the full training state is written after every epoch; ``resume=True``
    continues from it.  ``stop_after`` ends the run early after that many
    epochs (used to exercise resumption).
    """
    config.validate()
    if not train_set:
        raise ValueError("empty training set")
    params = model.params
    opt = Adam(params, _lr_groups(params, config), config.beta1, config.beta2, config.eps)
    log_ = TrainLog()
    best_acc = -1.0
    best_params = _copy_params(params)
    start_epoch = 0
    if resume:
        if state_path is None:
            raise ValueError("resume requires state_path")
        state = load_train_state(state_path, model.config)
        for k, v in state["params"].items():
            params[k].values = v
        opt.load_state(state["optimizer"])
        log_ = state["log"]
        best_acc = state["best_acc"]
        best_params = state["best_params"]
        start_epoch = state["epoch"]

    lam = config.effective_lambda
    align_grad = config.mode == "lkda"
    n = len(train_set)
    for epoch in range(start_epoch, config.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        ce_sum = align_sum = 0.0
        correct = 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            rng = (np.random.default_rng([config.seed, epoch, b])
                   if model.config.dropout > 0 else None)
            total, parts = lkda_loss(model, batch, lam, config.jsd_weight, config.stop_gradient,
                                     rng=rng, align_grad=align_grad)
            value = total.item()
            if not math.isfinite(value) or not math.isfinite(parts["align"].item()):
                raise DivergenceError(epoch, b, f"total={value}, align={parts['align'].item()}")
            ad.zero_grads(params.values())
            total.backward()
            clip_gradients(params, config.grad_clip_norm)
            opt.step()
            ce_sum += parts["ce"].item() * len(batch)
            align_sum += parts["align"].item() * len(batch)
            pred = np.argmax(parts["full"].values, axis=1)
            correct += int(np.sum(pred == [inst.gold_index for inst in batch]))
        entry = EpochLog(epoch + 1, ce_sum / n, align_sum / n, correct / n)
        if (epoch + 1) % config.eval_every == 0 and dev_set:
            rep = evaluate_report(model, dev_set, config.jsd_weight)
            entry.dev_acc, entry.dev_fkg, entry.dev_clk = rep.accuracy_full, rep.f_kg, rep.c_lk
            if rep.accuracy_full > best_acc:
                best_acc = rep.accuracy_full
                best_params = _copy_params(params)
        log_.entries.append(entry)
        log.info("epoch %d ce=%.4f align=%.4f train_acc=%.3f dev_acc=%s dev_fkg=%s",
                 entry.epoch, entry.ce_loss, entry.align_loss, entry.train_acc,
                 entry.dev_acc, entry.dev_fkg)
        if state_path is not None:
            save_train_state(state_path, model, opt, log_, best_acc, best_params, epoch + 1)
    ad.zero_grads(params.values())
    if log_.entries and best_acc >= 0:
        for k, v in best_params.items():
            params[k].values = v.copy()
    return model, log_


# -------------------------------------------------------------- checkpoints


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _encode_arrays(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
            for k, v in sorted(arrays.items())}


def _decode_arrays(obj: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, v in obj.items():
        arr = np.asarray(v["values"], dtype=np.float64)
        shape = tuple(v["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"parameter {k}: {arr.size} values for shape {shape}")
        out[k] = arr.reshape(shape)
    return out


def save_checkpoint(path, model: FusionModel, train_config: TrainConfig | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "train_config": None if train_config is None else dataclasses.asdict(train_config),
        "params": _encode_arrays({k: p.values for k, p in model.params.items()}),
    }
    _atomic_write(path, json.dumps(doc, sort_keys=True))


def _read_doc(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an lkda checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} unsupported")
    return doc


def _model_config(doc: dict, expected: ModelConfig | None, path) -> ModelConfig:
    try:
        cfg = ModelConfig(**doc["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad model_config ({exc})") from None
    if expected is not None and cfg != expected:
        raise CheckpointError(f"{path}: model config {cfg} does not match expected {expected}")
    return cfg


def _check_shapes(arrays: dict[str, np.ndarray], cfg: ModelConfig, path) -> None:
    from .model import param_shapes

    shapes = param_shapes(cfg)
    if set(arrays) != set(shapes):
        raise CheckpointError(f"{path}: parameter names do not match the model config")
    for k, shape in shapes.items():
        if arrays[k].shape != shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {arrays[k].shape}, expected {shape}")


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(model, train_config)``; raises without returning partial state."""
    doc = _read_doc(path)
    cfg = _model_config(doc, expected, path)
    try:
        arrays = _decode_arrays(doc["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad parameter table ({exc})") from None
    _check_shapes(arrays, cfg, path)
    tc = doc.get("train_config")
    train_config = TrainConfig(**tc) if tc else None
    return FusionModel(cfg, {k: ad.parameter(v) for k, v in arrays.items()}), train_config


def save_train_state(path, model, opt: Adam, log_: TrainLog, best_acc, best_params, epoch) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "train_state",
        "epoch": epoch,
        "model_config": dataclasses.asdict(model.config),
        "params": _encode_arrays({k: p.values for k, p in model.params.items()}),
        "best_params": _encode_arrays(best_params),
        "best_acc": best_acc,
        "adam": {"t": opt.t, "m": _encode_arrays(opt.m), "v": _encode_arrays(opt.v)},
        "log": [dataclasses.asdict(e) for e in log_.entries],
    }
    _atomic_write(path, json.dumps(doc, sort_keys=True))


def load_train_state(path, expected: ModelConfig) -> dict:
    doc = _read_doc(path)
    if doc.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a training-state file")
    cfg = _model_config(doc, expected, path)
    try:
        params = _decode_arrays(doc["params"])
        best = _decode_arrays(doc["best_params"])
        adam = {"t": doc["adam"]["t"], "m": _decode_arrays(doc["adam"]["m"]),
                "v": _decode_arrays(doc["adam"]["v"])}
        entries = [EpochLog(**e) for e in doc["log"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad training state ({exc})") from None
    _check_shapes(params, cfg, path)
    return {"epoch": int(doc["epoch"]), "params": params, "best_params": best,
            "best_acc": float(doc["best_acc"]), "optimizer": adam, "log": TrainLog(entries)}
