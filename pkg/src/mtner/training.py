"""Training loop, evaluation and the ablation / loss-weight experiment drivers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import build, dump_kv, load_kv
from .corpus import Sentence, Vocab, delinearize, linearize_targets, split_corpus
from .losses import combined_loss, entity_nll, focal_relation_loss
from .metrics import Metrics, score_mentions
from .model import ModelConfig, MultiTaskNER
from .optim import clip_grad_norm, make_optimizer
from .relgrid import build_grid

log = logging.getLogger(__name__)

DEFAULT_W_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# (name, use_rp, use_tra, use_eta) in reporting order
ABLATION_ARMS = (
    ("Baseline", False, False, False),
    ("+RP&TRA", True, True, False),
    ("+RP&ETA", True, False, True),
    ("+RP&TRA&ETA", True, True, True),
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    w: float = 0.3
    alpha: float = 5.0
    tau: float = 1.0
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    dev_fraction: float = 0.1
    relation_reduction: str = "mean"
    eval_every: int = 1
    max_decode_len: Optional[int] = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if self.alpha <= 0 or self.tau < 0:
            raise ValueError(f"need alpha > 0 and tau >= 0, got {self.alpha}, {self.tau}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, eval_every >= 1 required")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")

    def to_text(self) -> str:
        return dump_kv(self)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        values = load_kv(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build(cls, values, strict=False)


def sub_seed(seed: int, name: str) -> int:
    """Stable per-purpose seed derived from the run seed."""
    return zlib.crc32(f"{seed}:{name}".encode())


def parameter_hash(model: MultiTaskNER) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class Example:
    sentence: Sentence
    ids: list
    target: list
    grid: object


def prepare(corpus: Sequence[Sentence], vocab: Vocab, n_types: int) -> list:
    return [Example(s, vocab.encode(s.tokens), linearize_targets(s, n_types), build_grid(s))
            for s in corpus]


def example_loss(model: MultiTaskNER, ex: Example, cfg: TrainConfig) -> tuple:
    probs, rel_logits = model.forward_teacher_forced(ex.ids, ex.target)
    l_ent = entity_nll(probs, ex.target)
    l_rel = None
    if rel_logits is not None:
        l_rel = focal_relation_loss(rel_logits, ex.grid, cfg.alpha, cfg.tau, cfg.relation_reduction)
    return combined_loss(l_ent, l_rel, cfg.w), l_ent, l_rel


def predict(model: MultiTaskNER, examples: Sequence[Example], max_len: Optional[int] = None) -> tuple:
    """Greedy-decode and parse each example; returns (mentions per sentence, discarded runs)."""
    n_types = model.cfg.n_types
    preds, discarded = [], 0
    for ex in examples:
        seq = model.greedy_generate(ex.ids, max_len)
        mentions, bad = delinearize(seq, len(ex.ids), n_types)
        preds.append(mentions)
        discarded += bad
    return preds, discarded


def relation_accuracy(model: MultiTaskNER, examples: Sequence[Example]) -> Optional[float]:
    if not model.cfg.use_rp or not examples:
        return None
    right = total = 0
    with T.no_grad():
        for ex in examples:
            logits = model.relation_logits(model.encode(ex.ids))
            pred = np.argmax(logits.data, axis=-1)
            right += int((pred == ex.grid.labels).sum())
            total += pred.size
    return right / total


def evaluate_examples(model: MultiTaskNER, examples: Sequence[Example],
                      max_len: Optional[int] = None) -> Metrics:
    preds, discarded = predict(model, examples, max_len)
    m = score_mentions([ex.sentence.mentions for ex in examples], preds)
    m.n_discarded = discarded
    m.relation_accuracy = relation_accuracy(model, examples)
    return m


def evaluate(model: MultiTaskNER, corpus: Sequence[Sentence], vocab: Vocab,
             max_len: Optional[int] = None) -> Metrics:
    return evaluate_examples(model, prepare(corpus, vocab, model.cfg.n_types), max_len)


def train(train_set: Sequence[Sentence], model: MultiTaskNER, cfg: TrainConfig, vocab: Vocab,
          dev_set: Optional[Sequence[Sentence]] = None,
          on_epoch: Optional[Callable[[dict], bool]] = None) -> tuple:
    """Fit ``model`` in place; returns ``(model, per-epoch history)``.

    Without ``dev_set`` a seeded ``dev_fraction`` of ``train_set`` is held
    out. The parameters with the best dev F1 (first one on ties) are
    restored at the end. ``on_epoch`` sees each epoch record and may
    return True to stop training after it.
    """
    if dev_set is None:
        train_set, dev_set = split_corpus(train_set, sub_seed(cfg.seed, "split"), cfg.dev_fraction)
    n_types = model.cfg.n_types
    train_ex = prepare(train_set, vocab, n_types)
    dev_ex = prepare(dev_set, vocab, n_types)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.weight_decay)
    order_rng = np.random.default_rng(sub_seed(cfg.seed, "shuffle"))

    steps_per_epoch = -(-len(train_ex) // cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    step = 0

    history = []
    best_f1, best_state = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_ex))
        tot = ent = rel = 0.0
        opt.zero_grad()
        for pos, i in enumerate(order):
            ex = train_ex[i]
            try:
                loss, l_ent, l_rel = example_loss(model, ex, cfg)
                (loss / cfg.batch_size).backward()
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, sentence {int(i)}: {exc}") from exc
            tot += loss.item()
            ent += l_ent.item()
            rel += l_rel.item() if l_rel is not None else 0.0
            if (pos + 1) % cfg.batch_size == 0 or pos + 1 == len(order):
                if cfg.grad_clip:
                    clip_grad_norm(params, cfg.grad_clip)
                if cfg.lr_schedule == "linear":
                    opt.lr = cfg.lr * (1 - step / total_steps)
                opt.step()
                step += 1
                opt.zero_grad()
        n = max(len(train_ex), 1)
        record = {"epoch": epoch, "loss": tot / n, "entity_loss": ent / n, "relation_loss": rel / n}
        if dev_ex and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            dev = evaluate_examples(model, dev_ex, cfg.max_decode_len)
            record["dev"] = dev.final()
            if dev.f1 > best_f1:
                best_f1, best_state = dev.f1, model.state_dict()
        history.append(record)
        log.info("epoch %d loss %.4f dev %s", epoch, record["loss"], record.get("dev"))
        if on_epoch is not None and on_epoch(record):
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


# -- experiment drivers -----------------------------------------------------------

def metrics_document(run_id: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     history: list, final: Metrics) -> dict:
    return {
        "run_id": run_id,
        "config": {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)},
        "per_epoch": history,
        "final": final.final(),
    }


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_once(train_set, dev_set, vocab, model_cfg: ModelConfig, train_cfg: TrainConfig,
             type_weights=None, run_id: str = "run") -> dict:
    """Build, train and score one model; returns its metrics document."""
    model = MultiTaskNER(model_cfg, type_weights, seed=sub_seed(train_cfg.seed, "init"))
    model, history = train(train_set, model, train_cfg, vocab, dev_set)
    final = evaluate(model, dev_set, vocab, train_cfg.max_decode_len)
    return metrics_document(run_id, model_cfg, train_cfg, history, final)


def _run_job(job):
    return run_once(*job)


def _map(jobs: list, n_jobs: int) -> list:
    if n_jobs > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(n_jobs, len(jobs))) as pool:
            return pool.map(_run_job, jobs)
    return [_run_job(j) for j in jobs]


def run_ablation(train_set, dev_set, vocab, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 type_weights=None, seeds: Sequence[int] = (0,), jobs: int = 1) -> list:
    """Train the four ablation arms under identical data, seeds and hyperparameters."""
    jobs_list = []
    for name, rp, tra, eta in ABLATION_ARMS:
        mc = dataclasses.replace(model_cfg, use_rp=rp, use_tra=tra, use_eta=eta)
        for seed in seeds:
            tc = dataclasses.replace(train_cfg, seed=seed)
            jobs_list.append((train_set, dev_set, vocab, mc, tc, type_weights, f"{name}/seed{seed}"))
    docs = _map(jobs_list, jobs)
    rows = []
    for k, (name, rp, tra, eta) in enumerate(ABLATION_ARMS):
        runs = docs[k * len(seeds):(k + 1) * len(seeds)]
        rows.append({
            "name": name,
            "use_rp": rp, "use_tra": tra, "use_eta": eta,
            "seeds": list(seeds),
            "median_f1": statistics.median(r["final"]["f1"] for r in runs),
            "median_boundary_f1": statistics.median(r["final"]["boundary_f1"] for r in runs),
            "median_relation_accuracy": (statistics.median(r["final"]["relation_accuracy"] for r in runs)
                                         if rp else None),
            "runs": runs,
        })
    return rows


def sweep_w(train_set, dev_set, vocab, model_cfg: ModelConfig, train_cfg: TrainConfig,
            w_values: Sequence[float] = DEFAULT_W_GRID, type_weights=None, jobs: int = 1) -> list:
    """One full training per loss weight; everything else fixed."""
    if not len(w_values):
        raise ValueError("w_values must be non-empty")
    jobs_list = [(train_set, dev_set, vocab, model_cfg, dataclasses.replace(train_cfg, w=float(w)),
                  type_weights, f"w={w}") for w in w_values]
    docs = _map(jobs_list, jobs)
    return [{"w": float(w), **doc} for w, doc in zip(w_values, docs)]


def format_table(rows: list, key: str = "name") -> str:
    """Aligned plain-text table of F1 / boundary F1 / relation accuracy."""
    def pct(v):
        return "-" if v is None else f"{100 * v:6.2f}"

    header = f"{key:<14} {'F1':>7} {'BndF1':>7} {'RelAcc':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        if "median_f1" in r:
            f1, bf1, ra = r["median_f1"], r["median_boundary_f1"], r["median_relation_accuracy"]
        else:
            f1, bf1, ra = r["final"]["f1"], r["final"]["boundary_f1"], r["final"]["relation_accuracy"]
        lines.append(f"{str(r[key]):<14} {pct(f1):>7} {pct(bf1):>7} {pct(ra):>7}")
    return "\n".join(lines) + "\n"
