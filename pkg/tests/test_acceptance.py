"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and immediately, when run with ``-s``). Tolerances and budgets are the
stated ones; a miss fails the test.
"""

import dataclasses
import json
import random
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, Toy
from mtner import tensor as T
from mtner.cli import main
from mtner.corpus import (
    SynthConfig,
    build_vocab,
    delinearize,
    generate_synthetic,
    linearize_targets,
    mention_order_key,
    sentence_category,
    standard_corpus,
)
from mtner.gradcheck import gradient_suite
from mtner.losses import combined_loss, focal_relation_loss
from mtner.metrics import corrupt_types, score_mentions
from mtner.model import ModelConfig, MultiTaskNER
from mtner.relgrid import RelationLabel, build_grid
from mtner.training import (
    DEFAULT_W_GRID,
    Example,
    TrainConfig,
    example_loss,
    format_table,
    predict,
    prepare,
    run_ablation,
    train,
)
from mtner.typebase import lexicon_from_corpus
from test_relgrid import ACHING, brute_force_grid, random_sentence

# standard ablation protocol
ABLATION_SEEDS = (1, 2, 3)
ABLATION_MODEL = dict(d_h=64)
ABLATION_TRAIN = dict(epochs=7, batch_size=1, lr=1e-3, lr_schedule="linear")


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def test_1_gradient_suite():
    start = time.perf_counter()
    errors = gradient_suite(d_h=8)
    elapsed = time.perf_counter() - start
    required = {"cln", "relation_mlp", "conv", "type_mlp", "attention", "pointer_eos"}
    worst = max(errors.values())
    ok = required <= set(errors) and worst <= 1e-4 and elapsed < 120
    report(1, ok, f"max rel err {worst:.2e} over {len(errors)} groups in {elapsed:.1f}s")
    assert required <= set(errors)
    assert worst <= 1e-4, errors
    assert elapsed < 120


def test_2_round_trip():
    corpus = generate_synthetic(SynthConfig(n_sentences=1000), seed=11)
    categories = {sentence_category(s) for s in corpus}
    n_types = 4
    mismatches = 0
    for s in corpus:
        mentions, discarded = delinearize(linearize_targets(s, n_types), len(s), n_types)
        if discarded or sorted(mentions, key=mention_order_key) != sorted(s.mentions, key=mention_order_key):
            mismatches += 1
    ok = mismatches == 0 and {"flat", "nested", "discontinuous"} <= categories
    report(2, ok, f"{mismatches} mismatches on {len(corpus)} sentences, categories {sorted(map(str, categories))}")
    assert {"flat", "nested", "discontinuous"} <= categories
    assert mismatches == 0


def test_3_relation_grid_oracle():
    rng = random.Random(5)
    sentences = [random_sentence(rng, max_mentions=3) for _ in range(500)]
    overlapping = sum(1 for s in sentences
                      if any(set(a.positions) & set(b.positions)
                             for i, a in enumerate(s.mentions) for b in s.mentions[i + 1:]))
    bad = sum(not np.array_equal(build_grid(s).labels, brute_force_grid(s)) for s in sentences)
    g = build_grid(ACHING)
    labelled = {(i, j) for i in range(len(ACHING)) for j in range(i, len(ACHING))
                if g[i, j] != RelationLabel.NONE}
    expected = {(3, 8): RelationLabel.BEGIN_END, (3, 4): RelationLabel.STAR_INSIDE,
                (4, 8): RelationLabel.STAR_INSIDE}
    aching_ok = labelled == set(expected) and all(g[i, j] == lab for (i, j), lab in expected.items())
    ok = bad == 0 and aching_ok
    report(3, ok, f"{bad}/500 grids differ ({overlapping} with overlaps); example pairs {sorted(labelled)}")
    assert bad == 0
    assert aching_ok


def test_4_reduction_identities():
    rng = np.random.default_rng(0)
    focal_err = 0.0
    for _ in range(20):
        logits = rng.normal(size=(5, 5, 3)) * 4
        gold = rng.integers(0, 3, size=(5, 5))
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        ce = -np.take_along_axis(logp, gold[..., None], -1).mean()
        focal_err = max(focal_err, abs(focal_relation_loss(T.Tensor(logits), gold, 1.0, 0.0).item() - ce))

    toy = Toy(n_sentences=20, seed=4)
    full = toy.model(seed=1, d_h=16, n_layers_enc=2, n_layers_dec=2)
    full.mask_banks = True
    base = MultiTaskNER(dataclasses.replace(full.cfg, use_rp=False, use_tra=False, use_eta=False),
                        toy.weights, seed=2)
    base.load_state_dict({k: v for k, v in full.state_dict().items()
                          if not k.startswith(("cln", "rel_", "type_proj"))})
    mask_err = 0.0
    for s in toy.corpus:
        gold = linearize_targets(s, full.cfg.n_types)
        a, _ = full.forward_teacher_forced(toy.ids(s), gold)
        b, _ = base.forward_teacher_forced(toy.ids(s), gold)
        mask_err = max(mask_err, float(np.abs(a.data - b.data).max()))

    cln = full.cln
    cln.w_alpha.data[:] = 0
    cln.b_alpha.data[:] = 1
    cln.w_beta.data[:] = 0
    cln.b_beta.data[:] = 0
    h = rng.normal(size=(6, 16)) * 3
    mu = h.mean(-1, keepdims=True)
    ln = (h - mu) / (np.sqrt(((h - mu) ** 2).mean(-1, keepdims=True)) + full.cfg.eps_ln)
    grid = cln.grid(T.Tensor(h)).data
    cln_err = float(np.abs(grid - ln[None, :, :]).max())

    ok = focal_err <= 1e-12 and mask_err <= 1e-6 and cln_err <= 1e-10
    report(4, ok, f"focal vs CE {focal_err:.1e}, masked vs baseline {mask_err:.1e}, CLN vs LN {cln_err:.1e}")
    assert focal_err <= 1e-12
    assert mask_err <= 1e-6
    assert cln_err <= 1e-10


def test_5_overfit():
    cfg = SynthConfig(n_sentences=10)
    corpus = generate_synthetic(cfg, seed=3)
    vocab = build_vocab(corpus)
    weights = lexicon_from_corpus(corpus, cfg.type_names()).weight_matrix(vocab)
    model = MultiTaskNER(ModelConfig(vocab_size=len(vocab), n_types=cfg.n_types, d_h=32), weights, seed=1)
    tc = TrainConfig(epochs=500, batch_size=1, lr=1e-3, eval_every=5)
    start = time.perf_counter()
    model, history = train(corpus, model, tc, vocab, dev_set=corpus,
                           on_epoch=lambda r: r.get("dev", {}).get("f1", 0.0) == 1.0)
    elapsed = time.perf_counter() - start
    preds, _ = predict(model, prepare(corpus, vocab, cfg.n_types))
    f1 = score_mentions([s.mentions for s in corpus], preds).f1
    ok = f1 == 1.0 and elapsed < 300
    report(5, ok, f"train F1 {f1:.3f} after {len(history)} epochs in {elapsed:.1f}s")
    assert f1 == 1.0
    assert elapsed < 300


@pytest.fixture(scope="module")
def standard():
    train_set, dev_set, cfg = standard_corpus()
    vocab = build_vocab(train_set + dev_set)
    weights = lexicon_from_corpus(train_set, cfg.type_names()).weight_matrix(vocab)
    return train_set, dev_set, cfg, vocab, weights


def test_6_directional_ablation(standard, tmp_path):
    train_set, dev_set, cfg, vocab, weights = standard
    mc = ModelConfig(vocab_size=len(vocab), n_types=cfg.n_types, **ABLATION_MODEL)
    tc = TrainConfig(**ABLATION_TRAIN)
    start = time.perf_counter()
    rows = run_ablation(train_set, dev_set, vocab, mc, tc, weights, seeds=ABLATION_SEEDS)
    elapsed = time.perf_counter() - start
    (tmp_path / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    print()
    print(format_table(rows))
    f1 = {r["name"]: 100 * r["median_f1"] for r in rows}
    base, full = f1["Baseline"], f1["+RP&TRA&ETA"]
    checks = {
        "full >= Baseline": full >= base,
        "+RP&TRA >= Baseline-0.5": f1["+RP&TRA"] >= base - 0.5,
        "+RP&ETA >= Baseline-0.5": f1["+RP&ETA"] >= base - 0.5,
        "full-Baseline >= +0.3": full - base >= 0.3,
        "runtime < 30min": elapsed < 1800,
    }
    per_seed = {r["name"]: [round(100 * x["final"]["f1"], 2) for x in r["runs"]] for r in rows}
    detail = ", ".join(f"{k} {v:.2f}" for k, v in f1.items())
    failed = [k for k, v in checks.items() if not v]
    report(6, not failed, f"median dev F1: {detail}; per seed {per_seed}; {elapsed / 60:.1f} min"
           + (f"; failed: {failed}" if failed else ""))
    assert not failed, (failed, f1)


def test_7_boundary_metric(standard):
    train_set, dev_set, cfg, vocab, weights = standard
    mc = ModelConfig(vocab_size=len(vocab), n_types=cfg.n_types, d_h=32)
    model = MultiTaskNER(mc, weights, seed=7)
    model, _ = train(train_set[:1000], model, TrainConfig(epochs=6, batch_size=1, lr=1e-3), vocab, dev_set)
    examples = prepare(dev_set, vocab, cfg.n_types)
    preds, _ = predict(model, examples)
    gold = [s.mentions for s in dev_set]
    clean = score_mentions(gold, preds)
    rate = 0.5
    noisy = score_mentions(gold, corrupt_types(gold, preds, rate, cfg.n_types, seed=0))
    drop = 100 * (clean.f1 - noisy.f1)
    expected = 100 * rate * clean.f1
    ok = noisy.boundary_f1 == clean.boundary_f1 and abs(drop - expected) <= 5
    report(7, ok, f"entity F1 {100 * clean.f1:.2f} -> {100 * noisy.f1:.2f} (drop {drop:.2f} pts, "
                  f"expected {expected:.2f}), boundary F1 {100 * clean.boundary_f1:.2f} -> "
                  f"{100 * noisy.boundary_f1:.2f}")
    assert noisy.boundary_f1 == clean.boundary_f1
    assert abs(drop - expected) <= 5


def _data_flags(d):
    return ["--corpus", str(d / "corpus.jsonl"), "--types", str(d / "types.txt"),
            "--lexicon", str(d / "lexicon.tsv")]


def test_8_w_sweep(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--sentences", "60", "--seed", "1", "--out", str(data)]) == 0
    out = tmp_path / "sweep"
    rc = main(["sweep-w", *_data_flags(data), "--d-h", "8", "--epochs", "1", "--batch-size", "4",
               "--out", str(out)])
    files = sorted(p.name for p in out.iterdir())
    rows = json.loads((out / "sweep_w.json").read_text())
    grid_ok = [r["w"] for r in rows] == list(DEFAULT_W_GRID)

    toy = Toy(n_sentences=40, seed=9)
    model = toy.model(d_h=8)
    s = max(toy.corpus, key=lambda x: len(x.mentions))
    ex = Example(s, toy.ids(s), linearize_targets(s, 4), build_grid(s))
    losses = {w: example_loss(model, ex, TrainConfig(w=w))[0].item() for w in (0.0, 0.25, 0.9)}
    slope = (losses[0.25] - losses[0.0]) / 0.25
    lin_err = abs(losses[0.0] + 0.9 * slope - losses[0.9])
    arith = abs(combined_loss(2.0, 4.0, 0.3) - 3.2)
    ok = rc == 0 and grid_ok and files.count("sweep_w.json") == 1 and lin_err <= 1e-12 and arith <= 1e-15
    report(8, ok, f"{len(rows)} w points in one file, linearity error {lin_err:.1e}")
    assert rc == 0 and grid_ok
    assert lin_err <= 1e-12 and arith <= 1e-15


def test_9_determinism(tmp_path, capsys):
    def run_all(root):
        data = root / "data"
        assert main(["gen-data", "--sentences", "50", "--seed", "4", "--out", str(data)]) == 0
        tiny = ["--d-h", "8", "--epochs", "2", "--batch-size", "4", "--seed", "6"]
        assert main(["train", *_data_flags(data), *tiny, "--out", str(root / "train")]) == 0
        assert main(["eval", "--model", str(root / "train"), "--corpus", str(data / "corpus.jsonl"),
                     "--out", str(root / "eval")]) == 0
        assert main(["ablate", *_data_flags(data), *tiny, "--epochs", "1", "--out", str(root / "ablate")]) == 0
        assert main(["sweep-w", *_data_flags(data), *tiny, "--epochs", "1", "--w-values", "0", "0.3",
                     "--out", str(root / "sweep")]) == 0
        assert main(["grad-check", "--probes", "4"]) == 0
        return capsys.readouterr().out

    outs = [run_all(tmp_path / f"r{k}") for k in range(2)]
    artifacts = ["data/corpus.jsonl", "data/lexicon.tsv", "train/metrics.json", "train/model.ckpt",
                 "eval/eval.json", "ablate/ablation.json", "sweep/sweep_w.json"]
    differ = [a for a in artifacts
              if (tmp_path / "r0" / a).read_bytes() != (tmp_path / "r1" / a).read_bytes()]
    stdout_same = outs[0].replace("r0", "") == outs[1].replace("r1", "")
    ok = not differ and stdout_same
    report(9, ok, f"{len(artifacts) - len(differ)}/{len(artifacts)} artifacts byte-identical, "
                  f"stdout {'identical' if stdout_same else 'differs'}")
    assert not differ
    assert stdout_same
