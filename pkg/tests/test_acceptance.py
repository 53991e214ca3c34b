"""End-to-end acceptance checks; each test records one PASS/FAIL line.

The training-backed checks share session fixtures, so the whole module takes
on the order of an hour on one core.  Deselect with ``-m "not slow"``.
"""

from __future__ import annotations

import random
import time

import numpy as np
import pytest

from conftest import ALL_HEADS, gradcheck, tiny_batch, tiny_config
from lipidlm.analysis import make_decoy, make_rearranged
from lipidlm.chem import SmilesError, canonical_smiles, canonicalize, parse_smiles
from lipidlm.corpus import GenConfig, audit_record, generate_corpus, read_corpus, read_manifest
from lipidlm.model import forward, init_params, load_checkpoint, preset
from lipidlm.tokenizer import IGNORE_INDEX, MASK_ID, build_vocab, encode_single
from lipidlm.training import (FINETUNE_OVERRIDES, MaskingConfig, TaskDataset, compute_pearson,
                              compute_r2, finetune, pretrain, train_preset)

SINGLE_TASKS = ("mlm", "ntails", "connseq", "conntoken", "headtail")
PAIR_TASKS = ("mlm", "pair")
SCALING_SIZES = (500, 2500, 5000)


def record(acceptance, number: int, passed: bool, detail: str) -> None:
    acceptance[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    t0 = time.perf_counter()
    corpus_path, manifest_path = generate_corpus(GenConfig(), out)
    seconds = time.perf_counter() - t0
    records = read_corpus(corpus_path)
    return records, read_manifest(manifest_path), out, seconds


@pytest.fixture(scope="session")
def vocab(default_corpus):
    records, *_ = default_corpus
    return build_vocab(r.canonical_smiles for r in records)


@pytest.fixture(scope="session")
def single_run(default_corpus, vocab, tmp_path_factory):
    records, manifest, *_ = default_corpus
    t0 = time.perf_counter()
    res = pretrain(records, manifest, vocab, preset("desk"), SINGLE_TASKS, train_preset("desk"),
                   out_dir=tmp_path_factory.mktemp("single"))
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def pair_run(default_corpus, vocab, tmp_path_factory):
    records, manifest, *_ = default_corpus
    t0 = time.perf_counter()
    res = pretrain(records, manifest, vocab, preset("desk"), PAIR_TASKS, train_preset("desk"),
                   out_dir=tmp_path_factory.mktemp("pair"))
    return res, time.perf_counter() - t0


def finetune_data(default_corpus):
    records, manifest, *_ = default_corpus
    pos = {r.id: i for i, r in enumerate(records)}
    split = {k: [pos[i] for i in ids] for k, ids in manifest.items()}
    return [r.canonical_smiles for r in records], [r.synth_property for r in records], split


@pytest.fixture(scope="session")
def finetuned(default_corpus, single_run):
    smiles, values, split = finetune_data(default_corpus)
    t0 = time.perf_counter()
    res = finetune(single_run[0].bundle, smiles, values, train_preset("desk", **FINETUNE_OVERRIDES),
                   split=split)
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    cfg = tiny_config()
    assert cfg.n_layers == 1 and cfg.hidden == 16 and cfg.n_heads == 2 and cfg.vocab_size <= 32
    params = init_params(cfg, dtype=np.float64)
    worst = gradcheck(params, cfg, tiny_batch(cfg, T=8))
    seconds = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    passed = err < 1e-4 and seconds < 120 and set(cfg.heads) == set(ALL_HEADS)
    record(acceptance, 1, passed, f"max relative error {err:.2e} ({name}) < 1e-4; {seconds:.1f}s < 120s")
    assert passed


def test_masking_statistics(acceptance, default_corpus, vocab):
    t0 = time.perf_counter()
    records, *_ = default_corpus
    data = TaskDataset(records, vocab, ["mlm"], MaskingConfig(), seed=0)
    selected = maskable = masked = randomized = kept = 0
    for batch in data.batches(1, 256):
        sel = batch.labels["mlm"] != IGNORE_INDEX
        maskable += int((batch.clean_ids >= 5).sum())
        selected += int(sel.sum())
        after, before = batch.ids[sel], batch.clean_ids[sel]
        masked += int((after == MASK_ID).sum())
        kept += int((after == before).sum())
        randomized += int(((after != MASK_ID) & (after != before)).sum())
    seconds = time.perf_counter() - t0
    rate = selected / maskable
    fm, fr, fk = masked / selected, randomized / selected, kept / selected
    # a random replacement redraws the original token 1 time in n; undo that overlap
    n = len(vocab) - 5
    fr_adj = fr / (1 - 1 / n)
    fk_adj = fk - fr_adj / n
    passed = (maskable >= 100_000 and abs(rate - 0.15) <= 0.01 and abs(fm - 0.8) <= 0.02
              and abs(fr_adj - 0.1) <= 0.02 and abs(fk_adj - 0.1) <= 0.02 and seconds < 60)
    record(acceptance, 2, passed,
           f"{maskable} maskable tokens; selected {rate:.4f}; mask/random/keep "
           f"{fm:.4f}/{fr_adj:.4f}/{fk_adj:.4f}; {seconds:.1f}s < 60s")
    assert passed


def test_canonicalization_suite(acceptance, default_corpus):
    records, *_ = default_corpus
    t0 = time.perf_counter()
    sample = records[:1000]
    same = text_differs = distinct = valid = 0
    for i, rec in enumerate(sample):
        form = canonicalize(parse_smiles(rec.canonical_smiles))
        for seed in range(10):
            s = make_rearranged(form, seed * 1000 + i)
            same += canonical_smiles(s) == form.smiles
            text_differs += s != form.smiles
        decoy = make_decoy(form, i)
        try:
            other = canonical_smiles(decoy)
            valid += 1
            distinct += other != form.smiles
        except SmilesError:
            pass
    seconds = time.perf_counter() - t0
    passed = same == text_differs == 10_000 and valid == distinct == 1000 and seconds < 300
    record(acceptance, 3, passed,
           f"rearranged canonical-equal {same}/10000 (text-distinct {text_differs}); decoys valid "
           f"{valid}/1000, canonical-distinct {distinct}/1000; {seconds:.1f}s < 300s")
    assert passed


def test_label_audit(acceptance, default_corpus):
    records, _, _, gen_seconds = default_corpus
    t0 = time.perf_counter()
    failures = {r.id: p for r in records if (p := audit_record(r))}
    seconds = time.perf_counter() - t0
    passed = len(records) == 5000 and not failures and seconds < 300
    record(acceptance, 4, passed,
           f"{len(records) - len(failures)}/{len(records)} records match provenance; audit {seconds:.1f}s "
           f"< 300s (generation {gen_seconds:.1f}s)")
    assert passed, list(failures.items())[:3]


@pytest.mark.slow
def test_desk_pretraining(acceptance, single_run):
    res, seconds = single_run
    epochs = res.report.epochs
    first = epochs[0]["validation"]["loss"]["mlm"]
    last = epochs[-1]["validation"]["loss"]["mlm"]
    acc = res.report.summary["test"]["accuracy"]["mlm"]
    passed = acc >= 0.70 and last < first and seconds <= 1800 and len(epochs) == 10
    record(acceptance, 5, passed,
           f"held-out masked-token accuracy {acc:.4f} >= 0.70; validation MLM loss {first:.4f} -> "
           f"{last:.4f}; {seconds / 60:.1f} min <= 30 min")
    assert passed


@pytest.mark.slow
def test_secondary_tasks(acceptance, single_run, pair_run):
    single, s_seconds = single_run
    pair, p_seconds = pair_run
    acc = single.report.summary["test"]["accuracy"]
    pair_acc = pair.report.summary["test"]["accuracy"]["pair"]
    passed = acc["headtail"] >= 0.95 and acc["ntails"] >= 0.90 and pair_acc >= 0.90
    record(acceptance, 6, passed,
           f"held-out HeadTail {acc['headtail']:.4f} >= 0.95, NumTails {acc['ntails']:.4f} >= 0.90, "
           f"PairCls {pair_acc:.4f} >= 0.90 (pair model, {p_seconds / 60:.1f} min); reported only: "
           f"ConnSeq {acc['connseq']:.4f}, ConnToken per-token {acc['conntoken']:.4f} / "
           f"per-sequence {acc['conntoken_seq']:.4f}")
    assert passed


@pytest.mark.slow
def test_finetuning(acceptance, finetuned):
    res, seconds = finetuned
    s = res.report.summary
    passed = (s["best_r2"] >= 0.8 and s["best_pearson"] is not None and s["best_pearson"] >= 0.9
              and len(res.report.epochs) <= 100 and seconds <= 1200)
    record(acceptance, 7, passed,
           f"best validation R2 {s['best_r2']:.4f} >= 0.8 (epoch {s['best_epoch']}), best Pearson "
           f"{s['best_pearson']:.4f} >= 0.9; {len(res.report.epochs)} epochs, {seconds / 60:.1f} min "
           f"<= 20 min")
    assert passed


@pytest.mark.slow
def test_pretraining_speeds_up_finetuning(default_corpus, vocab, finetuned):
    res, _ = finetuned
    reach = next(e["epoch"] for e in res.report.epochs if e["validation"]["r2"] >= 0.5)
    smiles, values, split = finetune_data(default_corpus)
    seen = []

    class Enough(Exception):
        pass

    def watch(epoch):
        seen.append(epoch["validation"]["r2"])
        if epoch["epoch"] >= reach:
            raise Enough

    with pytest.raises(Enough):
        finetune(None, smiles, values, train_preset("desk", **FINETUNE_OVERRIDES), split=split,
                 vocab=vocab, model_cfg=preset("desk"), on_epoch=watch)
    assert max(seen) < 0.5, (reach, seen)


@pytest.mark.slow
def test_scaling_trend(acceptance, default_corpus, vocab, single_run, finetuned):
    records, manifest, *_ = default_corpus
    smiles, values, split = finetune_data(default_corpus)
    rows = []
    total = 0.0
    for n in SCALING_SIZES:
        if n == len(records):
            # the full-corpus point is the criterion-7 run: same pre-training, same fine-tuning
            rows.append((n, finetuned[0].report.summary["best_r2"]))
            total += single_run[1] + finetuned[1]
            continue
        t0 = time.perf_counter()
        keep = {r.id for r in records[:n]}
        sub = {k: [i for i in ids if i in keep] for k, ids in manifest.items()}
        pre = pretrain(records[:n], sub, vocab, preset("desk"), SINGLE_TASKS, train_preset("desk"))
        ft = finetune(pre.bundle, smiles, values, train_preset("desk", **FINETUNE_OVERRIDES), split=split)
        total += time.perf_counter() - t0
        rows.append((n, ft.report.summary["best_r2"]))
    drops = [a[1] - b[1] for a, b in zip(rows, rows[1:]) if b[1] < a[1]]
    passed = len(drops) <= 1 and all(d <= 0.05 for d in drops) and total <= 5400
    trend = ", ".join(f"{n}: {r2:.4f}" for n, r2 in rows)
    record(acceptance, 8, passed,
           f"best R2 by pre-training size {trend}; inversions {[round(d, 4) for d in drops]} "
           f"(at most one, <= 0.05); {total / 60:.1f} min <= 90 min")
    assert passed


def test_metric_exactness(acceptance):
    checks = [
        compute_r2([1, 2, 3], [1, 2, 3]) == 1.0,
        compute_r2([2, 2, 2], [1, 2, 3]) == 0.0,
        abs(compute_r2([1, 2, 2], [1, 2, 3]) - 0.5) <= 1e-12,
        abs(compute_pearson([1, 2, 4], [1, 2, 4]) - 1.0) <= 1e-12,
        abs(compute_pearson([-1, -2, -4], [1, 2, 4]) + 1.0) <= 1e-12,
    ]
    negative = compute_r2([3, 2, 1], [1, 2, 3])
    passed = all(checks) and abs(negative + 3.0) <= 1e-12
    record(acceptance, 9, passed,
           f"{sum(checks)}/{len(checks)} hand-computed values within 1e-12; R2 of reversed "
           f"prediction {negative:.1f} (negative values kept)")
    assert passed


@pytest.mark.slow
def test_determinism_and_persistence(acceptance, tmp_path):
    cfg = GenConfig(n_lipids=300, seed=21)
    a = generate_corpus(cfg, tmp_path / "a")
    b = generate_corpus(cfg, tmp_path / "b")
    corpus_same = all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    records, manifest = read_corpus(a[0]), read_manifest(a[1])
    vocab = build_vocab(r.canonical_smiles for r in records)
    runs = []
    for name in ("r1", "r2"):
        runs.append(pretrain(records, manifest, vocab, preset("desk"), SINGLE_TASKS,
                             train_preset("desk", epochs=2), out_dir=tmp_path / name))
    metrics_same = runs[0].report.trajectory() == runs[1].report.trajectory()
    ckpt_same = all((tmp_path / "r1" / "checkpoint" / f).read_bytes()
                    == (tmp_path / "r2" / "checkpoint" / f).read_bytes()
                    for f in ("params.bin", "manifest.json", "vocab.json"))
    loaded = load_checkpoint(tmp_path / "r1" / "checkpoint")
    encs = [encode_single(r.canonical_smiles, vocab) for r in records[:16]]
    x, _ = forward(runs[0].params, runs[0].cfg, encs)
    y, _ = forward(loaded.params, loaded.cfg, encs)
    forward_same = all(x[k].tobytes() == y[k].tobytes() for k in x)
    passed = corpus_same and metrics_same and ckpt_same and forward_same
    record(acceptance, 10, passed,
           f"corpus identical {corpus_same}, metric trajectories identical {metrics_same}, "
           f"checkpoints identical {ckpt_same}, save/load/forward bitwise {forward_same}")
    assert passed
