from __future__ import annotations

import itertools

import pytest

from lipidlm.chem import MolGraph
from lipidlm.corpus import GenConfig, build_corpus, split_manifest

ALC_0315 = "CCCCCCC(CCCCCC)C(=O)OCCCCCCN(CCCCO)CCCCCCOC(=O)C(CCCCCC)CCCCCCCC"


def _atom_key(g: MolGraph, i: int):
    a = g.atoms[i]
    return (a.element, a.charge, a.aromatic, a.total_h)


def brute_isomorphic(g1: MolGraph, g2: MolGraph) -> bool:
    """Exhaustive permutation check; only sensible for a handful of atoms."""
    n = len(g1.atoms)
    if n != len(g2.atoms) or len(g1.bonds) != len(g2.bonds):
        return False
    bonds2 = {(min(b.a, b.b), max(b.a, b.b)): b.order for b in g2.bonds}
    for perm in itertools.permutations(range(n)):
        if any(_atom_key(g1, i) != _atom_key(g2, perm[i]) for i in range(n)):
            continue
        if all(bonds2.get((min(perm[b.a], perm[b.b]), max(perm[b.a], perm[b.b]))) == b.order
               for b in g1.bonds):
            return True
    return False


@pytest.fixture(scope="session")
def small_corpus():
    cfg = GenConfig(n_lipids=300, seed=11)
    records = build_corpus(cfg)
    return cfg, records, split_manifest([r.id for r in records], cfg.split, cfg.seed)


ALL_HEADS = ("mlm", "ntails", "connseq", "conntoken", "headtail", "pair", "regression")


def tiny_config(**overrides):
    from lipidlm.model import ModelConfig

    base = dict(n_layers=1, hidden=16, n_heads=2, ffn_dim=32, max_len=8, vocab_size=12,
                dropout=0.0, n_pos_classes=6, heads=ALL_HEADS, regression_dims=(8, 8),
                init_std=0.3, seed=3)
    return ModelConfig(**{**base, **overrides})


def tiny_batch(cfg, B: int = 3, T: int = 8, seed: int = 0):
    """Random ids with padding and labels for every head, including ignored positions."""
    import numpy as np

    from lipidlm.model import Batch
    from lipidlm.tokenizer import IGNORE_INDEX

    rng = np.random.default_rng(seed)
    lengths = rng.integers(T // 2, T + 1, size=B)
    lengths[0] = T
    mask = (np.arange(T)[None] < lengths[:, None]).astype(np.int64)
    ids = rng.integers(5, cfg.vocab_size, size=(B, T)) * mask
    segs = ((np.arange(T)[None] >= lengths[:, None] // 2) & (mask == 1)).astype(np.int64)
    tok = lambda k: np.where((mask == 1) & (rng.random((B, T)) < 0.7),
                             rng.integers(0, k, size=(B, T)), IGNORE_INDEX)
    mlm = tok(cfg.vocab_size)
    mlm[:, 1] = rng.integers(0, cfg.vocab_size, size=B)
    labels = {
        "mlm": mlm,
        "ntails": rng.integers(0, cfg.n_tail_classes, size=B),
        "connseq": rng.integers(0, cfg.n_pos_classes, size=B),
        "conntoken": tok(2),
        "headtail": tok(3),
        "pair": rng.integers(0, 2, size=B),
        "regression": rng.normal(size=B),
    }
    return Batch(ids, mask, segs, labels)


def gradcheck(params, cfg, batch, weights=None, step: float = 1e-5, floor: float = 1e-6):
    """Largest relative error between analytic and central-difference gradients, per tensor.

    Relative error is ``|a - n| / max(|a| + |n|, floor)``; the floor keeps
    entries whose true gradient is exactly zero from dividing noise by noise.
    """
    import numpy as np

    from lipidlm.model import forward, loss, value_and_grad

    _, grads, _ = value_and_grad(params, cfg, batch, weights)

    def total():
        out, _ = forward(params, cfg, batch)
        return loss(out, batch.labels, weights).total

    worst = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = total()
            flat[i] = keep - step
            down = total()
            flat[i] = keep
            num = (up - down) / (2 * step)
            ana = grads[name].reshape(-1)[i]
            err = max(err, abs(ana - num) / max(abs(ana) + abs(num), floor))
        worst[name] = err
    return worst


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """Per-criterion verdict lines, printed in the terminal summary."""
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
