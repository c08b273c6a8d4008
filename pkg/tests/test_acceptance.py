"""End-to-end acceptance run.

Each test prints one ``CRITERION n PASS|FAIL`` line to the terminal, even
under pytest's output capture.  The synthetic-world trainings are shared
between criteria 5 and 6 through a module-scoped cache.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from brainalign.cli import main as cli_main
from brainalign.core import EncoderConfig, SubjectSpec, configs_from_dict, load_preset, new_rng
from brainalign.datahub import load_checkpoint, save_checkpoint
from brainalign.encoder import forward, forward_batch, gradient_check, init_encoder
from brainalign.eval import (
    DEFAULT_TAXONOMY,
    bleu_k,
    category_sizes,
    grounding_accuracy,
    iou,
    retrieval_backward,
    retrieval_exemplar,
    retrieval_forward,
    rouge_l,
)
from brainalign.eval.retrieval import draw_pools
from brainalign.sampler import batch_statistics, compose_batch, subject_probabilities
from brainalign.synthworld import make_world, oracle_ceiling, paired_dataset, split_items
from brainalign.trainer import AdaptationConfig, adapt_subject, dataset_mse, predict, train_align

from conftest import random_boxes
from test_eval import bleu_oracle, iou_oracle, random_sentence, retrieval_oracle, rouge_oracle

pytestmark = pytest.mark.slow

ACCEPT_DIMS = [512, 640, 768]


@contextmanager
def criterion(capsys, n: int, title: str):
    info: dict = {}
    ok = False
    try:
        yield info
        ok = True
    finally:
        detail = info.get("detail", "")
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" | {detail}" if detail else ""))


def desk():
    return configs_from_dict(load_preset("desk"))


def forward_acc(state, samples, pool=300, trials=30, seed=0) -> float:
    pred = predict(state, samples).reshape(len(samples), -1)
    target = np.stack([s.target.values for s in samples]).reshape(len(samples), -1)
    return retrieval_forward(pred, target, pool, trials, new_rng(seed))


def per_subject_acc(state, samples, **kw) -> dict:
    out = {}
    for sid in state.subject_ids:
        own = [s for s in samples if s.subject_id == sid]
        out[sid] = forward_acc(state, own, **kw)
    return out


class World:
    def __init__(self, sigma: float, seed: int):
        rng = new_rng(seed)
        self.world = make_world(3, ACCEPT_DIMS, (16, 32), 1200, sigma, rng)
        self.train_items, self.test_items = split_items(self.world, 300, rng)
        self.train = paired_dataset(self.world, self.train_items, rng)
        self.test = paired_dataset(self.world, self.test_items, rng)

    def subset(self, samples, ids):
        return [s for s in samples if s.subject_id in ids]


# --------------------------------------------------------------------------
# 1. sampler fidelity
# --------------------------------------------------------------------------

def test_criterion_1_sampler_fidelity(capsys):
    with criterion(capsys, 1, "sampler fidelity") as info:
        sizes = {f"S{k}": 10_000 for k in range(1, 5)}
        t0 = time.perf_counter()
        rng = new_rng(0)
        plans = [compose_batch(sizes, 256, 0.5, "ours", rng) for _ in range(10_000)]
        stats = batch_statistics(plans)
        elapsed = time.perf_counter() - t0
        exact = all(p.count(p.dominant_subject) == 128 for p in plans)
        expected = [10_000 * q for q in subject_probabilities(sizes).values()]
        pvalue = chisquare([stats.dominant_counts[s] for s in sizes], expected).pvalue
        info["detail"] = f"all 128: {exact}, chi2 p={pvalue:.3f}, {elapsed:.1f}s"
        assert exact
        assert pvalue > 0.01
        assert elapsed < 30


# --------------------------------------------------------------------------
# 2. gradient correctness
# --------------------------------------------------------------------------

def test_criterion_2_gradient_check(capsys):
    with criterion(capsys, 2, "gradient correctness") as info:
        rng = new_rng(2024)
        t0 = time.perf_counter()
        errs, at_init = [], []
        for trial in range(3):
            heads = int(rng.integers(1, 3))
            cfg = EncoderConfig(
                token_count=int(rng.integers(1, 4)), token_dim=4 * heads * int(rng.integers(1, 3)),
                subject_token_count=int(rng.integers(1, 3)), latent_query_count=int(rng.integers(1, 4)),
                encoder_depth=int(rng.integers(1, 3)), attention_heads=heads,
                output_channels=int(rng.integers(2, 6)), ff_mult=2)
            specs = [SubjectSpec("A", int(rng.integers(3, 9))), SubjectSpec("B", int(rng.integers(3, 9)))]
            state = init_encoder(cfg, specs, new_rng(trial))
            spec = specs[trial % 2]
            world = make_world(1, [spec.voxel_dim], cfg.grid_shape, 4, 0.0, new_rng(trial),
                               subject_ids=[spec.subject_id])
            sample = paired_dataset(world, [0], new_rng(trial))[0]
            at_init.append(gradient_check(state, sample, eps=1e-5, n_checks=64, seed=trial))
            # At the 0.02-scale init, attention is nearly uniform and some gradients sit near 1e-9,
            # below what float64 central differences resolve.  Check at a generic point instead.
            gen = torch.Generator().manual_seed(trial)
            with torch.no_grad():
                for p in state.parameters():
                    p.add_(0.3 * torch.randn(p.shape, generator=gen))
            errs.append(gradient_check(state, sample, eps=1e-5, n_checks=64, seed=trial))
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"max rel err {max(errs):.2e} at perturbed parameters "
                          f"({max(at_init):.2e} at init), {elapsed:.1f}s")
        assert max(errs) < 1e-4
        assert elapsed < 120


# --------------------------------------------------------------------------
# 3. shape and subject invariants
# --------------------------------------------------------------------------

def test_criterion_3_shapes_and_isolation(capsys):
    with criterion(capsys, 3, "shape and subject invariants") as info:
        cfg = EncoderConfig(token_count=3, token_dim=8, subject_token_count=2, latent_query_count=5,
                            encoder_depth=1, attention_heads=2, output_channels=7)
        specs = [SubjectSpec(f"S{k}", d) for k, d in enumerate([13, 29, 64, 101], 1)]
        state = init_encoder(cfg, specs, new_rng(3))
        rng = new_rng(4)
        bad = 0
        for _ in range(1000):
            spec = specs[int(rng.integers(len(specs)))]
            g = forward(state, spec.subject_id, rng.standard_normal(spec.voxel_dim) * rng.uniform(0.1, 10))
            bad += g.shape != (5, 7)
        v = rng.standard_normal(29)
        before = forward_batch(state, "S2", v[None])
        with torch.no_grad():
            for sid in ("S1", "S3", "S4"):
                for p in state.tokenizers[sid].parameters():
                    p.add_(1.0)
        isolated = np.array_equal(forward_batch(state, "S2", v[None]), before)
        info["detail"] = f"{1000 - bad}/1000 grids of shape (5, 7), isolation bitwise: {isolated}"
        assert bad == 0
        assert isolated


# --------------------------------------------------------------------------
# 4. synthetic alignment
# --------------------------------------------------------------------------

def test_criterion_4_synthetic_alignment(capsys):
    with criterion(capsys, 4, "synthetic alignment") as info:
        w = World(0.0, seed=0)
        enc, tc = desk()
        t0 = time.perf_counter()
        state = init_encoder(enc, w.world.specs, new_rng(1))
        train_align(state, w.train, tc.override(seed=0))
        accs = per_subject_acc(state, w.test)
        elapsed = time.perf_counter() - t0
        ceiling = oracle_ceiling(w.world, 300, new_rng(5), items=w.test_items, per_subject=True)
        info["detail"] = (f"forward acc {', '.join(f'{k}={v:.4f}' for k, v in accs.items())}; "
                          f"ceiling {min(ceiling.values()):.4f}; {elapsed:.0f}s")
        for sid, acc in accs.items():
            assert acc >= 0.95
            assert acc <= ceiling[sid] + 0.01
        assert elapsed < 600


# --------------------------------------------------------------------------
# 5 and 6. cross-subject benefit and adaptation
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def noisy_runs():
    """Cross-subject and single-subject models on the sigma=0.3 world for three seeds."""
    enc, tc = desk()
    runs = []
    for seed in range(3):
        w = World(0.3, seed=10 + seed)
        cross = init_encoder(enc, w.world.specs, new_rng(100 + seed))
        train_align(cross, w.train, tc.override(seed=seed))
        singles = {}
        for spec in w.world.specs:
            st = init_encoder(enc, [spec], new_rng(200 + seed))
            train_align(st, w.subset(w.train, {spec.subject_id}), tc.override(seed=seed))
            singles[spec.subject_id] = st
        runs.append({"world": w, "cross": cross, "singles": singles})
    return runs


def test_criterion_5_cross_subject_benefit(capsys, noisy_runs):
    with criterion(capsys, 5, "cross-subject benefit") as info:
        cross_means, single_means, cross_mse, single_mse = [], [], [], []
        for run in noisy_runs:
            w = run["world"]
            cross_means.append(float(np.mean(list(per_subject_acc(run["cross"], w.test).values()))))
            single_means.append(float(np.mean([forward_acc(st, w.subset(w.test, {sid}))
                                               for sid, st in run["singles"].items()])))
            cross_mse.append(dataset_mse(run["cross"], w.test))
            single_mse.append(float(np.mean([dataset_mse(st, w.subset(w.test, {sid}))
                                             for sid, st in run["singles"].items()])))
        cross, single = float(np.mean(cross_means)), float(np.mean(single_means))
        info["detail"] = (f"cross {cross:.4f} vs single {single:.4f} over 3 seeds; "
                          f"test mse {np.mean(cross_mse):.4f} vs {np.mean(single_mse):.4f}")
        assert cross >= single - 0.01


def test_criterion_6_weak_adaptation(capsys, noisy_runs):
    with criterion(capsys, 6, "weakly supervised adaptation") as info:
        run = noisy_runs[0]
        w = run["world"]
        enc, tc = desk()
        base_state = init_encoder(enc, w.world.specs[:2], new_rng(300))
        base, _ = train_align(base_state, w.subset(w.train, {"S1", "S2"}), tc.override(seed=0))
        new_spec = w.world.specs[2]
        own_train = w.subset(w.train, {"S3"})
        own_test = w.subset(w.test, {"S3"})
        tuned, _ = adapt_subject(base, new_spec, own_train, AdaptationConfig("finetuned", 0.3), tc.override(seed=0))
        frozen, _ = adapt_subject(base, new_spec, own_train, AdaptationConfig("frozen", 0.3), tc.override(seed=0))
        tuned_acc = forward_acc(tuned.encoder(), own_test)
        full_acc = forward_acc(run["singles"]["S3"], own_test)
        frozen_same = all(np.array_equal(frozen.params[k], v) for k, v in base.params.items()
                          if k.startswith("perceiver."))
        mse = (dataset_mse(tuned.encoder(), own_test), dataset_mse(run["singles"]["S3"], own_test))
        info["detail"] = (f"finetuned@0.3 {tuned_acc:.4f} vs full single {full_acc:.4f} "
                          f"(test mse {mse[0]:.4f} vs {mse[1]:.4f}); "
                          f"frozen perceiver bitwise unchanged: {frozen_same}")
        assert tuned_acc >= 0.9 * full_acc
        assert frozen_same


# --------------------------------------------------------------------------
# 7. metric oracles
# --------------------------------------------------------------------------

def exemplar_oracle(q, c):
    hits = 0
    for i in range(len(q)):
        own = sum(a * b for a, b in zip(q[i], c[i])) / (np.linalg.norm(q[i]) * np.linalg.norm(c[i]))
        others = [sum(a * b for a, b in zip(q[i], c[j])) / (np.linalg.norm(q[i]) * np.linalg.norm(c[j]))
                  for j in range(len(c)) if j != i]
        hits += all(own > o for o in others)
    return hits / len(q)


def test_criterion_7_metric_oracles(capsys):
    with criterion(capsys, 7, "metric oracles") as info:
        rng = new_rng(77)
        n_inst = 100
        labels = list(DEFAULT_TAXONOMY)
        # iou
        a, b = random_boxes(rng, n_inst), random_boxes(rng, n_inst)
        iou_ok = all(iou(x, y) == iou_oracle(tuple(x), tuple(y)) for x, y in zip(a, b))
        # grounding: 100 random reports, each checked against a double loop
        ground_ok = mono_ok = True
        for _ in range(n_inst):
            n = int(rng.integers(1, 30))
            gts = [(labels[j], tuple(x)) for j, x in zip(rng.integers(0, 80, n), random_boxes(rng, n))]
            preds = [(g[0], tuple(x)) for g, x in zip(gts, random_boxes(rng, n))]
            rep = grounding_accuracy(preds, gts)
            for m in rep.thresholds:
                hits = sum(iou_oracle(p[1], g[1]) > m for p, g in zip(preds, gts))
                ground_ok &= rep.acc("A", m) == hits / n
            ground_ok &= rep.categories["A"].count == n
            ground_ok &= rep.categories["S"].count == rep.categories["SC"].count + rep.categories["SO"].count
            for cat, sc in rep.categories.items():
                if sc.count:
                    mono_ok &= rep.acc(cat, 0.7) <= rep.acc(cat, 0.5) <= rep.acc(cat, 0.3)
        # retrieval, three directions
        ret_ok = True
        for _ in range(n_inst):
            q = rng.standard_normal((12, 3))
            c = q + rng.normal(0, 1.0, q.shape)
            seed = int(rng.integers(2**31))
            pools = draw_pools(12, 5, 2, new_rng(seed)).tolist()
            ret_ok &= retrieval_forward(q, c, 5, 2, new_rng(seed)) == retrieval_oracle(q.tolist(), c.tolist(), pools)
            ret_ok &= retrieval_backward(q, c, 5, 2, new_rng(seed)) == retrieval_oracle(c.tolist(), q.tolist(), pools)
            ret_ok &= retrieval_exemplar(q, c) == exemplar_oracle(q, c)
        # captions
        bleu_ok = rouge_ok = True
        for _ in range(n_inst):
            cand = random_sentence(rng)
            refs = [random_sentence(rng) for _ in range(int(rng.integers(1, 4)))]
            for k in (1, 2):
                bleu_ok &= abs(bleu_k(cand, refs, k) - bleu_oracle(cand, refs, k)) <= 1e-12
            rouge_ok &= abs(rouge_l(cand, refs[0]) - rouge_oracle(cand, refs[0])) <= 1e-12
        sizes = category_sizes()
        info["detail"] = (f"iou {iou_ok}, grounding {ground_ok}, monotone {mono_ok}, retrieval {ret_ok}, "
                          f"bleu {bleu_ok}, rouge {rouge_ok}, taxonomy {sizes}")
        assert iou_ok and ground_ok and mono_ok and ret_ok and bleu_ok and rouge_ok
        assert sizes == {"SC": 11, "SO": 17, "I": 52}


# --------------------------------------------------------------------------
# 8. retrieval invariances
# --------------------------------------------------------------------------

def test_criterion_8_retrieval_invariances(capsys):
    with criterion(capsys, 8, "retrieval invariances") as info:
        rng = new_rng(8)
        worst = 0.0
        for _ in range(20):
            d = int(rng.integers(2, 32))
            a = rng.standard_normal((150, d))
            b = a + rng.normal(0, 1.0, a.shape)
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            s1, s2 = rng.uniform(1e-3, 1e3, size=2)
            for fn in (retrieval_forward, retrieval_backward):
                worst = max(worst, abs(fn(a, b, 50, 5, new_rng(1)) - fn(s1 * a @ q, s2 * b @ q, 50, 5, new_rng(1))))
            worst = max(worst, abs(retrieval_exemplar(a, b) - retrieval_exemplar(s1 * a @ q, s2 * b @ q)))
        info["detail"] = f"max accuracy change {worst:.1e}"
        assert worst <= 1e-10


# --------------------------------------------------------------------------
# 9. determinism and persistence
# --------------------------------------------------------------------------

def test_criterion_9_determinism(capsys, tmp_path):
    with criterion(capsys, 9, "determinism and persistence") as info:
        cfg = {
            "encoder": {"token_count": 4, "token_dim": 16, "subject_token_count": 1, "latent_query_count": 4,
                        "encoder_depth": 1, "attention_heads": 2, "output_channels": 8, "ff_mult": 2},
            "train": {**load_preset("desk")["train"], "epochs": 3, "batch_size": 32},
        }
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert cli_main(["simulate", "--out", str(tmp_path / "w"), "--voxel-dims", "24,32", "--subjects", "2",
                         "--grid", "4x8", "--gallery", "200", "--test", "50", "--sigma", "0.2",
                         "--latent-dim", "8"]) == 0
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli_main(["train", "--manifest", str(tmp_path / "w"), "--config", str(tmp_path / "cfg.json"),
                             "--pool", "50", "--trials", "3", "--seed", "4", "--out", str(out)]) == 0
            assert cli_main(["eval", "retrieval", "--checkpoint", str(out / "checkpoint"), "--manifest",
                             str(tmp_path / "w"), "--pool", "50", "--trials", "3", "--out", str(out / "eval")]) == 0
            outs.append(out)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        ck = load_checkpoint(outs[0] / "checkpoint")
        state = ck.encoder()
        save_checkpoint(ck, tmp_path / "copy")
        again = load_checkpoint(tmp_path / "copy").encoder()
        rng = new_rng(9)
        bitwise = True
        for spec in ck.specs:
            v = rng.standard_normal((16, spec.voxel_dim))
            bitwise &= np.array_equal(forward_batch(state, spec.subject_id, v),
                                      forward_batch(again, spec.subject_id, v))
        info["detail"] = f"{len(files)} output files byte-identical: {same}; round-trip forward bitwise: {bitwise}"
        assert len(files) >= 7 and same
        assert bitwise
