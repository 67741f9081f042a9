"""Acceptance gate: end-to-end checks with explicit budgets and oracles.

Each test prints one pass/fail line. The trained-model criteria share a
single comparison run through a session fixture; everything else is
self-contained. Run with `pytest tests/test_acceptance.py -v -s`.
"""
import dataclasses
import itertools
import time

import numpy as np
import pytest
import torch

import opensed.training as training
from opensed.cli import main as cli_main
from opensed.config import (ExperimentConfig, PostConfig, SplitSpec,
                            default_split_spec, to_json)
from opensed.dataset import Event, EventList, SynthConfig
from opensed.ensemble import (Posteriorgram, fuse_calibrated, median_filter)
from opensed.eow import SgldConfig, SgldSampler, eow_softmax
from opensed.experiment import run_comparison
from opensed.metrics import _collars_match, event_counts, segment_counts
from opensed.model import ArchConfig, init_params, load_param_vector, param_vector
from opensed.training import TrainConfig, total_loss


def report(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# shared comparison run (criteria 5 and 6)

def acceptance_config() -> ExperimentConfig:
    spec = dataclasses.replace(default_split_spec(seed=7),
                               n_train_clips=12, n_test_clips=8)
    return ExperimentConfig(
        arm="P4",
        split=spec,
        arch=ArchConfig(conv_channels=(8, 16, 32)),
        train=TrainConfig(tau=0.1, lam=0.1, seeds=(0, 1, 2, 3, 4),
                          max_epochs=90, warmup_epochs=5, patience=12,
                          batch_size=8, mixup=True),
        post=PostConfig(threshold=0.3))


@pytest.fixture(scope="session")
def comparison():
    cfg = acceptance_config()
    t0 = time.monotonic()
    result = run_comparison(cfg)
    elapsed = time.monotonic() - t0
    return result, elapsed, len(cfg.train.seeds)


# ---------------------------------------------------------------------------
# criterion 1: full-network gradient check against finite differences

def test_criterion_1_gradient_check():
    arch = ArchConfig(n_mels=8, n_classes=3, conv_channels=(2,),
                      freq_pools=(4,), gru_hidden=4)
    model = init_params(arch, 0)
    rng = np.random.default_rng(0)
    feats = torch.as_tensor(rng.standard_normal((4, 10, 8)))
    sed = torch.as_tensor((rng.random((4, 10, 3)) > 0.7).astype(float))
    sod = torch.as_tensor(
        np.minimum(sed.numpy().sum(axis=2), 2.0)).long()
    gen = torch.Generator().manual_seed(1)
    neg = torch.randn(6, arch.embedding_dim, generator=gen, dtype=torch.float64)
    cfg = TrainConfig(tau=1.0, lam=0.1, seeds=(0,))

    t0 = time.monotonic()

    def loss_fn():
        return total_loss(model, feats, sed, sod, cfg, neg).total

    for p in model.parameters():
        p.grad = None
    loss_fn().backward()
    g_ad = np.concatenate([p.grad.reshape(-1).numpy()
                           for p in model.parameters()])
    vec = param_vector(model)
    g_fd = np.empty_like(vec)
    h = 1e-5
    for i in range(len(vec)):
        v = vec.copy()
        v[i] += h
        load_param_vector(model, v)
        lp = float(loss_fn().detach())
        v[i] -= 2 * h
        load_param_vector(model, v)
        lm = float(loss_fn().detach())
        g_fd[i] = (lp - lm) / (2 * h)
    load_param_vector(model, vec)
    elapsed = time.monotonic() - t0
    rel = np.abs(g_ad - g_fd) / np.maximum(
        np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-6)
    report("criterion 1 (gradient vs finite differences)",
           rel.max() <= 1e-4 and elapsed <= 60.0,
           f"max rel err {rel.max():.2e} over {len(vec)} params, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: softmax normalization and fusion sanity at scale

def test_criterion_2_softmax_and_fusion():
    gen = torch.Generator().manual_seed(2)
    logits = torch.randn(10_000, 4, generator=gen, dtype=torch.float64) * 50
    sums = eow_softmax(logits).sum(dim=-1)
    norm_ok = bool(torch.allclose(sums, torch.ones_like(sums), atol=1e-9))

    rng = np.random.default_rng(3)
    mean_err = 0.0
    bound_ok = True
    for _ in range(10_000):
        m = int(rng.integers(2, 6))
        t = int(rng.integers(1, 4))
        posts = []
        for _ in range(m):
            sod = rng.random((t, 4))
            sod /= sod.sum(axis=1, keepdims=True)
            posts.append(Posteriorgram(rng.random((t, 2)), sod, 0.016))
        confs = [rng.random(t) for _ in range(m)]
        fused = fuse_calibrated(posts, confs)
        stack = np.stack([p.sed for p in posts])
        if not (np.all(fused >= stack.min(axis=0) - 1e-12)
                and np.all(fused <= stack.max(axis=0) + 1e-12)):
            bound_ok = False
        equal = fuse_calibrated(posts, [np.full(t, 0.5)] * m)
        mean_err = max(mean_err,
                       float(np.abs(equal - stack.mean(axis=0)).max()))
    report("criterion 2 (softmax rows + fusion invariants)",
           norm_ok and bound_ok and mean_err <= 1e-12,
           f"norm ok={norm_ok}, bounds ok={bound_ok}, "
           f"equal-confidence dev {mean_err:.1e}")


# ---------------------------------------------------------------------------
# criterion 3: metric counting vs brute force / exhaustive matching

def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(4)
    names = ["a", "b"]
    seg_div = 0
    for _ in range(500):
        t = int(rng.integers(1, 60))
        ref = (rng.random((t, 2)) > 0.6).astype(float)
        est = (rng.random((t, 2)) > 0.6).astype(float)
        counts = segment_counts(ref, est, names)
        for c, name in enumerate(names):
            tp = sum(1 for i in range(t) if ref[i, c] and est[i, c])
            fp = sum(1 for i in range(t) if est[i, c] and not ref[i, c])
            fn = sum(1 for i in range(t) if ref[i, c] and not est[i, c])
            if counts.counts[name] != (tp, fp, fn):
                seg_div += 1

    def exhaustive_tp(refs, ests):
        ok = [[_collars_match(r.onset, r.offset, e.onset, e.offset,
                              0.2, 0.2, 0.2) for r in refs] for e in ests]

        def best(j, used):
            if j == len(ests):
                return 0
            score = best(j + 1, used)
            for i in range(len(refs)):
                if i not in used and ok[j][i]:
                    score = max(score, 1 + best(j + 1, used | {i}))
            return score

        return best(0, frozenset())

    # same-class reference onsets keep >= 0.5 s separation, as the scene
    # generator produces; each estimate is then collar-compatible with at
    # most one reference and greedy matching attains the optimum
    ev_div = 0
    for _ in range(500):
        refs, ests = [], []
        onsets = np.sort(rng.random(int(rng.integers(0, 6))) * 8)
        for on in onsets:
            if refs and on - refs[-1].onset < 0.5:
                continue
            refs.append(Event(float(on), float(on) + 0.3 + float(rng.random()) * 2, "a"))
        for _ in range(int(rng.integers(0, 6))):
            if refs and rng.random() < 0.7:
                base = refs[int(rng.integers(0, len(refs)))]
                on = max(0.0, base.onset + float(rng.normal(0, 0.15)))
                off = base.offset + float(rng.normal(0, 0.15))
            else:
                on = float(rng.random() * 8)
                off = on + 0.3 + float(rng.random()) * 2
            if off > on:
                ests.append(Event(on, off, "a"))
        counts = event_counts(EventList("c", 12.0, refs),
                              EventList("c", 12.0, ests))
        greedy = counts.counts.get("a", (0, 0, 0))[0]
        if greedy != exhaustive_tp(refs, ests):
            ev_div += 1
    report("criterion 3 (segment + event counting oracles)",
           seg_div == 0 and ev_div == 0,
           f"segment divergences {seg_div}/500, event divergences {ev_div}/500")


# ---------------------------------------------------------------------------
# criterion 4: median filter vs sort-based oracle, boundaries included

def test_criterion_4_median_filter_oracle():
    rng = np.random.default_rng(5)
    divergences = 0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        track = rng.random(n)
        out = median_filter(track, 7)
        for t in range(n):
            window = np.sort(track[max(0, t - 3):min(n, t + 4)])
            k = len(window)
            med = window[k // 2] if k % 2 else 0.5 * (window[k // 2 - 1]
                                                      + window[k // 2])
            if out[t] != med:
                divergences += 1
    report("criterion 4 (median filter vs sort oracle)",
           divergences == 0, f"{divergences} divergences over 1000 tracks")


# ---------------------------------------------------------------------------
# criterion 5: open-world uncertainty separates domains

def test_criterion_5_uncertainty_separation(comparison):
    result, elapsed, n_seeds = comparison
    per_model = elapsed / (2 * n_seeds)
    wins = sum(1 for u in result.uncertainty if u["ood"] > u["in_domain"])
    report("criterion 5 (OOD uncertainty > in-domain)",
           wins >= 4 and per_model <= 300.0,
           f"{wins}/{len(result.uncertainty)} seeds separated, "
           f"~{per_model:.0f}s per model")


# ---------------------------------------------------------------------------
# criterion 6: calibrated ensemble wins on the held-out domain

def test_criterion_6_arm_ordering(comparison):
    result, elapsed, _ = comparison
    p1 = result.arms["P1"].median("smi_f1")
    p3 = result.arms["P3"].median("smi_f1")
    p4 = result.arms["P4"].median("smi_f1")
    report("criterion 6 (P4 >= P3 and P4 >= P1, median test Smi-F1)",
           p4 >= p3 and p4 >= p1 and elapsed <= 45 * 60,
           f"P1 {p1:.4f}, P3 {p3:.4f}, P4 {p4:.4f}, total {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# criterion 7: byte-identical reports on rerun

def test_criterion_7_reproducible_reports(tmp_path):
    d1 = SynthConfig(clip_duration=2.0, noise_exponent=0.0,
                     noise_level_db=-33.0, snr_db=(3.0, 12.0),
                     events_per_clip=(1, 2), distractors_per_clip=(0, 1))
    ood = dataclasses.replace(d1, noise_exponent=1.5, noise_level_db=-24.0,
                              snr_db=(0.0, 9.0))
    cfg = ExperimentConfig(
        arm="P4",
        split=SplitSpec((d1,), ood, n_train_clips=4, n_test_clips=2, seed=0),
        arch=ArchConfig(conv_channels=(2,), freq_pools=(4,), gru_hidden=4),
        train=TrainConfig(tau=1.0, lam=0.1, seeds=(0, 1), max_epochs=2,
                          warmup_epochs=1, patience=3, batch_size=2,
                          mixup=False),
        post=PostConfig(median_window=3))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(to_json(cfg))
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["compare", "--config", str(cfg_path), "--out", str(out_a)]) == 0
    assert cli_main(["compare", "--config", str(cfg_path), "--out", str(out_b)]) == 0
    mismatches = []
    csvs = sorted(p.name for p in out_a.glob("*.csv"))
    for name in csvs:
        if (out_a / name).read_bytes() != (out_b / name).read_bytes():
            mismatches.append(name)
    report("criterion 7 (rerun reproduces every CSV byte for byte)",
           len(csvs) >= 3 and not mismatches,
           f"{len(csvs)} CSVs compared, mismatches: {mismatches or 'none'}")


# ---------------------------------------------------------------------------
# criterion 8: long-run SGLD stability

def test_criterion_8_sgld_stability():
    arch = ArchConfig()
    dim = arch.embedding_dim
    cfg = SgldConfig()  # gamma = 0.05, 20 steps per call
    sampler = SgldSampler(dim, cfg, seed=6)
    head = init_params(arch, 7).sod_head
    for p in head.parameters():
        p.requires_grad_(False)
    calls = 10_000 // cfg.n_steps
    max_norm = 0.0
    for _ in range(calls):
        out = sampler.sample(head, 16)
        max_norm = max(max_norm, float(out.norm(dim=1).max()))
    buf_norm = float(sampler.buffer.norm(dim=1).max())
    report("criterion 8 (SGLD bounded over 10^4 steps)",
           max_norm < 100.0 and buf_norm < 100.0 and sampler.reinit_events == 0,
           f"max sample norm {max_norm:.2f}, buffer norm {buf_norm:.2f}, "
           f"{sampler.reinit_events} non-finite reinits")
