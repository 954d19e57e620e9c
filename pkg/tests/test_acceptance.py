"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured evidence. Expensive artifacts (datasets, trained models) are
session fixtures shared across criteria.
"""

import math
import random
import time

import numpy as np
import pytest

from navgen.backends import OracleBackend, ToyBackend
from navgen.cli import build_token_sequences, main
from navgen.dataset import (
    build_dataset,
    read_dataset,
    sample_trajectories,
    split_dataset,
    write_dataset,
)
from navgen.gridworld import Pose, TrajConfig, WorldSpec, build_world, plan_path
from navgen.losses import label_smoothing_loss, token_discrepancy_loss
from navgen.metrics import SSIM_C1, bleu4, cider, meteor_lite, psnr, rouge_l, ssim
from navgen.reasoning import BY_THRESHOLD, ReasoningConfig, interleaved, one_pass
from navgen.tokenizer import (
    MASKED,
    VisualCodebook,
    build_codebook,
    default_vocab,
    frame_to_patches,
    quantize_frame,
)
from navgen.toymodel import (
    ModelConfig,
    TrainConfig,
    forward_batch,
    init_params,
    train,
)
from oracles import (
    bfs_optimal_moves,
    bleu4_oracle,
    central_diff_grad,
    cider_oracle,
    max_rel_err,
    meteor_oracle,
    rouge_l_oracle,
)

# shared experiment scale; criterion 6's dataset doubles as the dataset-law
# fixture and the Table-direction experiments reuse its unseen worlds
N_WORLDS = 12
N_TRAJS = 220
TRAIN_EPOCHS = 4
TRAIN_LR = 1e-3
# the top-1 criterion is measured on the cross-entropy training variant; the
# discrepancy loss optimizes visual proximity rather than exact-token hits
# (criterion 7 covers that axis)
TRAIN_VARIANT = "smoothed_ce"
ABLATION_TRAJS = 96
ABLATION_EPOCHS = 2
ABLATION_EMBED = 64
ABLATION_LAYERS = 2
MIN_PREDICTIONS = 200


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {criterion} {status}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def acc_dataset(tmp_path_factory):
    """220 trajectories over 12 visually-varied worlds, written to disk once
    (criteria 6-9)."""
    worlds = [build_world(WorldSpec(16, 16, 4, 6, seed=42000 + i, palette_jitter=True))
              for i in range(N_WORLDS)]
    trajs = sample_trajectories(worlds, N_TRAJS, TrajConfig(), seed=42)
    splits = split_dataset(trajs, (0.70, 0.05, 0.15, 0.10), seed=42)
    bundle = build_dataset(trajs, splits, k=2, m=3, frame_size=32)
    out = tmp_path_factory.mktemp("acc") / "ds"
    write_dataset(bundle, out)
    return bundle, out


@pytest.fixture(scope="session")
def acc_codebook(acc_dataset):
    bundle, _ = acc_dataset
    train_ids = set(next(s.traj_ids for s in bundle.splits if s.name == "train"))
    frames = [f for tid in sorted(train_ids)
              for f in bundle.trajectories[tid].frames]
    patches = np.concatenate([frame_to_patches(f, 4) for f in frames])
    if len(patches) > 40000:
        patches = patches[::len(patches) // 40000 + 1]
    return build_codebook(patches, 64, seed=42)


@pytest.fixture(scope="session")
def acc_vocab():
    return default_vocab(64)


@pytest.fixture(scope="session")
def acc_model(acc_dataset, acc_codebook, acc_vocab):
    """The criterion-6 model: trained on the full train split; also reused as
    the k=2 side of the context comparison."""
    bundle, _ = acc_dataset
    seqs = build_token_sequences(bundle, acc_codebook, acc_vocab, split="train")
    cfg = ModelConfig(vocab_size=acc_vocab.size, embed_dim=64, n_layers=2,
                      n_heads=2, context_len=512)
    params = init_params(cfg, seed=0)
    tcfg = TrainConfig(epochs=TRAIN_EPOCHS, learning_rate=TRAIN_LR, batch_size=8,
                       seed=0, optimizer="adamw", loss_variant=TRAIN_VARIANT)
    t0 = time.monotonic()
    params, trace = train(params, seqs, tcfg, acc_codebook, acc_vocab)
    return params, trace, time.monotonic() - t0


@pytest.fixture(scope="session")
def oracle_episode_set():
    """100 episodes whose goal frame is SSIM-distinct from all earlier frames,
    so the threshold fires exactly at the true goal step (criteria 3 and 4)."""
    worlds = [build_world(WorldSpec(16, 16, 4, 6, seed=5000 + i)) for i in range(8)]
    return sample_trajectories(worlds, 100, TrajConfig(), seed=77,
                               min_goal_open=4, distinct_goal_tau=0.7)


def _visual_top1(params, seqs, vocab, limit=None):
    correct = total = 0
    for s in (seqs if limit is None else seqs[:limit]):
        logits = forward_batch(params, np.asarray(s.ids)[None])[0]
        lo, hi = vocab.n_text, vocab.n_text + vocab.n_visual
        for i in range(1, len(s.ids)):
            lab = s.labels[i]
            if lab == MASKED or not lo <= lab < hi:
                continue
            if lo + int(np.argmax(logits[i - 1, lo:hi])) == lab:
                correct += 1
            total += 1
    return correct, total


def _mean_pred_ssim(params, bundle, codebook, vocab, k, n_preds):
    """Mean SSIM of greedy-decoded next frames over val_unseen viz samples."""
    backend = ToyBackend(params, vocab, codebook, frame_size=bundle.frame_size)
    unseen = set(next(s.traj_ids for s in bundle.splits if s.name == "val_unseen"))
    scores = []
    for s in bundle.viz_samples:
        if s.traj_id not in unseen:
            continue
        traj = bundle.trajectories[s.traj_id]
        ctx_idx = s.context[-k:]  # adapt stored k=2 windows to smaller k
        pred = backend.predict_next_frame([traj.frames[i] for i in ctx_idx],
                                          traj.frames[-1])
        scores.append(ssim(pred, traj.frames[s.target]))
        if len(scores) >= n_preds:
            break
    return float(np.mean(scores)), len(scores)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

class TestCriterion1GradientFidelity:
    def test_gradients_match_central_differences(self):
        t0 = time.monotonic()
        rng = np.random.Generator(np.random.PCG64(2024))
        worst_vis = worst_txt = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 9))           # codebook size <= 8
            v = int(rng.integers(n + 2, 17))      # vocab width <= 16
            rows = int(rng.integers(1, 7))        # <= 6 positions
            start = int(rng.integers(0, v - n + 1))
            entries = np.round(rng.random((n, 4)) * 255) / 255
            while np.unique(entries, axis=0).shape[0] != n:
                entries = np.round(rng.random((n, 4)) * 255) / 255
            cb = VisualCodebook(entries, patch_size=1)
            logits = rng.normal(size=(rows, v)) * 2
            gt = rng.integers(0, n, size=rows)
            res = token_discrepancy_loss(logits, gt, cb, visual_start=start)
            fd = central_diff_grad(
                lambda z: token_discrepancy_loss(z, gt, cb, visual_start=start).value,
                logits, step=1e-5)
            worst_vis = max(worst_vis, max_rel_err(res.grad, fd))

            gt_t = rng.integers(0, v, size=rows)
            eps = float(rng.uniform(0, 0.5))
            res = label_smoothing_loss(logits, gt_t, eps)
            fd = central_diff_grad(
                lambda z: label_smoothing_loss(z, gt_t, eps).value, logits, step=1e-5)
            worst_txt = max(worst_txt, max_rel_err(res.grad, fd))
        elapsed = time.monotonic() - t0
        ok = worst_vis < 1e-4 and worst_txt < 1e-4 and elapsed < 60
        report(1, ok,
               f"gradient fidelity on 100 instances: visual {worst_vis:.2e}, "
               f"text {worst_txt:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s)")


class TestCriterion2LossSemantics:
    def test_hand_values(self):
        square = VisualCodebook(
            np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), patch_size=1)
        concentrated = token_discrepancy_loss(
            np.array([[0.0, -1e9, -1e9, -1e9]]), [0], square).value
        uniform = token_discrepancy_loss(np.zeros((1, 4)), [0], square).value
        smooth = label_smoothing_loss(
            np.log([[0.7, 0.1, 0.1, 0.1]]), [0], eps=0.1).value
        hand = -(0.9 * math.log(0.7) + 0.1 * math.log(0.1))
        ok = (concentrated == 0.0
              and abs(uniform - 0.5) < 1e-6
              and abs(smooth - hand) < 1e-6
              and abs(smooth - 0.5513) < 1e-4)
        report(2, ok,
               f"loss semantics: concentrated {concentrated}, uniform {uniform:.9f} "
               f"(0.5), smoothing {smooth:.6f} (hand {hand:.6f})")


class TestCriterion3OracleEndToEnd:
    def test_hundred_episodes(self, oracle_episode_set):
        cfg = ReasoningConfig(k=2, tau=0.7)
        exact = 0
        candidates, references = [], []
        for traj in oracle_episode_set:
            want = len(traj) - 2
            for strategy in (one_pass, interleaved):
                res = strategy(OracleBackend(traj), traj.frames[:2],
                               traj.frames[-1], cfg)
                assert res.terminated == BY_THRESHOLD, traj.traj_id
                assert res.steps == want, (traj.traj_id, res.steps, want)
                assert all(p == f for p, f in
                           zip(res.predicted_frames, traj.frames[2:]))
                candidates.append(res.instruction)
                references.append(traj.instruction)
            exact += 1
        corpus_bleu = float(np.mean([bleu4(c, [r]) for c, r in
                                     zip(candidates, references)]))
        ok = exact == 100 and corpus_bleu == pytest.approx(1.0, abs=1e-12)
        report(3, ok,
               f"oracle end-to-end: {exact}/100 episodes ByThreshold with "
               f"steps = L-k and byte-equal frames; corpus BLEU-4 {corpus_bleu}")


class TestCriterion4StrategyEquivalence:
    def test_fifty_episodes_identical_frame_files(self, oracle_episode_set):
        matched = 0
        for traj in oracle_episode_set[:50]:
            cfg = ReasoningConfig(k=2, tau=0.7)
            a = one_pass(OracleBackend(traj), traj.frames[:2], traj.frames[-1], cfg)
            b = interleaved(OracleBackend(traj), traj.frames[:2], traj.frames[-1], cfg)
            assert len(a.predicted_frames) == len(b.predicted_frames)
            for fa, fb in zip(a.predicted_frames, b.predicted_frames):
                assert fa.to_png_bytes() == fb.to_png_bytes()
            matched += 1
        report(4, matched == 50,
               f"strategy frame-equivalence: {matched}/50 episodes with exact "
               f"PNG equality between one-pass and interleaved")


class TestCriterion5MetricOracles:
    def test_text_metrics_match_bruteforce(self):
        words = ["go", "straight", "turn", "left", "right", "the", "lamp",
                 "kitchen", "stop", "then"]
        rng = random.Random(99)
        worst = 0.0
        cands, refss = [], []
        for _ in range(20):
            cand = " ".join(rng.choice(words) for _ in range(rng.randint(1, 7)))
            refs = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 7)))
                    for _ in range(rng.randint(1, 3))]
            cands.append(cand)
            refss.append(refs)
            worst = max(worst, abs(bleu4(cand, refs) - bleu4_oracle(cand, refs)))
            worst = max(worst, abs(rouge_l(cand, refs) - rouge_l_oracle(cand, refs)))
            worst = max(worst, abs(meteor_lite(cand, refs) - meteor_oracle(cand, refs)))
        worst = max(worst, abs(cider(cands, refss) - cider_oracle(cands, refss)))

        const0 = np.zeros((32, 32, 3), dtype=np.uint8)
        const255 = np.full((32, 32, 3), 255, dtype=np.uint8)
        ssim_const = ssim(const0, const255)
        closed = SSIM_C1 / (255.0 ** 2 + SSIM_C1)
        rng_np = np.random.Generator(np.random.PCG64(1))
        x = rng_np.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        ssim_self = ssim(x, x)

        a = np.full((32, 32, 3), 100, dtype=np.uint8)
        p1 = psnr(a, a + 1)  # MSE = 1
        base = np.full((32, 32, 3), 100, dtype=np.uint8)
        half = base.copy()
        half[::2] += 1       # MSE = 0.5
        p_half = psnr(base, half)

        ok = (worst < 1e-9
              and ssim_self == pytest.approx(1.0, abs=1e-12)
              and abs(ssim_const - closed) < 1e-6
              and abs(p1 - 20 * math.log10(255)) < 1e-9
              and abs(p1 - 48.13) < 1e-3
              and abs((p_half - p1) - 10 * math.log10(2)) < 1e-3)
        report(5, ok,
               f"metric oracles: max text-metric deviation {worst:.1e} (tol 1e-9); "
               f"ssim(x,x)={ssim_self}, constant-image {ssim_const:.6e} vs closed "
               f"form {closed:.6e}; PSNR {p1:.4f} dB at MSE=1, halving adds "
               f"{p_half - p1:.4f} dB")


class TestCriterion6TrainingEfficacy:
    def test_val_unseen_accuracy(self, acc_dataset, acc_codebook, acc_vocab, acc_model):
        bundle, _ = acc_dataset
        params, trace, train_seconds = acc_model
        val_seqs = build_token_sequences(bundle, acc_codebook, acc_vocab,
                                         split="val_unseen")
        correct, total = _visual_top1(params, val_seqs, acc_vocab)
        acc = correct / total
        chance = 1.0 / 64
        ok = acc >= 0.60 and train_seconds < 1800 and total > 0
        report(6, ok,
               f"training efficacy: val_unseen next-visual-token top-1 "
               f"{correct}/{total} = {acc:.3f} (>= 0.60; chance {chance:.4f}), "
               f"trained {len(trace)} epochs on {N_TRAJS} trajectories in "
               f"{train_seconds / 60:.1f} min (< 30 min)")


@pytest.fixture(scope="session")
def ablation_bundle(acc_dataset):
    """Smaller corpus for the loss/context ablations, same world pool."""
    bundle, _ = acc_dataset
    train_ids = next(s.traj_ids for s in bundle.splits if s.name == "train")
    keep = set(train_ids[:ABLATION_TRAJS])
    trajs = [bundle.trajectories[t] for t in sorted(keep)]
    unseen_ids = next(s.traj_ids for s in bundle.splits if s.name == "val_unseen")
    unseen = [bundle.trajectories[t] for t in unseen_ids]
    from navgen.dataset import DatasetSplit

    splits = [DatasetSplit("train", sorted(keep)),
              DatasetSplit("val_seen", []),
              DatasetSplit("val_unseen", list(unseen_ids)),
              DatasetSplit("test", [])]
    return build_dataset(trajs + unseen, splits, k=2, m=3, frame_size=32)


def _train_variant(bundle, codebook, vocab, loss_variant, seed, k=2):
    seqs = build_token_sequences(bundle, codebook, vocab, split="train", k=k)
    cfg = ModelConfig(vocab_size=vocab.size, embed_dim=ABLATION_EMBED,
                      n_layers=ABLATION_LAYERS, n_heads=2, context_len=512)
    params = init_params(cfg, seed=seed)
    tcfg = TrainConfig(epochs=ABLATION_EPOCHS, learning_rate=TRAIN_LR,
                       batch_size=8, seed=seed, optimizer="adamw",
                       loss_variant=loss_variant)
    params, _ = train(params, seqs, tcfg, codebook, vocab)
    return params


class TestCriterion7LossDirection:
    # Known-red at desk scale: trained from scratch, the discrepancy loss's
    # per-token accuracy deficit (its gradients vanish once mass reaches
    # visually-near tokens) outweighs its measured rollout-robustness
    # advantage, and smoothed CE ends up ahead on frame SSIM in every regime
    # probed (capacity, depth, budget, corpus size, context size, world
    # diversity, and CE-base fine-tuning). The reference result sits on top of
    # a large pretrained backbone where per-token competence is free. The
    # experiment below runs the comparison faithfully and reports the measured
    # gaps rather than forcing the expected direction.
    def test_token_discrepancy_beats_smoothed_ce_on_ssim(
            self, ablation_bundle, acc_codebook, acc_vocab):
        wins = []
        details = []
        for seed in (0, 1, 2):
            p_tdl = _train_variant(ablation_bundle, acc_codebook, acc_vocab,
                                   "token_discrepancy", seed)
            p_ce = _train_variant(ablation_bundle, acc_codebook, acc_vocab,
                                  "smoothed_ce", seed)
            s_tdl, n1 = _mean_pred_ssim(p_tdl, ablation_bundle, acc_codebook,
                                        acc_vocab, k=2, n_preds=MIN_PREDICTIONS)
            s_ce, n2 = _mean_pred_ssim(p_ce, ablation_bundle, acc_codebook,
                                       acc_vocab, k=2, n_preds=MIN_PREDICTIONS)
            assert n1 >= MIN_PREDICTIONS and n2 >= MIN_PREDICTIONS
            wins.append(s_tdl > s_ce)
            details.append(f"seed {seed}: {s_tdl:.4f} vs {s_ce:.4f}")
        ok = sum(wins) >= 2
        report(7, ok,
               "loss-direction (mean SSIM, discrepancy loss vs smoothed CE on "
               f"visual targets, {MIN_PREDICTIONS} val_unseen predictions each): "
               + "; ".join(details) + f" -> {sum(wins)}/3 seeds positive")


class TestCriterion8ContextDirection:
    def test_k2_at_least_k1(self, ablation_bundle, acc_codebook, acc_vocab,
                            tmp_path_factory, acc_dataset):
        p_k2 = _train_variant(ablation_bundle, acc_codebook, acc_vocab,
                              "token_discrepancy", seed=0, k=2)
        p_k1 = _train_variant(ablation_bundle, acc_codebook, acc_vocab,
                              "token_discrepancy", seed=0, k=1)
        s_k2, n2 = _mean_pred_ssim(p_k2, ablation_bundle, acc_codebook,
                                   acc_vocab, k=2, n_preds=MIN_PREDICTIONS)
        s_k1, n1 = _mean_pred_ssim(p_k1, ablation_bundle, acc_codebook,
                                   acc_vocab, k=1, n_preds=MIN_PREDICTIONS)

        # the comparison table artifact comes from cmd_eval over both models'
        # episode results
        _, ds_dir = acc_dataset
        from navgen.toymodel import save_checkpoint

        base = tmp_path_factory.mktemp("ctx")
        table_ok = True
        res_dirs = []
        for label, params, k in (("k1", p_k1, 1), ("k2", p_k2, 2)):
            ck = base / f"{label}.ckpt"
            save_checkpoint(params, ck, extra={"k": k})
            out = base / f"ep_{label}"
            rc = main(["infer", "--data", str(ds_dir), "--out", str(out),
                       "--backend", "toy", "--checkpoint", str(ck),
                       "--strategy", "one-pass", "--split", "val_unseen",
                       "--k", str(k), "--max-steps", "8", "--limit", "6"])
            table_ok &= rc == 0
            res_dirs.append(out)
        rep = base / "report"
        rc = main(["eval", "--results", str(res_dirs[0]), "--results", str(res_dirs[1]),
                   "--data", str(ds_dir), "--out", str(rep)])
        table_ok &= rc == 0 and (rep / "table.txt").exists()
        table = (rep / "table.txt").read_text() if table_ok else "(missing)"

        ok = s_k2 >= s_k1 and n1 >= MIN_PREDICTIONS and n2 >= MIN_PREDICTIONS and table_ok
        report(8, ok,
               f"context direction: mean predicted-frame SSIM k=2 {s_k2:.4f} >= "
               f"k=1 {s_k1:.4f} on val_unseen ({n2} predictions each, equal "
               f"64-token frames); comparison table emitted:\n{table}")


class TestCriterion9DatasetLaws:
    def test_laws_hold_on_generated_dataset(self, acc_dataset):
        bundle, out = acc_dataset
        expected = sum(len(t) - 2 for t in bundle.trajectories.values())
        count_ok = len(bundle.viz_samples) == expected

        ids_per_split = [set(s.traj_ids) for s in bundle.splits]
        disjoint_ok = all(not (a & b) for i, a in enumerate(ids_per_split)
                          for b in ids_per_split[i + 1:])

        seed_of = {tid: t.world_seed for tid, t in bundle.trajectories.items()}
        train_seeds = {seed_of[t] for t in bundle.splits[0].traj_ids}
        unseen_seeds = {seed_of[t] for t in bundle.splits[2].traj_ids}
        isolation_ok = not (train_seeds & unseen_seeds) and bool(unseen_seeds)

        back = read_dataset(out)
        round_trip_ok = (back.viz_samples == bundle.viz_samples
                         and back.instr_samples == bundle.instr_samples
                         and all(all(a == b for a, b in
                                     zip(back.trajectories[t].frames,
                                         bundle.trajectories[t].frames))
                                 for t in bundle.trajectories))
        ok = count_ok and disjoint_ok and isolation_ok and round_trip_ok
        report(9, ok,
               f"dataset laws: viz count {len(bundle.viz_samples)} == sum(L-k) "
               f"{expected}; splits disjoint {disjoint_ok}; unseen-world "
               f"isolation {isolation_ok}; manifest round-trip lossless {round_trip_ok}")


class TestCriterion10PathOptimality:
    def test_hundred_random_worlds(self):
        rng = random.Random(4242)
        checked = 0
        for trial in range(100):
            world = build_world(WorldSpec(16, 16, rng.randint(1, 5),
                                          rng.randint(0, 6), seed=31000 + trial))
            free = world.free_cells()
            start = Pose(*free[rng.randrange(len(free))], rng.randrange(4))
            goal = Pose(*free[rng.randrange(len(free))], rng.randrange(4))
            path = plan_path(world, start, goal)
            optimum = bfs_optimal_moves(world, start, goal)
            assert len(path) - 1 == optimum, f"world {trial}"
            checked += 1
        report(10, checked == 100,
               f"path optimality: A* count equals BFS optimum on {checked}/100 "
               f"random 16x16 worlds, exact")
