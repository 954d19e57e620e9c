"""Command-line entry points: dataset generation, training, inference,
evaluation and the gradient check suite.

Every run writes a config snapshot next to its outputs so it can be replayed
with --config; exit codes are 0 (ok), 2 (usage/config), 3 (runtime failure).
Env var GOVIG_REMOTE_URL overrides the remote backend endpoint.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from .backends import OracleBackend, RemoteBackend, ToyBackend
from .errors import (
    BackendError,
    BadRatios,
    InvalidSpec,
    MissingReference,
    NavgenError,
    NonFiniteLoss,
)
from .gridworld import EgoFrame, TrajConfig, WorldSpec, build_world
from .losses import finite_difference_suite
from .metrics import bleu4, cider_per_sample, meteor_lite, psnr, rouge_l, ssim
from .reasoning import ReasoningConfig, interleaved, one_pass
from .tokenizer import (
    INSTR,
    VIZ,
    assemble_prompt,
    build_codebook,
    default_vocab,
    frame_to_patches,
    load_codebook,
    load_vocab,
    quantize_frame,
    save_codebook,
    save_vocab,
)
from .toymodel import (
    ModelConfig,
    TrainConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _snapshot(args, out_dir: Path):
    doc = {k: v for k, v in vars(args).items()
           if k not in ("func", "config") and not k.startswith("_")}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump({"command": args.command, "args": doc}, fh, indent=1, sort_keys=True)


def _jsonable(x):
    if isinstance(x, float) and math.isinf(x):
        return "Infinity"
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_jsonable(v) for v in x]
    return x


def _fmt(x, width=8):
    if isinstance(x, str) or x is None:
        return str(x).rjust(width)
    if isinstance(x, float) and math.isinf(x):
        return "inf".rjust(width)
    return f"{x:.4f}".rjust(width) if isinstance(x, float) else str(x).rjust(width)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    ratios = [float(r) for r in args.ratios.split(",")]
    out = Path(args.out)
    cfg = TrajConfig(min_len=args.min_len, max_len=args.max_len,
                     frame_size=args.frame_size)

    worlds = []
    for i in range(args.worlds):
        spec = WorldSpec(args.width, args.height, args.rooms, args.landmarks,
                         seed=args.seed * 1000 + i)
        worlds.append(build_world(spec))
    trajs = ds_mod.sample_trajectories(
        worlds, args.trajs, cfg, seed=args.seed,
        min_goal_open=args.min_goal_open,
        distinct_goal_tau=args.distinct_goal_tau)
    splits = ds_mod.split_dataset(trajs, ratios, seed=args.seed)

    if args.real_like > 0:
        # held-out generator preset: different palette response and dithered
        # shading, standing in for an out-of-domain evaluation subset
        rl_worlds = []
        for i in range(max(1, args.worlds // 4)):
            spec = WorldSpec(args.width, args.height, args.rooms, args.landmarks,
                             seed=args.seed * 1000 + 777 + i)
            w = build_world(spec)
            w.palette.dither = True
            w.palette.falloff = 0.75
            w.palette.wall_rgb = (72, 78, 86)
            rl_worlds.append(w)
        rl_trajs = ds_mod.sample_trajectories(
            rl_worlds, args.real_like, cfg, seed=args.seed + 7,
            min_goal_open=args.min_goal_open,
            distinct_goal_tau=args.distinct_goal_tau, id_prefix="r")
        trajs = trajs + rl_trajs
        splits.append(ds_mod.DatasetSplit("real_like", sorted(t.traj_id for t in rl_trajs)))
        worlds = worlds + rl_worlds

    bundle = ds_mod.build_dataset(trajs, splits, k=args.k, m=args.m,
                                  frame_size=args.frame_size)
    ds_mod.write_dataset(bundle, out)

    train_ids = set(splits[0].traj_ids)
    train_frames = [f for t in trajs if t.traj_id in train_ids for f in t.frames]
    if not train_frames:
        train_frames = [f for t in trajs for f in t.frames]
    patches = np.concatenate(
        [frame_to_patches(f, args.patch_size) for f in train_frames])
    if len(patches) > 40000:
        stride = len(patches) // 40000 + 1
        patches = patches[::stride]
    codebook = build_codebook(patches, args.codebook_size, seed=args.seed)
    save_codebook(codebook, out / "codebook.bin")
    save_vocab(default_vocab(args.codebook_size), out / "vocab.json")
    with open(out / "worlds.json", "w") as fh:
        json.dump([w.to_json() for w in worlds], fh, sort_keys=True)

    _snapshot(args, out)
    print(f"dataset written to {out}")
    print(f"  worlds: {len(worlds)}  trajectories: {len(trajs)}")
    print(f"  viz samples: {len(bundle.viz_samples)}  instr samples: {len(bundle.instr_samples)}")
    for s in splits:
        print(f"  split {s.name}: {len(s.traj_ids)} trajectories")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _frame_tokens(bundle, codebook, traj_ids):
    tokens = {}
    for tid in traj_ids:
        traj = bundle.trajectories[tid]
        tokens[tid] = [quantize_frame(f, codebook) for f in traj.frames]
    return tokens


def build_token_sequences(bundle, codebook, vocab, split="train", k=None, m=None):
    """Tokenize one split's samples into training sequences.

    A `k` smaller than the dataset's stored window truncates each context to
    its most recent k frames (same targets, same sample count)."""
    k = k or bundle.k
    m = m or bundle.m
    ids = next(s.traj_ids for s in bundle.splits if s.name == split)
    idset = set(ids)
    tokens = _frame_tokens(bundle, codebook, ids)
    seqs = []
    for s in bundle.viz_samples:
        if s.traj_id not in idset or len(s.context) < k:
            continue
        t = tokens[s.traj_id]
        seqs.append(assemble_prompt(vocab, VIZ, [t[i] for i in s.context[-k:]],
                                    t[s.goal], target=t[s.target]))
    for s in bundle.instr_samples:
        if s.traj_id not in idset:
            continue
        t = tokens[s.traj_id]
        ctx = [t[s.initial]] + [t[i] for i in s.intermediates]
        seqs.append(assemble_prompt(vocab, INSTR, ctx, t[s.goal],
                                    target=vocab.encode_text(s.instruction),
                                    expect_context=m))
    return seqs


def cmd_train(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    bundle = ds_mod.read_dataset(data)
    codebook = load_codebook(data / "codebook.bin")
    vocab = load_vocab(data / "vocab.json")

    seqs = build_token_sequences(bundle, codebook, vocab, split="train",
                                 k=args.k or bundle.k)
    if not seqs:
        print("no training sequences in the dataset", file=sys.stderr)
        return EXIT_USAGE
    need = max(len(s) for s in seqs) + 1
    context = max(args.context, need)

    if args.resume:
        params, extra = load_checkpoint(args.resume)
    else:
        mcfg = ModelConfig(vocab_size=vocab.size, embed_dim=args.embed_dim,
                           n_layers=args.layers, n_heads=args.heads,
                           context_len=context)
        params = init_params(mcfg, seed=args.seed)

    tcfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                       batch_size=args.batch_size, grad_accum=args.grad_accum,
                       seed=args.seed, eps=args.eps, loss_variant=args.loss_variant,
                       optimizer=args.optimizer, momentum=args.momentum,
                       weight_decay=args.weight_decay)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    rows = []

    def log(epoch, loss):
        rows.append((epoch, loss))
        print(f"epoch {epoch}: loss {loss:.4f} ({time.monotonic() - t0:.1f}s)")

    try:
        params, trace = train(params, seqs, tcfg, codebook, vocab, log=log)
    except NonFiniteLoss as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    with open(out / "loss_trace.csv", "a" if args.resume else "w") as fh:
        if not args.resume:
            fh.write("epoch,loss\n")
        for epoch, loss in rows:
            fh.write(f"{epoch},{loss}\n")
    save_checkpoint(params, out / "model.ckpt", extra={
        "k": args.k or bundle.k, "m": bundle.m, "frame_size": bundle.frame_size,
        "eps": args.eps, "loss_variant": args.loss_variant,
    })
    _snapshot(args, out)
    print(f"checkpoint written to {out / 'model.ckpt'}; final loss {trace[-1]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _make_backend(args, bundle, traj):
    if args.backend == "oracle":
        return OracleBackend(traj)
    if args.backend == "toy":
        return args._toy_backend
    if args.backend == "remote":
        url = os.environ.get("GOVIG_REMOTE_URL") or args.remote_url
        if not url:
            raise BackendError("remote backend needs --remote-url or GOVIG_REMOTE_URL")
        return RemoteBackend(url, timeout=args.timeout)
    raise BackendError(f"unknown backend {args.backend}")


def cmd_infer(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    bundle = ds_mod.read_dataset(data)
    trajs = bundle.trajs_in(args.split)
    if not trajs:
        print(f"split {args.split!r} has no trajectories", file=sys.stderr)
        return EXIT_USAGE
    if args.limit:
        trajs = trajs[:args.limit]

    args._toy_backend = None
    if args.backend == "toy":
        if not args.checkpoint:
            print("--backend toy needs --checkpoint", file=sys.stderr)
            return EXIT_USAGE
        params, extra = load_checkpoint(args.checkpoint)
        codebook = load_codebook(data / "codebook.bin")
        vocab = load_vocab(data / "vocab.json")
        args._toy_backend = ToyBackend(params, vocab, codebook,
                                       frame_size=bundle.frame_size)
        if args.k is None:
            args.k = int(extra.get("k", bundle.k))
    if args.k is None:
        args.k = bundle.k

    cfg = ReasoningConfig(k=args.k, tau=args.tau, max_steps=args.max_steps)
    strategy = one_pass if args.strategy == "one-pass" else interleaved
    out.mkdir(parents=True, exist_ok=True)

    def run_episode(traj):
        if len(traj) <= cfg.k:
            return traj.traj_id, {"traj_id": traj.traj_id, "error": "trajectory shorter than context"}
        try:
            backend = _make_backend(args, bundle, traj)
            res = strategy(backend, traj.frames[:cfg.k], traj.frames[-1], cfg)
        except (BackendError, NavgenError) as exc:
            return traj.traj_id, {"traj_id": traj.traj_id, "error": str(exc)}
        frame_dir = out / traj.traj_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, frame in enumerate(res.predicted_frames):
            rel = f"{traj.traj_id}/pred_{i:03d}.png"
            (out / rel).write_bytes(frame.to_png_bytes())
            paths.append(rel)
        return traj.traj_id, res.to_json(traj.traj_id, args.strategy, paths)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_episode, trajs))
    else:
        results = [run_episode(t) for t in trajs]
    results.sort(key=lambda kv: kv[0])

    n_err = n_thresh = n_cap = 0
    for tid, doc in results:
        with open(out / f"{tid}.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        if "error" in doc:
            n_err += 1
        elif doc["terminated"] == "by_threshold":
            n_thresh += 1
        else:
            n_cap += 1
    summary = {"episodes": len(results), "by_threshold": n_thresh,
               "by_max_steps": n_cap, "errors": n_err,
               "strategy": args.strategy, "split": args.split, "k": cfg.k,
               "tau": cfg.tau}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    _snapshot(args, out)
    print(f"{len(results)} episodes -> {out} "
          f"(threshold {n_thresh}, cap {n_cap}, errors {n_err})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _episode_image_scores(result_dir: Path, doc, traj, k):
    preds = [EgoFrame.from_png_bytes((result_dir / rel).read_bytes())
             for rel in doc["frame_paths"]]
    gt = traj.frames[k:]
    n = min(len(preds), len(gt))
    if n == 0:
        return None, None
    ssims = [ssim(preds[i], gt[i]) for i in range(n)]
    psnrs = [psnr(preds[i], gt[i]) for i in range(n)]
    return float(np.mean(ssims)), float(np.mean(psnrs))


def evaluate_results(result_dirs, bundle, jobs: int = 1):
    """Score every episode result against its ground-truth trajectory."""
    blocks = []
    for rdir in result_dirs:
        rdir = Path(rdir)
        episode_files = sorted(p for p in rdir.glob("*.json")
                               if p.name not in ("summary.json", "config.json"))
        episodes = []
        for p in episode_files:
            with open(p) as fh:
                episodes.append(json.load(fh))
        episodes = [e for e in episodes if "error" not in e]
        if not episodes:
            raise MissingReference(f"no successful episode results in {rdir}")
        k = None
        summary_path = rdir / "summary.json"
        if summary_path.exists():
            with open(summary_path) as fh:
                k = json.load(fh).get("k")

        per_split = {}
        for doc in sorted(episodes, key=lambda d: d["traj_id"]):
            tid = doc["traj_id"]
            if tid not in bundle.trajectories:
                raise MissingReference(f"episode {tid} has no trajectory in the dataset")
            traj = bundle.trajectories[tid]
            split = bundle.split_of(tid) or "unknown"
            per_split.setdefault(split, []).append((doc, traj))

        split_blocks = {}
        for split, items in sorted(per_split.items()):
            refs = [[traj.instruction] for _, traj in items]
            cands = [doc["instruction"] for doc, _ in items]
            cider_scores = cider_per_sample(cands, refs)
            rows = []

            def score_one(idx):
                doc, traj = items[idx]
                s_img, s_psnr = _episode_image_scores(rdir, doc, traj,
                                                      k if k is not None else bundle.k)
                return {
                    "traj_id": doc["traj_id"],
                    "bleu4": bleu4(doc["instruction"], [traj.instruction]),
                    "cider": cider_scores[idx],
                    "meteor": meteor_lite(doc["instruction"], [traj.instruction]),
                    "rouge_l": rouge_l(doc["instruction"], [traj.instruction]),
                    "ssim": s_img,
                    "psnr": s_psnr,
                    "steps": doc["steps"],
                    "terminated": doc["terminated"],
                }

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    rows = list(pool.map(score_one, range(len(items))))
            else:
                rows = [score_one(i) for i in range(len(items))]
            rows.sort(key=lambda r: r["traj_id"])

            def agg(key):
                vals = [r[key] for r in rows if r[key] is not None]
                return float(np.mean(vals)) if vals else None

            split_blocks[split] = {
                "per_sample": rows,
                "aggregates": {m: agg(m) for m in
                               ("bleu4", "cider", "meteor", "rouge_l", "ssim", "psnr")},
            }
        blocks.append({"label": rdir.name, "splits": split_blocks})
    return blocks


def format_table(blocks) -> str:
    """Aligned text table, one row per results set and split."""
    cols = ["BL-4", "CI", "ME", "RO-L", "SSIM", "PSNR"]
    keys = ["bleu4", "cider", "meteor", "rouge_l", "ssim", "psnr"]
    label_w = max([len("results/split")] +
                  [len(f"{b['label']}/{s}") for b in blocks for s in b["splits"]])
    lines = ["results/split".ljust(label_w) + "".join(c.rjust(9) for c in cols)]
    lines.append("-" * (label_w + 9 * len(cols)))
    for b in blocks:
        for split, block in b["splits"].items():
            a = block["aggregates"]
            row = f"{b['label']}/{split}".ljust(label_w)
            row += "".join(_fmt(a[k], 9) if a[k] is not None else "     -   " for k in keys)
            lines.append(row)
    return "\n".join(lines)


def cmd_eval(args) -> int:
    data = Path(args.data)
    bundle = ds_mod.read_dataset(data)
    for rdir in args.results:
        if not Path(rdir).is_dir() or not list(Path(rdir).glob("*.json")):
            print(f"results dir {rdir} is empty or missing", file=sys.stderr)
            return EXIT_USAGE
    try:
        blocks = evaluate_results(args.results, bundle, jobs=args.jobs)
    except MissingReference as exc:
        print(f"eval failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    table = format_table(blocks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(_jsonable(blocks), fh, indent=1, sort_keys=True)
    (out / "table.txt").write_text(table + "\n")
    _snapshot(args, out)
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    t0 = time.monotonic()
    out = finite_difference_suite(instances=args.instances, seed=args.seed)
    elapsed = time.monotonic() - t0
    print(f"visual loss max relative gradient error: {out['visual_max_rel_err']:.3e}")
    print(f"text loss max relative gradient error:   {out['text_max_rel_err']:.3e}")
    print(f"({args.instances} instances in {elapsed:.1f}s)")
    ok = out["visual_max_rel_err"] < 1e-4 and out["text_max_rel_err"] < 1e-4
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navgen",
        description="Generate, train, infer and evaluate the egocentric "
                    "navigation-instruction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a gridworld dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--worlds", type=int, default=8)
    g.add_argument("--trajs", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--rooms", type=int, default=4)
    g.add_argument("--landmarks", type=int, default=6)
    g.add_argument("--frame-size", type=int, default=32)
    g.add_argument("--patch-size", type=int, default=4)
    g.add_argument("--codebook-size", type=int, default=64)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--m", type=int, default=3)
    g.add_argument("--min-len", type=int, default=8)
    g.add_argument("--max-len", type=int, default=29)
    g.add_argument("--ratios", default="0.65,0.05,0.11,0.19")
    g.add_argument("--real-like", type=int, default=0)
    g.add_argument("--min-goal-open", type=int, default=4)
    g.add_argument("--distinct-goal-tau", type=float, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the toy model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--grad-accum", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eps", type=float, default=0.1)
    t.add_argument("--loss-variant", choices=["token_discrepancy", "smoothed_ce"],
                   default="token_discrepancy")
    t.add_argument("--optimizer", choices=["sgd", "adamw"], default="adamw")
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--embed-dim", type=int, default=64)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=2)
    t.add_argument("--context", type=int, default=512)
    t.add_argument("--k", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a reasoning strategy over a split")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--backend", choices=["toy", "oracle", "remote"], default="oracle")
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--strategy", choices=["one-pass", "interleaved"], default="one-pass")
    i.add_argument("--split", default="test")
    i.add_argument("--tau", type=float, default=0.7)
    i.add_argument("--k", type=int, default=None)
    i.add_argument("--max-steps", type=int, default=None)
    i.add_argument("--remote-url", default=None)
    i.add_argument("--timeout", type=float, default=30.0)
    i.add_argument("--jobs", type=int, default=1)
    i.add_argument("--limit", type=int, default=None)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score inference results against the dataset")
    e.add_argument("--results", action="append", required=True,
                   help="results directory; repeat for side-by-side comparison")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of both losses")
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    for p in (g, t, i, e, c):
        p.add_argument("--config", default=None,
                       help="JSON snapshot to preload argument defaults from")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    # a --config snapshot preloads defaults; explicit flags still win
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            with open(cfg_path) as fh:
                snapshot = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"cannot read config snapshot: {exc}", file=sys.stderr)
            return EXIT_USAGE
        args = parser.parse_args(argv)
        for key, value in snapshot.get("args", {}).items():
            flag = "--" + key.replace("_", "-")
            if flag not in argv and hasattr(args, key):
                setattr(args, key, value)
    else:
        args = parser.parse_args(argv)

    try:
        return args.func(args)
    except (BadRatios, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NavgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
