"""Command-line pipeline: codebook fitting, data generation, training,
evaluation and diagnostic curves.

Every command is deterministic for fixed flags and --seed (sub-seeds are
derived per component), outputs are written atomically, and any partial
outputs are removed if a command fails. The only non-reproducible field in
any output is the ``wall_ms`` key of the metrics JSON.

Set UNITDIFF_THREADS to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import codebook as cbk
from . import denoiser as dn
from . import synthbench as sb
from .hybrid import SamplerConfig, intermediate_quality, knn_accuracy_curve, sample
from .rng import derive_seed
from .schedule import (
    linear_schedule,
    schedule_from_config,
    schedule_to_config,
    uniform_schedule,
)

SYSTEMS = ("hybrid", "multinomial", "absorbing")


def _limit_threads() -> None:
    cap = os.environ.get("UNITDIFF_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise SystemExit(f"UNITDIFF_THREADS must be an integer, got {cap!r}")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


class _OutputSet:
    """Track declared outputs so failures leave no partial files behind."""

    def __init__(self):
        self.paths: list[Path] = []

    def declare(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.paths:
            if p.exists():
                p.unlink()


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _schedule_from_flags(kind: str, T: int, beta0: float):
    if kind == "linear":
        return linear_schedule(T)
    if kind == "uniform":
        return uniform_schedule(T, beta0)
    raise SystemExit(f"unknown schedule {kind!r}")


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_codebook(args, out: _OutputSet) -> None:
    path = out.declare(args.out)
    if args.fit_points is not None:
        points = np.load(args.fit_points)
        cb = cbk.fit_kmeans(points, args.k, max_iters=args.max_iters, seed=args.seed)
    else:
        cb = cbk.make_structured_codebook(
            args.classes, args.per_class, args.dim,
            meta_scale=args.s_meta, intra_scale=args.s_intra, seed=args.seed,
        )
    cbk.save_codebook(cb, path)
    print(f"K={cb.K} D={cb.D} min_gap={cbk.min_centroid_gap(cb):.6g}")


def cmd_gen_data(args, out: _OutputSet) -> None:
    cb = cbk.load_codebook(args.codebook)
    if args.train_n < 1 or args.test_n < 1:
        raise SystemExit("--train-n and --test-n must be >= 1")
    out_dir = Path(args.out_dir)
    train_path = out.declare(out_dir / "train.jsonl")
    test_path = out.declare(out_dir / "test.jsonl")
    src_range = (args.src_len_min, args.src_len_max)
    rep_range = (args.repeat_min, args.repeat_max)
    train = sb.generate_dataset(
        cb, args.train_n, src_range, rep_range,
        seed=derive_seed(args.seed, "train"), split="train",
    )
    test = sb.generate_dataset(
        cb, args.test_n, src_range, rep_range,
        seed=derive_seed(args.seed, "test"), split="test", exclude=train,
    )
    sb.save_dataset_jsonl(train, train_path)
    sb.save_dataset_jsonl(test, test_path)
    print(f"wrote {len(train)} train / {len(test)} test pairs to {out_dir}")


def cmd_train(args, out: _OutputSet) -> None:
    cb = cbk.load_codebook(args.codebook)
    ds = sb.load_dataset_jsonl(args.data, cb, split="train")
    ns = _schedule_from_flags(args.schedule, args.T, args.beta0)
    out_dir = Path(args.out_dir)
    ckpt_path = out.declare(out_dir / "checkpoint.json")
    out.declare(out_dir / "checkpoint.bin")
    loss_path = out.declare(out_dir / "loss.csv")
    n_classes = cb.n_classes if cb.meta_labels is not None else int(max(p.source.max() for p in ds.pairs)) + 1
    config = dn.desk_config(
        cb.K, n_classes,
        embed_dim=args.embed_dim, heads=args.heads,
        enc_layers=args.enc_layers, dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim, max_len=args.max_len, dropout=args.dropout,
    )
    tc = dn.TrainConfig(
        lr=args.lr, warmup_steps=args.warmup, total_steps=args.steps,
        batch_size=args.batch, label_smoothing=args.label_smoothing,
        seed=derive_seed(args.seed, "train_loop"),
    )
    model = dn.Denoiser(config, seed=derive_seed(args.seed, "init"))
    try:
        model, history = dn.train(model, ds, args.system, cb, ns, tc)
    except dn.TrainingDiverged as e:
        raise SystemExit(f"training diverged: {e}")
    dn.save_checkpoint(model, ckpt_path, extra={
        "system": args.system,
        "schedule": schedule_to_config(ns),
        "step": tc.total_steps,
        "seed": args.seed,
    })
    rows = ["step,loss,lr"]
    rows += [f"{s},{_fmt(l)},{_fmt(lr)}" for s, l, lr in history]
    _write_text(loss_path, "\n".join(rows) + "\n")
    final = history[-1][1] if history else float("nan")
    print(f"trained {args.system} for {tc.total_steps} steps; final loss {final:.4f}")


def _load_model_and_schedule(args):
    model, manifest = dn.load_checkpoint(args.checkpoint)
    ns = schedule_from_config(manifest["schedule"])
    system = manifest.get("system", "hybrid")
    return model, ns, system


class _OracleDenoiser:
    """Pipeline self-test stand-in: always predicts the reference pair."""

    def __init__(self, dataset, config):
        self.config = config
        self._by_source = {tuple(p.source): p.target for p in dataset.pairs}

    def forward(self, x_t, t, source):
        target = self._by_source[tuple(np.asarray(source))]
        logits = np.zeros((len(x_t), self.config.vocab_size))
        if len(x_t) == len(target):
            logits[np.arange(len(target)), target] = 100.0
        return logits

    def predict_length(self, source, beam=1):
        target = self._by_source[tuple(np.asarray(source))]
        n = len(target)
        others = [l for l in range(1, self.config.max_len + 1) if l != n]
        return np.array([n] + others[: beam - 1], dtype=np.int64)


def cmd_eval(args, out: _OutputSet) -> None:
    cb = cbk.load_codebook(args.codebook)
    ds = sb.load_dataset_jsonl(args.data, cb, split="test")
    metrics_path = out.declare(args.out)
    model, ns, system = _load_model_and_schedule(args)
    if args.oracle_denoiser:
        # one reference per source: the oracle is a per-source lookup table
        seen, unique = set(), []
        for p in ds.pairs:
            if tuple(p.source) not in seen:
                seen.add(tuple(p.source))
                unique.append(p)
        ds = sb.Dataset(pairs=tuple(unique), codebook=cb, split=ds.split, seed=ds.seed)
        model = _OracleDenoiser(ds, model.config)
    cfg = SamplerConfig(steps=args.steps, mode=args.mode, length_beam=args.beam)
    report = sb.evaluate_system(system, model, cb, ns, ds, cfg,
                                seed=derive_seed(args.seed, "eval"))
    _write_text(metrics_path, json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    if args.comparison:
        comp = Path(args.comparison)
        comp.parent.mkdir(parents=True, exist_ok=True)
        header = "system,steps,mode,beam,meta_bleu,unit_acc,edit,seed"
        row = (
            f"{report.system},{report.steps},{cfg.mode},{cfg.length_beam},"
            f"{_fmt(report.meta_bleu)},{_fmt(report.unit_accuracy)},"
            f"{_fmt(report.mean_edit_distance)},{args.seed}"
        )
        if comp.exists():
            with open(comp, "a", encoding="utf-8") as f:
                f.write(row + "\n")
        else:
            _write_text(comp, header + "\n" + row + "\n")
    print(f"{report.system} steps={report.steps} meta_bleu={report.meta_bleu:.2f} "
          f"unit_acc={report.unit_accuracy:.3f} edit={report.mean_edit_distance:.2f}")


def cmd_curves_knn(args, out: _OutputSet) -> None:
    cb = cbk.load_codebook(args.codebook)
    ds = sb.load_dataset_jsonl(args.data, cb, split="test")
    ns = _schedule_from_flags(args.schedule, args.T, args.beta0)
    path = out.declare(args.out)
    if args.ts:
        ts = [int(v) for v in args.ts.split(",")]
    else:
        grid = max(1, ns.T // args.points)
        ts = list(range(1, ns.T + 1, grid))
        if ts[-1] != ns.T:
            ts.append(ns.T)
    data = [p.target for p in ds.pairs]
    curve = knn_accuracy_curve(cb, ns, data, ts, seed=derive_seed(args.seed, "knn_curve"))
    rows = ["t,value"] + [f"{t},{_fmt(v)}" for t, v in curve]
    _write_text(path, "\n".join(rows) + "\n")
    print(f"wrote {len(curve)} curve points to {path}")


def cmd_curves_intermediate(args, out: _OutputSet) -> None:
    cb = cbk.load_codebook(args.codebook)
    ds = sb.load_dataset_jsonl(args.data, cb, split="test")
    path = out.declare(args.out)
    model, ns, system = _load_model_and_schedule(args)
    if system != "hybrid":
        raise SystemExit("intermediate curves require a hybrid checkpoint")
    cfg = SamplerConfig(steps=args.steps, mode=args.mode, length_beam=1,
                        track_intermediate=True)
    pairs = ds.pairs[: args.limit] if args.limit else ds.pairs
    per_step_hyps: list[list[np.ndarray]] = []
    step_ts: list[int] = []
    refs = []
    for i, pair in enumerate(pairs):
        _, trace = sample(model, cb, ns, pair.source, len(pair.target), cfg,
                          seed=derive_seed(args.seed, "intermediate", i))
        refs.append(pair.target)
        if not step_ts:
            step_ts = [t for t, _ in trace]
            per_step_hyps = [[] for _ in trace]
        for j, (_, x0_hat) in enumerate(trace):
            per_step_hyps[j].append(x0_hat)
    rows = ["step,t,score"]
    for j, t in enumerate(step_ts):
        score = sb.meta_bleu(cb, per_step_hyps[j], refs)
        rows.append(f"{j},{t},{_fmt(score)}")
    _write_text(path, "\n".join(rows) + "\n")
    print(f"wrote {len(step_ts)} curve points to {path}")


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    mc = sub.add_parser("make-codebook", help="write a structured or k-means codebook")
    mc.add_argument("--classes", type=int, default=cbk.DEFAULT_CLASSES)
    mc.add_argument("--per-class", type=int, default=cbk.DEFAULT_PER_CLASS)
    mc.add_argument("--dim", type=int, default=cbk.DEFAULT_DIM)
    mc.add_argument("--s-meta", type=float, default=cbk.DEFAULT_META_SCALE)
    mc.add_argument("--s-intra", type=float, default=cbk.DEFAULT_INTRA_SCALE)
    mc.add_argument("--fit-points", type=str, default=None,
                    help="fit k-means to points from this .npy file instead")
    mc.add_argument("--k", type=int, default=100, help="clusters for --fit-points")
    mc.add_argument("--max-iters", type=int, default=100)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--out", type=str, required=True)
    mc.set_defaults(func=cmd_make_codebook)

    gd = sub.add_parser("gen-data", help="write train/test JSONL datasets")
    gd.add_argument("--codebook", type=str, required=True)
    gd.add_argument("--train-n", type=int, default=sb.DEFAULT_TRAIN_PAIRS)
    gd.add_argument("--test-n", type=int, default=sb.DEFAULT_TEST_PAIRS)
    gd.add_argument("--src-len-min", type=int, default=sb.DEFAULT_SRC_LEN_RANGE[0])
    gd.add_argument("--src-len-max", type=int, default=sb.DEFAULT_SRC_LEN_RANGE[1])
    gd.add_argument("--repeat-min", type=int, default=sb.DEFAULT_REPEAT_RANGE[0])
    gd.add_argument("--repeat-max", type=int, default=sb.DEFAULT_REPEAT_RANGE[1])
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--out-dir", type=str, required=True)
    gd.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a denoiser for one system")
    tr.add_argument("--codebook", type=str, required=True)
    tr.add_argument("--data", type=str, required=True)
    tr.add_argument("--system", choices=SYSTEMS, default="hybrid")
    tr.add_argument("--schedule", choices=("linear", "uniform"), default=None,
                    help="default: uniform for hybrid, linear for baselines")
    tr.add_argument("--T", type=int, default=1000)
    tr.add_argument("--beta0", type=float, default=0.3)
    tr.add_argument("--steps", type=int, default=5000)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--lr", type=float, default=3e-4)
    tr.add_argument("--warmup", type=int, default=500)
    tr.add_argument("--label-smoothing", type=float, default=0.2)
    tr.add_argument("--embed-dim", type=int, default=64)
    tr.add_argument("--heads", type=int, default=4)
    tr.add_argument("--enc-layers", type=int, default=2)
    tr.add_argument("--dec-layers", type=int, default=2)
    tr.add_argument("--ffn-dim", type=int, default=128)
    tr.add_argument("--max-len", type=int, default=80)
    tr.add_argument("--dropout", type=float, default=0.1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out-dir", type=str, required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    ev.add_argument("--codebook", type=str, required=True)
    ev.add_argument("--data", type=str, required=True)
    ev.add_argument("--checkpoint", type=str, required=True)
    ev.add_argument("--steps", type=int, default=50)
    ev.add_argument("--beam", type=int, default=5)
    ev.add_argument("--mode", choices=("posterior", "renoise"), default="posterior")
    ev.add_argument("--oracle-denoiser", action="store_true",
                    help="replace the model with a perfect oracle (self-test)")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", type=str, required=True)
    ev.add_argument("--comparison", type=str, default=None,
                    help="append a row to this comparison CSV")
    ev.set_defaults(func=cmd_eval)

    cv = sub.add_parser("curves", help="diagnostic curves")
    cvsub = cv.add_subparsers(dest="curve", required=True)

    ck = cvsub.add_parser("knn-accuracy", help="forward-corruption survival per t")
    ck.add_argument("--codebook", type=str, required=True)
    ck.add_argument("--data", type=str, required=True)
    ck.add_argument("--schedule", choices=("linear", "uniform"), default="linear")
    ck.add_argument("--T", type=int, default=1000)
    ck.add_argument("--beta0", type=float, default=0.3)
    ck.add_argument("--points", type=int, default=50, help="grid resolution")
    ck.add_argument("--ts", type=str, default=None, help="comma-separated timesteps")
    ck.add_argument("--seed", type=int, default=0)
    ck.add_argument("--out", type=str, required=True)
    ck.set_defaults(func=cmd_curves_knn)

    ci = cvsub.add_parser("intermediate", help="quality of intermediate predictions")
    ci.add_argument("--codebook", type=str, required=True)
    ci.add_argument("--data", type=str, required=True)
    ci.add_argument("--checkpoint", type=str, required=True)
    ci.add_argument("--steps", type=int, default=50)
    ci.add_argument("--mode", choices=("posterior", "renoise"), default="posterior")
    ci.add_argument("--limit", type=int, default=None, help="max pairs to decode")
    ci.add_argument("--seed", type=int, default=0)
    ci.add_argument("--out", type=str, required=True)
    ci.set_defaults(func=cmd_curves_intermediate)

    return p


def main(argv=None) -> int:
    _limit_threads()
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "train" and args.schedule is None:
        args.schedule = "uniform" if args.system == "hybrid" else "linear"
    out = _OutputSet()
    try:
        args.func(args, out)
    except KeyboardInterrupt:
        out.cleanup()
        raise
    except SystemExit as e:
        out.cleanup()
        if isinstance(e.code, int):
            return e.code
        print(f"error: {e.code}", file=sys.stderr)
        return 1
    except Exception as e:
        out.cleanup()
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
