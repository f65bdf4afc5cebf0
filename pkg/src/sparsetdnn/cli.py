"""Command line entry point: ``sparsetdnn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import eval as ev
from . import frontend as fe
from . import packed as pk
from . import sparsity as sp
from . import trainer as tr
from .model import CKPT_MAGIC, ModelParams, Topology, embed, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("sparsetdnn")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.replace("-", "_")] = v
    return values


# ---------------------------------------------------------------------------
# shared option groups


def add_train_options(p):
    g = p.add_argument_group("training")
    g.add_argument("--data", required=True, help="dataset directory (utt2spk + .ftmx files)")
    g.add_argument("--val", help="validation dataset directory")
    g.add_argument("--trials", help="trial list over --val utterances")
    g.add_argument("--preset", choices=["desk", "paper"], default="paper",
                   help="paper: 30/20/20 epochs, lr 0.01->0.0001, batch 256; desk: small synthetic runs")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr-start", type=float)
    g.add_argument("--lr-end", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--segment-min", type=float, help="crop length lower bound, seconds")
    g.add_argument("--segment-max", type=float)
    g.add_argument("--margin", type=float, default=0.2)
    g.add_argument("--am-scale", type=float, default=30.0)
    g.add_argument("--metrics", help="append per-epoch metrics CSV here")


def train_config(args, stage) -> tr.TrainConfig:
    if args.preset == "desk":
        cfg = tr.desk_config(stage)
    else:
        cfg = tr.TrainConfig(stage=stage, epochs=tr.PAPER_EPOCHS[tr.stage_name(stage)])
    over = dict(seed=args.seed, jobs=args.jobs, margin=args.margin, scale=args.am_scale)
    for key in ("epochs", "lr_start", "lr_end", "batch_size", "weight_decay", "momentum"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    lo, hi = cfg.segment_range
    over["segment_range"] = (args.segment_min if args.segment_min is not None else lo,
                             args.segment_max if args.segment_max is not None else hi)
    return replace(cfg, **over)


def load_validation(args):
    if not args.val:
        return None
    ds = fe.load_dataset(args.val)
    if args.trials:
        trials = ev.read_trials(args.trials)
    else:
        trials = ev.make_trials(ds.utt_ids, ds.labels, 2000, seed=args.seed)
    return tr.Validation(ds.feats, ds.utt_ids, trials)


def write_metrics(args, result: tr.StageResult):
    if not args.metrics:
        return
    path = Path(args.metrics)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a") as f:
        f.write(tr.metrics_csv(result.log, header=fresh))


def mask_path(ckpt) -> Path:
    return Path(str(ckpt) + ".mask")


# ---------------------------------------------------------------------------
# subcommands


def cmd_features(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for wav in args.wavs:
        sig = fe.parse_wav(Path(wav).read_bytes())
        feats = fe.log_mel(sig)
        if not args.no_cmn:
            feats = fe.sliding_cmn(feats)
        fe.write_features(feats, out / (Path(wav).stem + ".ftmx"))
        print(f"{wav}: {feats.shape[0]} frames")


def cmd_synth(args):
    cfg = fe.SynthConfig(args.speakers, args.utts, (args.min_frames, args.max_frames), args.seed,
                         args.noise, args.mean_scale, args.latent_dim, args.speaker_offset)
    ds = fe.synth_dataset(cfg)
    fe.save_dataset(ds, args.out)
    if args.trials:
        trials = ev.make_trials(ds.utt_ids, ds.labels, args.trials, seed=args.seed)
        ev.write_trials(trials, Path(args.out) / "trials.txt")
    print(f"wrote {len(ds)} utterances of {args.speakers} speakers to {args.out}")


def cmd_train_baseline(args):
    ds = fe.load_dataset(args.data)
    n_classes = int(ds.labels.max()) + 1
    topo = Topology.table1(args.scale)
    init = init_params(topo, n_classes, np.random.default_rng(args.seed))
    res = tr.run_stage(train_config(args, tr.Baseline()), ds.feats, ds.labels, init, load_validation(args))
    save_checkpoint(res.params, args.out)
    write_metrics(args, res)
    print(f"baseline saved to {args.out}")


def cmd_sparsify(args):
    ds = fe.load_dataset(args.data)
    init = load_checkpoint(args.init)
    stage = tr.Sparsify(args.lam, sp.Granularity.parse(args.granularity), args.tau)
    res = tr.run_stage(train_config(args, stage), ds.feats, ds.labels, init)
    save_checkpoint(res.params, args.out)
    sp.save_mask(res.mask, mask_path(args.out))
    write_metrics(args, res)
    sys.stdout.write(sp.report_csv(res.params, res.mask))


def cmd_finetune(args):
    ds = fe.load_dataset(args.data)
    init = load_checkpoint(args.init)
    mask = sp.load_mask(args.mask or mask_path(args.init))
    res = tr.run_stage(train_config(args, tr.FineTune(mask)), ds.feats, ds.labels, init, load_validation(args))
    save_checkpoint(res.params, args.out)
    sp.save_mask(mask, mask_path(args.out))
    write_metrics(args, res)
    sys.stdout.write(sp.report_csv(res.params, mask))


SWEEP_FIELDS = ["lambda", "granularity", "nonzero_params", "sparsity_l1", "sparsity_l2",
                "sparsity_l3", "sparsity_l4", "eer", "min_dcf"]


def cmd_sweep(args):
    ds = fe.load_dataset(args.data)
    base = load_checkpoint(args.init)
    val = load_validation(args)
    if val is None:
        raise UsageError("sweep needs --val to score EER/minDCF")
    gran = sp.Granularity.parse(args.granularity)
    lams = [float(x) for x in args.lambdas.split(",")]
    rows = []
    for lam in lams:
        res = tr.run_stage(train_config(args, tr.Sparsify(lam, gran, args.tau)), ds.feats, ds.labels, base)
        fine = tr.run_stage(train_config(args, tr.FineTune(res.mask)), ds.feats, ds.labels, res.params, val)
        e, d = tr.evaluate(fine.params, val.feats, val.utt_ids, val.trials)
        row = [lam, str(gran), sp.count_nonzero_params(fine.params, res.mask),
               *(f"{f:.6f}" for f in res.mask.fractions()), f"{e:.4f}", f"{d:.4f}"]
        rows.append(row)
        log.info("lambda %g: %s", lam, row)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        w.writerows(rows)
    print(Path(args.out).read_text(), end="")


def cmd_export(args):
    params = load_checkpoint(args.init)
    mpath = args.mask or (mask_path(args.init) if mask_path(args.init).exists() else None)
    if mpath:
        model = sp.compact(params, sp.load_mask(mpath))
    else:
        model = sp.compact(params, sp.SparsityMask.empty(sp.build_groups(params.topology, sp.CHUNK8)))
    pm = pk.quantize(model, pk.QuantScheme.parse(args.scheme))
    pk.save_packed(pm, args.out)
    print(f"packed model: {Path(args.out).stat().st_size} bytes, live chunks {pm.alive_fraction():.3f}")


def load_model(path):
    data = Path(path).read_bytes()
    if data[:4] == CKPT_MAGIC:
        return load_checkpoint(path)
    return pk.deserialize(data)


def embed_fn(model):
    if isinstance(model, ModelParams):
        return lambda f: embed(model, np.asarray(f, np.float64))
    runner = pk.SparseRunner(model)
    return runner.run


def cmd_embed(args):
    ds = fe.load_dataset(args.data)
    fn = embed_fn(load_model(args.model))
    with open(args.out, "w") as f:
        for uid, feats in zip(ds.utt_ids, ds.feats):
            f.write(uid + " " + " ".join(f"{v:.8g}" for v in fn(feats)) + "\n")
    print(f"{len(ds)} embeddings written to {args.out}")


def read_embeddings(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out


def cmd_score(args):
    trials = ev.read_trials(args.trials)
    s = ev.score_trials(read_embeddings(args.embeddings), trials)
    ev.write_trials(trials, args.out, s.scores)
    print(f"scored {len(trials)} trials")


def cmd_eval(args):
    s = ev.read_scores(args.scores)
    print(f"EER = {ev.eer(s):.4f} %")
    print(f"minDCF (p_target={args.p_target}) = {ev.min_dcf(s, args.p_target):.4f}")


def cmd_bench(args):
    pm = pk.load_packed(args.packed)
    dense = pk.load_packed(args.dense) if args.dense else None
    feats = np.random.default_rng(args.seed).normal(size=(args.frames, pm.topology.feat_dim)).astype(np.float32)
    r = pk.benchmark(pm, dense, feats, args.repeats)
    text = pk.bench_csv([(Path(args.packed).stem, 1 - pm.alive_fraction(), r)])
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_report(args):
    with open(args.sweep_csv) as f:
        rows = list(csv.DictReader(f))
    missing = set(SWEEP_FIELDS) - set(rows[0] if rows else {})
    if missing:
        raise ValueError(f"{args.sweep_csv}: missing columns {sorted(missing)}")
    print(f"{'granularity':>11} {'lambda':>10} {'size(M)':>8} {'EER(%)':>7} {'minDCF':>7}  sparsity l1..l4")
    for r in rows:
        spars = " ".join(f"{float(r[f'sparsity_l{i}']):.3f}" for i in range(1, 5))
        print(f"{r['granularity']:>11} {float(r['lambda']):>10.4g} {int(r['nonzero_params']) / 1e6:>8.4f} "
              f"{float(r['eer']):>7.2f} {float(r['min_dcf']):>7.3f}  {spars}")
    if args.bench_csv:
        with open(args.bench_csv) as f:
            for r in csv.DictReader(f):
                print(f"bench {r['model']}: sparsity {float(r['sparsity']):.3f} speedup {float(r['speedup']):.2f}x "
                      f"MACs {r['sparse_macs']}/{r['dense_macs']}")
    if args.svg:
        plot_sweep(rows, args.svg)
        print(f"figure written to {args.svg}")


def plot_sweep(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for gran in sorted({r["granularity"] for r in rows}):
        sel = sorted((r for r in rows if r["granularity"] == gran), key=lambda r: int(r["nonzero_params"]))
        x = [int(r["nonzero_params"]) / 1e6 for r in sel]
        axes[0].plot(x, [float(r["eer"]) for r in sel], "o-", label=gran)
        axes[1].plot(x, [float(r["min_dcf"]) for r in sel], "o-", label=gran)
    for ax, name in zip(axes, ("EER (%)", "minDCF")):
        ax.set_xlabel("non-zero parameters (M)")
        ax.set_ylabel(name)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------


def build_parser() -> tuple[Parser, dict]:
    parser = Parser(prog="sparsetdnn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="optional 'key = value' file; flags override it")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1, help="gradient workers; 1 is bit-reproducible")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    subs = {}

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        subs[name] = p
        return p

    p = add("features", cmd_features, "WAV files to log-mel feature dumps")
    p.add_argument("wavs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-cmn", action="store_true", help="skip sliding mean normalisation")

    p = add("synth", cmd_synth, "generate a synthetic speaker dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=64)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--min-frames", type=int, default=100)
    p.add_argument("--max-frames", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--mean-scale", type=float, default=1.2)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--speaker-offset", type=int, default=0)
    p.add_argument("--trials", type=int, default=0, help="also write N random trials")

    p = add("train-baseline", cmd_train_baseline, "stage 1: dense AM-softmax training")
    add_train_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0, help="width multiplier on Table-1 dims (desk runs use 0.125)")

    p = add("sparsify", cmd_sparsify, "stage 2: group Lasso training + thresholding")
    add_train_options(p)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--granularity", default="chunk8")
    p.add_argument("--tau", type=float, default=sp.DEFAULT_TAU)

    p = add("finetune", cmd_finetune, "stage 3: masked fine-tuning")
    add_train_options(p)
    p.add_argument("--init", required=True)
    p.add_argument("--mask", help="mask sidecar (default: <init>.mask)")
    p.add_argument("--out", required=True)

    p = add("sweep", cmd_sweep, "sparsify + fine-tune over several lambdas")
    add_train_options(p)
    p.add_argument("--init", required=True, help="baseline checkpoint")
    p.add_argument("--lambdas", required=True)
    p.add_argument("--granularity", default="chunk8")
    p.add_argument("--tau", type=float, default=sp.DEFAULT_TAU)
    p.add_argument("--out", required=True)

    p = add("export", cmd_export, "quantize and pack a checkpoint")
    p.add_argument("--init", required=True)
    p.add_argument("--mask")
    p.add_argument("--scheme", default="int16c8", choices=[s.name for s in pk.SCHEMES])
    p.add_argument("--out", required=True)

    p = add("embed", cmd_embed, "embeddings for every utterance of a dataset")
    p.add_argument("--model", required=True, help="checkpoint or packed model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "cosine-score a trial list")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "EER and minDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--p-target", type=float, default=0.01)

    p = add("bench", cmd_bench, "sparse vs dense packed inference timing")
    p.add_argument("--packed", required=True)
    p.add_argument("--dense", help="dense packed reference (default: same model, all chunks)")
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--out")

    p = add("report", cmd_report, "summarise sweep/bench CSVs")
    p.add_argument("--sweep-csv", required=True)
    p.add_argument("--bench-csv")
    p.add_argument("--svg")
    return parser, subs


def parse_args(argv=None):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        sub = subs[args.command]
        known = {a.dest for a in sub._actions} | {a.dest for a in parser._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        flags = {a.dest: a for a in sub._actions}
        for k, v in values.items():
            if k in flags and isinstance(flags[k], argparse._StoreTrueAction):
                values[k] = v.lower() in ("1", "true", "yes")
        # file values become defaults; anything given on the command line wins
        top = {k: v for k, v in values.items() if k in {a.dest for a in parser._actions}}
        parser.set_defaults(**top)
        sub.set_defaults(**{k: v for k, v in values.items() if k not in top})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse: --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"sparsetdnn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except tr.DivergenceError as exc:
        print(f"sparsetdnn: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except UsageError as exc:
        print(f"sparsetdnn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"sparsetdnn: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
