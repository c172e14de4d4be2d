"""Command line front end: ``motionpose <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input (usage, config, data), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_text
from .flow import estimate_flow, flow_to_color, read_flo1
from .metrics import SkeletonEval, nn_probe
from .nets import ActionNet, JointModel, PoseNet, build_appearance_net
from .trainer import (evaluate_action, evaluate_pose, finetune_action, finetune_pose, train_unsupervised)

log = logging.getLogger("motionpose")

CHANCE = 2 / 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p, corpus=True, out=True):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--preset", default="mini", choices=["mini", "paper"])
    if corpus:
        p.add_argument("--corpus", type=Path, required=True)
    if out:
        p.add_argument("--out", type=Path, required=True)


def build_parser():
    ap = _Parser(prog="motionpose", description="Unsupervised pose features from motion.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("corpus-gen", help="render a synthetic stick-figure corpus")
    _common(p, corpus=False)
    p.add_argument("--clips", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("flow-precompute", help="write FLO1 flow files next to every clip")
    _common(p, out=False)

    p = sub.add_parser("train-unsup", help="joint appearance/motion training")
    _common(p)

    p = sub.add_parser("finetune-pose", help="pose heatmap regression")
    _common(p)
    p.add_argument("--init", type=Path, help="unsupervised checkpoint (random init if omitted)")

    p = sub.add_parser("finetune-action", help="action classification")
    _common(p)
    p.add_argument("--init", type=Path, help="unsupervised checkpoint (random init if omitted)")

    p = sub.add_parser("eval-pose", help="Strict PCP and PDJ on held-out clips")
    _common(p, out=False)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("eval-action", help="video-level action accuracy on held-out clips")
    _common(p, out=False)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("probe-nn", help="FC6 nearest-neighbour pose probe")
    _common(p, out=False)
    p.add_argument("--ckpt", type=Path, help="checkpoint with app.* layers (random net if omitted)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("viz-filters", help="first-layer filters as a PGM grid")
    _common(p, corpus=False, out=False)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--layer", default="app.conv1")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("viz-flow", help="colour-coded flow field as a PPM image")
    _common(p, out=False)
    p.add_argument("--clip", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return ap


# ---------------------------------------------------------------- helpers


def resolve_config(args):
    cfg = RunConfig(args.preset, args.seed, args.workers)
    if args.config is not None:
        cfg.update(parse_text(args.config.read_text(), str(args.config)))
    pairs = []
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append(tuple(s.strip() for s in item.split("=", 1)))
    cfg.update(pairs)
    # explicit flags win over file contents
    cfg.set("seed", str(args.seed))
    cfg.set("workers", str(args.workers))
    if getattr(args, "clips", None) is not None:
        cfg.set("corpus.num_clips", str(args.clips))
    if getattr(args, "frames", None) is not None:
        cfg.set("corpus.frames_per_clip", str(args.frames))
    if getattr(args, "size", None) is not None:
        cfg.set("corpus.frame_size", str(args.size))
    if cfg.workers < 1:
        raise ConfigError("--workers must be at least 1")
    return cfg


def write_config(cfg, out_dir, command):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.config"
    path.write_text(f"# resolved configuration for {command}\n" + cfg.dump())
    return path


def update_metrics(out_dir, values):
    """Merge ``values`` into ``out_dir/metrics.kv`` (keys kept sorted)."""
    path = Path(out_dir) / "metrics.kv"
    current = dict(parse_text(path.read_text())) if path.exists() else {}
    for k, v in values.items():
        current[k] = f"{v:.6f}" if isinstance(v, float) else str(v)
    path.write_text("".join(f"{k}={current[k]}\n" for k in sorted(current)))
    return path


def write_history(path, history):
    with open(path, "w") as fh:
        for it, loss, acc in history:
            fh.write(f"iter={it} loss={loss:.6f} val_acc={acc:.6f}\n")


def _load_corpus(path):
    return C.ingest_frames(path)


def _print(line):
    print(line, flush=True)


def filter_grid(weights, scale=4, gap=1):
    """Tile ``(out, in, k, k)`` filters, each min-max normalised, into one image."""
    w = np.asarray(weights, dtype=np.float64)
    oc, ic, kh, kw = w.shape
    tiles = []
    for o in range(oc):
        for i in range(ic):
            t = w[o, i]
            span = t.max() - t.min()
            tiles.append((t - t.min()) / span if span > 0 else np.full_like(t, 0.5))
    cols = ic if ic > 1 else int(math.ceil(math.sqrt(oc)))
    rows = int(math.ceil(len(tiles) / cols))
    th, tw = kh * scale, kw * scale
    img = np.zeros((rows * (th + gap) + gap, cols * (tw + gap) + gap))
    for n, t in enumerate(tiles):
        r, c = divmod(n, cols)
        y, x = gap + r * (th + gap), gap + c * (tw + gap)
        img[y:y + th, x:x + tw] = np.kron(t, np.ones((scale, scale)))
    return img


# ---------------------------------------------------------------- commands


def cmd_corpus_gen(args, cfg):
    write_config(cfg, args.out, args.command)
    corpus = C.generate_corpus(args.out, cfg.corpus, seed=cfg.seed)
    _print(f"clips={len(corpus)} frames_per_clip={cfg.corpus.frames_per_clip} out={args.out}")


def cmd_flow_precompute(args, cfg):
    write_config(cfg, args.corpus, args.command)
    corpus = _load_corpus(args.corpus)
    rep = C.precompute_flows(corpus, cfg.flow, workers=cfg.workers)
    _print(f"written={rep.written} skipped={rep.skipped} warnings={len(rep.warnings)}")


def cmd_train_unsup(args, cfg):
    write_config(cfg, args.out, args.command)
    corpus = _load_corpus(args.corpus)
    missing = [c.clip_id for c in corpus if not c.has_flows]
    if missing:
        raise C.CorpusError(f"flows missing for {len(missing)} clips (first: {missing[0]}); run flow-precompute")
    model = JointModel(cfg.arch, cfg.train.delta, rng=np.random.default_rng([cfg.seed, 1]))
    ckpt_path = args.out / "unsup.mpck"
    result = train_unsupervised(corpus, model, cfg.train, logger=_print,
                                on_checkpoint=lambda ck: save_checkpoint(ck, ckpt_path))
    save_checkpoint(result.checkpoint, ckpt_path)
    write_history(args.out / "history.txt", result.history)
    update_metrics(args.out, {"binary_acc": result.final_val_acc})
    _print(f"final val_acc={result.final_val_acc:.4f} chance={CHANCE:.3f}")


def cmd_finetune_pose(args, cfg):
    write_config(cfg, args.out, args.command)
    corpus = _load_corpus(args.corpus)
    init = load_checkpoint(args.init) if args.init else None
    res = finetune_pose(corpus, init, cfg.pose, logger=_print)
    save_checkpoint(res.checkpoint, args.out / "pose.mpck")
    _print(f"final loss={res.losses[-1]:.6f} init={'unsupervised' if init else 'random'}")


def cmd_finetune_action(args, cfg):
    write_config(cfg, args.out, args.command)
    corpus = _load_corpus(args.corpus)
    init = load_checkpoint(args.init) if args.init else None
    res = finetune_action(corpus, init, cfg.action, logger=_print)
    save_checkpoint(res.checkpoint, args.out / "action.mpck")
    _print(f"final loss={res.losses[-1]:.6f} train_clips={len(res.train_clips)}")


def _out_dir(args):
    return args.out if args.out is not None else args.ckpt.parent


def cmd_eval_pose(args, cfg):
    out = _out_dir(args)
    write_config(cfg, out, args.command)
    corpus = _load_corpus(args.corpus)
    pc = cfg.pose
    net = PoseNet(pc.arch, len(SkeletonEval().joint_names), pc.heatmap_size, pc.crop_size)
    load_checkpoint(args.ckpt, net)
    _, val_ids = corpus.split(pc.val_fraction)
    ev = evaluate_pose(net, corpus, val_ids, pc)
    metrics = {f"pcp.{g}": v for g, v in ev.pcp.groups.items()}
    _print("limb            strict_pcp")
    for name, v in ev.pcp.limbs.items():
        _print(f"{name:<15} {v:.4f}")
    for g, v in ev.pcp.groups.items():
        _print(f"{g:<15} {v:.4f}")
    ts = ev.pdj.thresholds
    _print("joint          " + " ".join(f"pdj@{t:<4g}" for t in ts))
    for joint, row in ev.pdj.table.items():
        _print(f"{joint:<14} " + " ".join(f"{row[t]:<8.4f}" for t in ts))
        for t in ts:
            metrics[f"pdj.{joint}.{t:g}"] = row[t]
    update_metrics(out, metrics)


def cmd_eval_action(args, cfg):
    out = _out_dir(args)
    write_config(cfg, out, args.command)
    corpus = _load_corpus(args.corpus)
    ac = cfg.action
    net = ActionNet(ac.arch, ac.num_classes, ac.hidden_dim)
    load_checkpoint(args.ckpt, net)
    _, val_ids = corpus.split(ac.val_fraction)
    acc, preds, labels = evaluate_action(net, corpus, val_ids, cfg.protocol)
    for cid, p, y in zip(val_ids, preds, labels):
        _print(f"clip={cid} pred={p} label={y}")
    _print(f"action_acc={acc:.4f} clips={len(val_ids)} samples_per_video={cfg.protocol.samples_per_video}")
    update_metrics(out, {"action_acc": acc})


def cmd_probe_nn(args, cfg):
    out = args.out if args.out is not None else (args.ckpt.parent if args.ckpt else Path("."))
    write_config(cfg, out, args.command)
    corpus = _load_corpus(args.corpus)
    feat = build_appearance_net(cfg.arch)
    from .layers import ParamSet

    params = ParamSet()
    if args.ckpt:
        src = load_checkpoint(args.ckpt).layer_params()
        for spec in feat.param_layers():
            if spec.name not in src:
                raise CheckpointError(f"{args.ckpt}: no {spec.name} layer")
            params.add(spec.name, src[spec.name]["weight"].data, src[spec.name]["bias"].data)
    else:
        feat.init(params, np.random.default_rng([cfg.seed, 4]))
    pc = cfg.probe
    rep = nn_probe(lambda x: np.concatenate([feat(params, x[i:i + 256]).data for i in range(0, len(x), 256)]),
                   list(corpus), pc.num_queries, np.random.default_rng([cfg.seed, 5]),
                   feat.input_shape[-1], pc.torso_expansion, pc.stride, pc.permutations)
    _print(f"neighbor_distance={rep.neighbor_distance:.4f} random_distance={rep.random_distance:.4f} "
           f"p_less={rep.p_less:.4g} p_two_sided={rep.p_two_sided:.4g}")
    update_metrics(out, {"probe.neighbor_distance": rep.neighbor_distance,
                         "probe.random_distance": rep.random_distance, "probe.p_less": rep.p_less})


def cmd_viz_filters(args, cfg):
    write_config(cfg, args.out.parent, args.command)
    ck = load_checkpoint(args.ckpt)
    key = f"{args.layer}.weight"
    if key not in ck.tensors:
        raise CheckpointError(f"{args.ckpt}: no tensor {key}")
    w = ck.tensors[key]
    if w.ndim != 4:
        raise CheckpointError(f"{key} is not a convolution kernel")
    C.write_pgm(args.out, filter_grid(w))
    _print(f"filters={w.shape[0]}x{w.shape[1]} out={args.out}")


def cmd_viz_flow(args, cfg):
    write_config(cfg, args.out.parent, args.command)
    corpus = _load_corpus(args.corpus)
    clip = corpus.load_clip(args.clip)
    if not 0 <= args.frame < clip.frame_count - 1:
        raise ValueError(f"frame {args.frame} has no successor in {args.clip}")
    path = clip.flow_path(args.frame)
    if path.exists():
        f = read_flo1(path)
    else:
        fp = cfg.flow
        f = estimate_flow(clip.frames[args.frame], clip.frames[args.frame + 1], fp.alpha, fp.iterations,
                          fp.pyramid_levels)
    top = float(max(f.magnitude().max(), 1e-6))
    C.write_ppm(args.out, flow_to_color(f, top))
    _print(f"max_magnitude={top:.4f} out={args.out}")


COMMANDS = {
    "corpus-gen": cmd_corpus_gen,
    "flow-precompute": cmd_flow_precompute,
    "train-unsup": cmd_train_unsup,
    "finetune-pose": cmd_finetune_pose,
    "finetune-action": cmd_finetune_action,
    "eval-pose": cmd_eval_pose,
    "eval-action": cmd_eval_action,
    "probe-nn": cmd_probe_nn,
    "viz-filters": cmd_viz_filters,
    "viz-flow": cmd_viz_flow,
}


def run(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
