"""Command-line entry point: roadshot {gen,encode,train,infer,eval,ratio,sweep}."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .geograph import GraphFormatError, GraphInvariantError, load_graph, save_graph

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show the default of every option, including options without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.option_strings and action.default is not argparse.SUPPRESS and "%(default)" not in text:
            text += " (default: %(default)s)"
        return text


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common(p: argparse.ArgumentParser, seed=True, jobs=True) -> None:
    p.add_argument("--config", help="key=value file; explicit flags override its values")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker threads")


def _model_flags(p: argparse.ArgumentParser) -> None:
    from .extractor import ModelConfig

    d = ModelConfig()
    p.add_argument("--n-in", type=int, default=d.n_in, help="backbone output channels")
    p.add_argument("--n-feat", type=int, default=d.n_feat, help="node feature width")
    p.add_argument("--gnn-layers", type=int, default=d.gnn_layers, help="EdgeConv layers")
    p.add_argument("--gnn-dim", type=int, default=d.gnn_dim, help="EdgeConv output width")
    p.add_argument("--support", choices=["complete", "knn_static", "knn_dynamic"], default=d.support, help="support graph for message passing")
    p.add_argument("--k", type=int, default=d.k, help="neighbors for k-NN support graphs")
    p.add_argument("--scorer", choices=["bilinear", "mlp"], default=d.scorer, help="edge scoring function")
    p.add_argument("--raw-features", action="store_true", default=d.use_raw_features, help="feed backbone features instead of the node branch")
    p.add_argument("--no-coords", action="store_true", default=not d.embed_coords, help="do not append normalized coordinates to node features")


def _infer_flags(p: argparse.ArgumentParser) -> None:
    from .inferpipe import InferConfig

    d = InferConfig()
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--jthr", type=float, default=d.j_thr, help="junction-ness threshold")
    p.add_argument("--ethr", type=float, default=d.edge_thr, help="edge probability threshold")
    p.add_argument("--window", type=int, default=d.window, help="tile size in pixels")
    p.add_argument("--overlap", type=int, default=None, help="tile step in pixels; None means window/2")
    p.add_argument("--merge-radius", type=float, default=None, help="node merge radius; None means stride/2")


def _metric_flags(p: argparse.ArgumentParser) -> None:
    from .metrics import MetricConfig

    d = MetricConfig()
    p.add_argument("--line-width", type=float, default=d.line_width, help="rasterization width in pixels")
    p.add_argument("--buffer", type=float, default=d.buffer, help="P-F1 buffer in pixels")
    p.add_argument("--match-radius", type=float, default=d.match_radius, help="J-F1 match radius")
    p.add_argument("--snap-radius", type=float, default=d.snap_radius, help="APLS snap radius")


def build_parser() -> argparse.ArgumentParser:
    from .synthgen import SceneConfig
    from .trainer import TrainConfig

    fmt = _HelpFormatter
    parser = _Parser(prog="roadshot", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sc = SceneConfig()
    p = sub.add_parser("gen", help="generate synthetic scenes", formatter_class=fmt)
    _common(p)
    p.add_argument("--count", type=int, default=8, help="number of scenes")
    p.add_argument("--size", type=int, default=sc.width, help="square canvas size")
    p.add_argument("--spacing", type=float, default=sc.lattice_spacing, help="lattice spacing")
    p.add_argument("--jitter", type=float, default=sc.jitter, help="max lattice node displacement in pixels")
    p.add_argument("--drop-prob", type=float, default=sc.drop_prob, help="probability of removing a lattice edge")
    p.add_argument("--curve", type=float, default=sc.curve_amplitude, help="bend amplitude in pixels")
    p.add_argument("--noise", type=float, default=sc.noise_level, help="background noise amplitude")
    p.add_argument("--road-width", type=float, default=sc.road_width, help="rendered road width in pixels")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("encode", help="encode a graph into grid targets", formatter_class=fmt)
    _common(p, seed=False, jobs=False)
    p.add_argument("--graph", required=True, help="input graph file")
    p.add_argument("--width", type=int, default=None, help="canvas width; None takes it from the graph")
    p.add_argument("--height", type=int, default=None, help="canvas height; None takes it from the graph")
    p.add_argument("--stride", type=int, default=32, help="grid cell size in pixels")
    p.add_argument("--out", default=None, help="raw file with channels J, u, v")
    p.add_argument("--merged", default=None, help="write the merged graph here")

    tc = TrainConfig()
    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _common(p, jobs=False)
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-epoch loss table")
    p.add_argument("--epochs", type=int, default=tc.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=tc.batch_size, help="scenes per optimizer step")
    p.add_argument("--lr", type=float, default=tc.lr, help="Adam learning rate")
    p.add_argument("--train-jthr", type=float, default=tc.train_jthr, help="junction threshold for candidate nodes during training")
    p.add_argument("--crop", type=int, default=tc.crop, help="random crop size in pixels")
    p.add_argument("--no-flips", action="store_true", default=not tc.flips, help="disable random flips")
    p.add_argument("--w-jun", type=float, default=tc.w_jun, help="junction loss weight")
    p.add_argument("--w-off", type=float, default=tc.w_off, help="offset loss weight")
    p.add_argument("--w-edge", type=float, default=tc.w_edge, help="edge loss weight")
    p.add_argument("--offset-mask", choices=["gt", "pred"], default=tc.offset_mask, help="offset loss mask: ground-truth or predicted junction cells")
    p.add_argument("--checkpoint-every", type=int, default=tc.checkpoint_every, help="epochs between checkpoints")
    p.add_argument("--time-budget", type=float, default=tc.time_budget, help="seconds; stop after the epoch that exceeds it")
    _model_flags(p)

    p = sub.add_parser("infer", help="extract graphs from images", formatter_class=fmt)
    _common(p, seed=False)
    _infer_flags(p)
    p.add_argument("--image", default=None, help="single raw image")
    p.add_argument("--data", default=None, help="scene directory (alternative to --image)")
    p.add_argument("--out", required=True, help="graph file, or directory with --data")

    p = sub.add_parser("eval", help="score predicted graphs against ground truth", formatter_class=fmt)
    _common(p, seed=False)
    p.add_argument("--pred", required=True, help="directory of predicted graphs")
    p.add_argument("--gt", required=True, help="directory of ground-truth graphs")
    p.add_argument("--report", default=None, help="output table; None prints to stdout")
    _metric_flags(p)

    p = sub.add_parser("ratio", help="points per positive cell across resize ratios", formatter_class=fmt)
    _common(p, seed=False, jobs=False)
    p.add_argument("--data", required=True, help="directory of graph files")
    p.add_argument("--ratios", type=_floats, default=[0.25, 0.5, 1.0, 2.0, 4.0], help="resize ratios, comma-separated")
    p.add_argument("--stride", type=int, default=32, help="grid cell size in pixels")
    p.add_argument("--out", default=None, help="output table; None prints to stdout")

    p = sub.add_parser("sweep", help="metrics across edge thresholds", formatter_class=fmt)
    _common(p, seed=False)
    _infer_flags(p)
    _metric_flags(p)
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--thresholds", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5], help="edge thresholds, comma-separated")
    p.add_argument("--limit", type=int, default=None, help="use only the first N scenes")
    p.add_argument("--out", default=None, help="output table; None prints to stdout")
    return parser


# --------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        a = actions[key]
        if isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _parse_bool(raw)
        elif a.type is not None:
            try:
                defaults[key] = a.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}")
        else:
            defaults[key] = raw
        if a.choices is not None and defaults[key] not in a.choices:
            raise UsageError(f"config key {key!r}: {raw!r} not in {list(a.choices)}")
        # satisfied by the file, so no longer required on the command line
        a.required = False
    sub.set_defaults(**defaults)


def _config_path(argv: list[str]) -> str | None:
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    path = _config_path(argv)
    # the file must be applied before parsing so it can satisfy required flags
    if path is not None and argv and argv[0] in subs:
        sub = subs[argv[0]]
        try:
            _apply_config(sub, read_config(path))
        except UsageError as exc:
            sub.error(str(exc))
        except OSError as exc:
            raise RuntimeError(f"cannot read config: {exc}")
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# commands


def _model_config(args):
    from .extractor import ModelConfig

    return ModelConfig(
        n_in=args.n_in,
        n_feat=args.n_feat,
        gnn_layers=args.gnn_layers,
        gnn_dim=args.gnn_dim,
        support=args.support,
        k=args.k,
        scorer=args.scorer,
        use_raw_features=args.raw_features,
        embed_coords=not args.no_coords,
    )


def _infer_config(args):
    from .inferpipe import InferConfig

    return InferConfig(args.jthr, args.ethr, args.window, args.overlap, args.merge_radius)


def _metric_config(args):
    from .metrics import MetricConfig

    return MetricConfig(args.line_width, args.buffer, args.match_radius, args.snap_radius)


def _emit_table(path, header, rows) -> None:
    import csv

    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_gen(args) -> None:
    from .synthgen import SceneConfig, make_dataset

    cfg = SceneConfig(
        width=args.size,
        height=args.size,
        lattice_spacing=args.spacing,
        jitter=args.jitter,
        drop_prob=args.drop_prob,
        curve_amplitude=args.curve,
        noise_level=args.noise,
        road_width=args.road_width,
        seed=args.seed,
    )
    paths = make_dataset(cfg, args.count, args.out, jobs=args.jobs)
    print(f"wrote {len(paths)} scenes to {args.out}")


def cmd_encode(args) -> None:
    from .gridenc import encode_targets
    from .tensornet import write_raw

    graph = load_graph(args.graph)
    w = args.width or (graph.size[0] if graph.size else None)
    h = args.height or (graph.size[1] if graph.size else None)
    if w is None or h is None:
        raise UsageError("canvas size unknown; pass --width and --height")
    t = encode_targets(graph, w, h, args.stride)
    if args.out:
        planes = np.concatenate([t.junction_grid[None], np.moveaxis(t.offset_field, -1, 0)])
        write_raw(args.out, planes)
    if args.merged:
        save_graph(t.merged_graph, args.merged)
    print(f"grid {t.grid_h}x{t.grid_w}, {int(t.junction_grid.sum())} positive cells, {t.merged_graph.num_edges} merged edges")


def cmd_train(args) -> None:
    from .trainer import TrainConfig, train

    tc = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        train_jthr=args.train_jthr,
        crop=args.crop,
        flips=not args.no_flips,
        seed=args.seed,
        w_jun=args.w_jun,
        w_off=args.w_off,
        w_edge=args.w_edge,
        offset_mask=args.offset_mask,
        checkpoint_every=args.checkpoint_every,
        checkpoint=args.out,
        time_budget=args.time_budget,
    )

    def progress(r):
        print(f"epoch {r.epoch}: jun {r.l_jun:.4f} off {r.l_off:.4f} edge {r.l_edge:.4f} total {r.l_total:.4f} ({r.seconds:.1f}s)", flush=True)

    _, log = train(args.data, tc, _model_config(args), progress=progress)
    if args.log:
        log.write_csv(args.log)


def cmd_infer(args) -> None:
    from .extractor import load_params
    from .inferpipe import predict_dataset, sliding_window_infer
    from .synthgen import read_image

    if (args.image is None) == (args.data is None):
        raise UsageError("pass exactly one of --image or --data")
    params = load_params(args.model)
    cfg = _infer_config(args)
    if args.image:
        graph = sliding_window_infer(read_image(args.image), params, cfg, args.jobs)
        save_graph(graph, args.out)
        print(f"{graph.num_nodes} nodes, {graph.num_edges} edges")
    else:
        paths = predict_dataset(args.data, params, args.out, cfg, args.jobs)
        print(f"wrote {len(paths)} graphs to {args.out}")


def cmd_eval(args) -> None:
    from .metrics import REPORT_HEADER, evaluate

    reports, macro = evaluate(args.pred, args.gt, _metric_config(args), args.jobs)
    _emit_table(args.report, REPORT_HEADER, [r.row() for r in reports] + [macro.row()])


def cmd_ratio(args) -> None:
    from .gridenc import ratio_analysis

    paths = sorted(Path(args.data).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no graph files in {args.data}")
    graphs = [load_graph(p) for p in paths]
    dims = [g.size for g in graphs]
    rows = ratio_analysis(graphs, dims, args.stride, args.ratios)
    _emit_table(args.out, ["ratio", "avg_points_per_positive_cell"], rows)


def cmd_sweep(args) -> None:
    from .extractor import load_params
    from .inferpipe import SWEEP_HEADER, threshold_sweep

    params = load_params(args.model)
    rows = threshold_sweep(args.data, params, args.thresholds, _infer_config(args), _metric_config(args), args.jobs, args.limit)
    _emit_table(args.out, SWEEP_HEADER, [r.row() for r in rows])


COMMANDS = {
    "gen": cmd_gen,
    "encode": cmd_encode,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ratio": cmd_ratio,
    "sweep": cmd_sweep,
}


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except RuntimeError as exc:
        print(f"roadshot: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    if getattr(args, "jobs", 1) < 1:
        print("roadshot: error: --jobs must be >= 1", file=sys.stderr)
        return USAGE_ERROR
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"roadshot {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError, GraphFormatError, GraphInvariantError) as exc:
        print(f"roadshot {args.command}: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def main() -> None:
    sys.exit(run())
