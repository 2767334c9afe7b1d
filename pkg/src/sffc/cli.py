"""Command-line front end.

Verbs: prepare-data, train, eval, analyze-ed, analyze-info, probe,
sweep-alpha, dump-noisy.  Runs are driven by a JSON config file plus
key=value overrides; every run writes its resolved config and seeds next to
its outputs.  Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure (NaN/Inf), 1 anything else.

This module must stay import-light: thread caps (SFF_THREADS) have to land
in the environment before numpy or numba initialize.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _apply_thread_cap():
    cap = os.environ.get("SFF_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _parse_override_value(raw: str, current):
    """Coerce an override string to the type of the default it replaces."""
    if current is None or isinstance(current, (list, tuple, dict)):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"expected an integer, got {raw!r}") from exc
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"expected a number, got {raw!r}") from exc
    return raw


def _merge(defaults: dict, overrides: dict, path: str = ""):
    """File/override values win over defaults; unknown keys are rejected."""
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            _merge(defaults[key], value, where)
        else:
            current = defaults[key]
            if current is not None and value is not None:
                ok = (
                    isinstance(value, type(current))
                    or (isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool))
                    or (isinstance(current, (list, tuple)) and isinstance(value, (list, tuple)))
                )
                if not ok:
                    raise ConfigError(
                        f"type mismatch for {where}: expected {type(current).__name__}, "
                        f"got {type(value).__name__}"
                    )
            defaults[key] = value


def resolve_config(path: str | None, overrides: list[str] | None = None):
    """Defaults <- config file <- key=value overrides, then validation."""
    from .trainer import RunConfig

    base = RunConfig().to_dict()
    if path:
        try:
            with open(path) as f:
                text = f.read().strip()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if text:
            try:
                file_cfg = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"config root must be an object: {path}")
            _merge(base, file_cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        node = base
        keys = dotted.split(".")
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = _parse_override_value(raw, node[keys[-1]])
    try:
        return RunConfig.from_dict(base)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_grid(spec: str) -> list[float]:
    """start:stop:step, inclusive of stop up to rounding."""
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise ConfigError(f"grid must be start:stop:step, got {spec!r}") from exc
    if step <= 0:
        raise ConfigError("grid step must be positive")
    values = []
    v = start
    while v <= stop + 1e-9:
        values.append(round(v, 10))
        v += step
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sffc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--overrides", nargs="*", default=[], metavar="KEY=VALUE")
        p.add_argument("--output-dir", default="runs/out")

    p = sub.add_parser("prepare-data", help="validate dataset files (optionally synthesize)")
    p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10", "cifar100"])
    p.add_argument("--dir", required=True)
    p.add_argument("--lenient", action="store_true",
                   help="check structure only, not reference byte sizes")
    p.add_argument("--synthesize", type=int, nargs=2, metavar=("N_TRAIN", "N_VAL"),
                   help="write synthetic digit IDX files first (mnist only)")
    p.add_argument("--seed", type=int, default=0)

    for verb in ("train", "eval", "analyze-ed", "analyze-info", "probe", "sweep-alpha",
                 "dump-noisy"):
        p = sub.add_parser(verb)
        common(p)
        if verb != "train":
            p.add_argument("--checkpoint", default=None, help="trained checkpoint path")
        if verb == "train":
            p.add_argument("--resume", default=None)
        if verb == "eval":
            p.add_argument("--strategy", default="mean_square",
                           choices=["mean_square", "mean", "direct"])
            p.add_argument("--dump-scores", default=None,
                           help="also write scores+labels in container format")
        if verb == "probe":
            p.add_argument("--blocks", type=int, nargs="*", default=[1, 2, 3])
        if verb == "analyze-info":
            p.add_argument("--blocks", type=int, nargs="*", default=[3])
            p.add_argument("--mc-samples", type=int, default=100000)
        if verb == "sweep-alpha":
            p.add_argument("--grid", default="0:1:0.1")
            p.add_argument("--block", type=int, default=1)
        if verb == "dump-noisy":
            p.add_argument("--p-grid", default="0:0.5:0.05")
            p.add_argument("--n-examples", type=int, default=5)
    return parser


def _load_trained(args):
    from . import trainer

    path = args.checkpoint or os.path.join(args.output_dir, "checkpoint.sffc")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = trainer.load_checkpoint(path)
    net, cfg, _ = trainer.network_from_checkpoint(ckpt)
    if args.config or args.overrides:
        cfg = resolve_config(args.config, args.overrides)
    return net, cfg


def _write_run_stamp(out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def run(args) -> int:
    """Dispatch one parsed command; returns the process exit status."""
    from . import analysis, dataio, trainer
    from .tensor import NumericError

    if args.verb == "prepare-data":
        if args.synthesize:
            if args.dataset != "mnist":
                raise ConfigError("--synthesize only produces mnist-layout files")
            from . import synth

            synth.write_digit_dataset(args.dir, args.synthesize[0], args.synthesize[1],
                                      seed=args.seed)
        problems = dataio.validate_dataset_dir(args.dir, args.dataset,
                                               strict_sizes=not args.lenient)
        if problems:
            for issue in problems:
                print(f"problem: {issue}", file=sys.stderr)
            return EXIT_DATA
        print(f"{args.dataset} files in {args.dir} look valid")
        return EXIT_OK

    cfg = resolve_config(args.config, args.overrides)

    if args.verb == "train":
        result = trainer.run_training(cfg, args.output_dir, resume_from=args.resume)
        print(f"best_val_acc={result['best_val_acc']}")
        return EXIT_OK

    if args.verb == "sweep-alpha":
        from .goodness import cos_score
        import csv as _csv
        import numpy as np

        _write_run_stamp(args.output_dir, cfg)
        train_data, _, zca = trainer.load_run_data(cfg)
        rows = []
        for alpha in _parse_grid(args.grid):
            run_cfg = resolve_config(args.config, args.overrides)
            run_cfg.goodness.alpha = alpha
            run_cfg.goodness.validate()
            from .network import build_network

            net = build_network(run_cfg.network_config(), run_cfg.seeds.init)
            opt = trainer.AdamWState()
            t_max = run_cfg.phase1_t_max()
            block = args.block - 1
            for epoch in range(run_cfg.phase1_epochs):
                lr = trainer.cosine_lr(epoch, t_max, run_cfg.optimizer.lr,
                                       run_cfg.schedule.lr_min)
                trainer.train_block(net, block, train_data, run_cfg, opt,
                                    epoch=epoch, lr=lr, zca=zca)
            kernels = net.block_kernels(block)
            rows.append((alpha, cos_score(kernels), float(np.mean(np.std(kernels, axis=1)))))
            print(f"alpha={alpha:g} cos={rows[-1][1]:.4f} kernel_std={rows[-1][2]:.5f}")
        path = os.path.join(args.output_dir, "alpha_sweep.csv")
        with open(path, "w", newline="") as f:
            w = _csv.writer(f, lineterminator="\n")
            w.writerow(["alpha", "cos", "kernel_std"])
            for alpha, cos, std in rows:
                w.writerow([repr(alpha), repr(cos), repr(std)])
        print(f"wrote {path}")
        return EXIT_OK

    if args.verb == "dump-noisy":
        import numpy as np
        from PIL import Image

        _write_run_stamp(args.output_dir, cfg)
        train_data, _, _ = trainer.load_run_data(cfg)
        ps = _parse_grid(args.p_grid)
        n = args.n_examples
        imgs = train_data.images[:n]
        rng = trainer.substream(cfg.seeds.noise, trainer.TAG_EVAL, 0xD0)
        c, h, w = imgs.shape[1:]
        grid = np.zeros((n * h, len(ps) * w, c), dtype=np.float32)
        for col, p in enumerate(ps):
            mask = rng.random(imgs.shape) >= p
            noisy = imgs * mask
            for row in range(n):
                grid[row * h : (row + 1) * h, col * w : (col + 1) * w] = noisy[row].transpose(1, 2, 0)
        arr = (np.clip(grid, 0, 1) * 255).astype(np.uint8)
        arr = arr[:, :, 0] if c == 1 else arr
        path = os.path.join(args.output_dir, "noisy_grid.png")
        Image.fromarray(arr).save(path)
        print(f"wrote {path}")
        return EXIT_OK

    # remaining verbs need a trained checkpoint
    net, cfg = _load_trained(args)
    _write_run_stamp(args.output_dir, cfg)
    train_data, val_data, zca = trainer.load_run_data(cfg)

    if args.verb == "eval":
        acc = analysis.evaluate(net, val_data, args.strategy, cfg.seeds.noise,
                                batch_size=cfg.eval_batch_size, zca=zca)
        print(f"accuracy={acc}")
        if args.dump_scores:
            scores, labels = analysis.collect_scores(net, val_data, args.strategy,
                                                     cfg.seeds.noise,
                                                     batch_size=cfg.eval_batch_size, zca=zca)
            analysis.dump_scores(args.dump_scores, scores, labels)
            print(f"wrote {args.dump_scores}")
        return EXIT_OK

    if args.verb == "analyze-ed":
        profiles = analysis.layer_ed_profile(net, val_data, cfg.seeds.noise,
                                             batch_size=cfg.eval_batch_size, zca=zca)
        path = os.path.join(args.output_dir, "ed_profile.csv")
        analysis.write_ed_profile_csv(path, profiles)
        for p in profiles:
            print(f"block {p.block}: ed_d={p.ed_d:.3f} ed_c={p.ed_c_mean:.3f} ratio={p.ratio:.3f}")
        print(f"wrote {path}")
        return EXIT_OK

    if args.verb == "probe":
        rows = []
        for block in args.blocks:
            acc = analysis.linear_probe(net, block - 1, train_data, val_data, cfg, zca=zca)
            rows.append((block, acc))
            print(f"block {block}: probe accuracy {acc}")
        path = os.path.join(args.output_dir, "probe.csv")
        analysis.write_probe_csv(path, rows)
        print(f"wrote {path}")
        return EXIT_OK

    if args.verb == "analyze-info":
        import numpy as np

        rows = []
        for block in args.blocks:
            if block == net.n_blocks:
                head = net.classifier
            else:
                raise ConfigError(
                    f"analyze-info on block {block} needs a probe head; run with --blocks "
                    f"{net.n_blocks} or train probes first (see README)"
                )
            scores, labels = analysis.collect_scores(net, val_data, "mean_square",
                                                     cfg.seeds.noise, head=head,
                                                     stop_at_block=block,
                                                     batch_size=cfg.eval_batch_size, zca=zca)
            model = analysis.fit_gaussian_classes(scores, labels)
            rng = trainer.substream(cfg.seeds.noise, trainer.TAG_EVAL, 0x1F, block)
            ib = analysis.info_breakdown(model, rng, n_samples=args.mc_samples)
            rows.append((block, ib))
            print(f"block {block}: i_tot={ib.i_tot:.4f} nats "
                  f"(lin+sigsim={ib.i_lin_absorbed:.4f}, cor={ib.i_cor:.4f})")
        path = os.path.join(args.output_dir, "info.csv")
        analysis.write_info_csv(path, rows)
        print(f"wrote {path}")
        return EXIT_OK

    raise ConfigError(f"unknown verb {args.verb!r}")


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # dispatch on error class for the exit code
        from .dataio import DataFormatError
        from .tensor import NumericError
        from .container import ContainerError

        if isinstance(exc, NumericError):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (DataFormatError, ContainerError, OSError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
