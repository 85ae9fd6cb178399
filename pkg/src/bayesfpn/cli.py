"""Command-line entry points: phantom, train, infer, eval, sweep.

Configuration is merged as defaults <- --config JSON <- environment
(BAYESFPN_SEED) <- explicit flags, and written to run_config.json in every
output directory. BAYESFPN_THREADS caps BLAS threads; it is applied before
numpy is imported.

Exit codes: 0 success (warnings allowed), 1 usage, 2 I/O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
RUN_CONFIG = "run_config.json"

log = logging.getLogger("bayesfpn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _t_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from err
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("T-list needs positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayesfpn", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run config merged under the flags")
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("phantom", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--count", type=_positive)
    sp.add_argument("--size", type=_positive)

    sp = sub.add_parser("train", help="train a model on a phantom dataset")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=_positive)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--norm", choices=("instance", "batch", "group"))
    sp.add_argument("--eval-every", type=_positive)

    sp = sub.add_parser("infer", help="MC-dropout inference on one image")
    common(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--T", type=_positive)

    sp = sub.add_parser("eval", help="per-image metrics on the test split")
    common(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--T", type=_positive)
    sp.add_argument("--split", choices=("test", "all"), default="test")

    sp = sub.add_parser("sweep", help="metrics as a function of the number of MC samples")
    common(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--T-list", type=_t_list, dest="t_list")
    sp.add_argument("--B", type=_positive, dest="bootstrap")
    sp.add_argument("--split", choices=("test", "all"), default="test")
    return p


# ----------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    from dataclasses import asdict

    from .model import ModelConfig
    from .phantom import PhantomConfig
    from .train import TrainConfig

    return {
        "seed": 0,
        "phantom": asdict(PhantomConfig()),
        "data": {"fractions": [0.7, 0.1, 0.2], "split_seed": 0},
        "model": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "infer": {"T": 20, "threshold": 0.5, "T_list": [1, 2, 5, 10, 20, 30], "bootstrap": 2000},
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args, base: dict | None = None) -> dict:
    cfg = default_config() if base is None else base
    if getattr(args, "config", None) is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as err:
            raise UsageError(f"{args.config}: invalid JSON ({err})") from err
    env_seed = os.environ.get("BAYESFPN_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as err:
            raise UsageError(f"BAYESFPN_SEED must be an integer, got {env_seed!r}") from err
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    flags = {
        ("phantom", "count"): getattr(args, "count", None),
        ("phantom", "size"): getattr(args, "size", None),
        ("train", "steps"): getattr(args, "steps", None),
        ("train", "batch_size"): getattr(args, "batch", None),
        ("train", "learning_rate"): getattr(args, "lr", None),
        ("train", "eval_every"): getattr(args, "eval_every", None),
        ("model", "norm_decoder"): getattr(args, "norm", None),
        ("infer", "T"): getattr(args, "T", None),
        ("infer", "T_list"): getattr(args, "t_list", None),
        ("infer", "bootstrap"): getattr(args, "bootstrap", None),
    }
    for (section, key), value in flags.items():
        if value is not None:
            cfg[section][key] = value
    return cfg


def _write_run_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")


def _model_config(cfg: dict):
    from .model import ModelConfig

    return ModelConfig.from_dict(cfg["model"])


def _load_model(ckpt: Path, args):
    """Model config comes from run_config.json beside the checkpoint, then --config / flags."""
    from . import io
    from .model import build

    sidecar = ckpt.parent / RUN_CONFIG
    base = default_config()
    if sidecar.exists():
        base = _merge(base, json.loads(sidecar.read_text()))
    cfg = resolve_config(args, base)
    mcfg = _model_config(cfg)
    state, _, _ = io.load_checkpoint(ckpt, mcfg.canonical())
    model = build(mcfg)
    model.load_state_dict(state)
    return model, cfg


def _test_split(samples, cfg: dict, which: str):
    from .phantom import split

    if which == "all":
        return list(samples)
    return split(samples, tuple(cfg["data"]["fractions"]), cfg["data"]["split_seed"])[2]


# ----------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    from .phantom import PhantomConfig, generate, save_dataset

    cfg = resolve_config(args)
    cfg["phantom"]["seed"] = cfg["seed"]
    pcfg = PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["phantom"].items()})
    save_dataset(generate(pcfg), args.out, pcfg)
    _write_run_config(args.out, cfg)
    log.info("wrote %d phantoms to %s", pcfg.count, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import asdict

    from . import io
    from .model import build
    from .phantom import load_dataset, split
    from .train import LOSS_CSV_HEADER, TrainConfig, loss_rows, train

    cfg = resolve_config(args)
    samples = load_dataset(args.data)
    cfg["model"]["input_size"] = int(samples[0].image.shape[-1])
    cfg["train"]["seed"] = cfg["seed"]
    cfg["model"]["init_seed"] = cfg["seed"]
    mcfg = _model_config(cfg)
    tcfg = TrainConfig(**cfg["train"])
    cfg["model"], cfg["train"] = asdict(mcfg), asdict(tcfg)
    train_set, val_set, _ = split(samples, tuple(cfg["data"]["fractions"]), cfg["data"]["split_seed"])

    model = build(mcfg)
    _write_run_config(args.out, cfg)
    result = train(model, train_set, tcfg, val_set)
    text = mcfg.canonical()
    io.save_checkpoint(args.out / "best.ckpt", result.best_state, text)
    io.save_checkpoint(args.out / "final.ckpt", model.state_dict(), text, result.optimizer.state_dict())
    io.write_csv(args.out / "loss.csv", LOSS_CSV_HEADER, loss_rows(result.history))
    io.write_csv(args.out / "val.csv", ("step", "val_iou"), result.val_history)
    log.info("best step %d val IoU %.4f", result.best_step, result.best_val_iou)
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np

    from . import bayes, io
    from .ctr import CtrEstimationError, EmptyMaskError, binarize, estimate_ctr, measure_ctr

    model, cfg = _load_model(args.ckpt, args)
    image = io.read_pgm(args.image).astype(np.float32) / 255
    size = model.config.input_size
    if image.shape != (size, size):
        raise UsageError(f"image is {image.shape}, model expects {(size, size)}")
    T, thr = cfg["infer"]["T"], cfg["infer"]["threshold"]
    stack = bayes.mc_sample(model, image[None], T=T, seed=cfg["seed"])
    rep = bayes.report(stack)

    out = args.out
    _write_run_config(out, cfg)
    io.save_btsr(out / "mean_mask.btsr", rep.mean_mask.astype(np.float32))
    io.save_btsr(out / "entropy.btsr", rep.entropy.astype(np.float32))
    io.save_btsr(out / "mutual_info.btsr", rep.mutual_info.astype(np.float32))
    for c, name in enumerate(("heart", "lungs")):
        io.write_pgm(out / f"mean_{name}.pgm", rep.mean_mask[c])
        io.write_pgm(out / f"entropy_{name}.pgm", bayes.to_uint8(rep.entropy[c]))
        io.write_pgm(out / f"mi_{name}.pgm", bayes.to_uint8(rep.mutual_info[c]))

    nan = float("nan")
    row = {"image": args.image.name, "T": T, "ctr_pred": nan, "ctr_mean": nan, "ctr_std": nan,
           "ctr_p2_5": nan, "ctr_p97_5": nan, "flagged_samples": 0}
    try:
        row["ctr_pred"] = measure_ctr(*binarize(rep.mean_mask, thr)).ctr
    except EmptyMaskError as err:
        log.warning("mean mask: %s; CTR undefined", err)
    try:
        est = estimate_ctr(stack, thr)
        row.update(ctr_mean=est.mean, ctr_std=est.std, ctr_p2_5=est.bounds[0], ctr_p97_5=est.bounds[1],
                   flagged_samples=est.flagged)
        if est.flagged:
            log.warning("%d of %d MC samples had an empty mask", est.flagged, T)
    except CtrEstimationError as err:
        row["flagged_samples"] = T
        log.warning("CTR estimation failed: %s", err)
    io.write_csv(out / "ctr.csv", tuple(row), [tuple(row.values())])
    return EXIT_OK


def cmd_eval(args) -> int:
    from dataclasses import asdict

    import numpy as np

    from . import io
    from .evaluate import MetricRow, evaluate, summarize
    from .phantom import load_dataset

    model, cfg = _load_model(args.ckpt, args)
    samples = _test_split(load_dataset(args.data), cfg, args.split)
    rows = evaluate(model, samples, T=cfg["infer"]["T"], seed=cfg["seed"], threshold=cfg["infer"]["threshold"])
    summary = summarize(rows)
    _write_run_config(args.out, cfg)
    table = [r.as_row() for r in rows]
    means = ["mean"] + [float(np.nanmean([getattr(r, f) for r in rows])) for f in MetricRow.header()[1:]]
    io.write_csv(args.out / "metrics.csv", MetricRow.header(), table + [means])
    fields = {k: (None if isinstance(v, float) and v != v else v) for k, v in asdict(summary).items()}
    (args.out / "summary.json").write_text(json.dumps(fields, sort_keys=True, indent=2) + "\n")
    log.info("IoU heart %.4f lungs %.4f, CTR r %.4f, coverage %.3f", summary.iou_heart, summary.iou_lungs,
             summary.ctr_pearson, summary.ctr_coverage)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import io
    from .evaluate import SWEEP_HEADER, mc_sweep
    from .phantom import load_dataset

    model, cfg = _load_model(args.ckpt, args)
    samples = _test_split(load_dataset(args.data), cfg, args.split)
    result = mc_sweep(model, samples, cfg["infer"]["T_list"], seed=cfg["seed"], B=cfg["infer"]["bootstrap"],
                      boot_seed=cfg["seed"])
    _write_run_config(args.out, cfg)
    io.write_csv(args.out / "sweep.csv", SWEEP_HEADER,
                 [(r.T, r.metric, r.value, r.ci_low, r.ci_high) for r in result.rows])
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "sweep": cmd_sweep}


def _apply_thread_env() -> None:
    threads = os.environ.get("BAYESFPN_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    _apply_thread_env()
    from .io import DigestMismatchError
    from .tensor import FormatError

    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        log.error("%s", err)
        return EXIT_USAGE
    except FloatingPointError as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC
    except (OSError, FormatError, DigestMismatchError, KeyError) as err:
        log.error("I/O error: %s", err)
        return EXIT_IO
    except ValueError as err:
        log.error("invalid configuration: %s", err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
