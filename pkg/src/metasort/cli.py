"""``metasort`` command-line interface.

Every option resolves as: command-line flag, else ``--config`` file entry,
else the built-in default. Config files are flat ``key = value`` text or a
JSON object; keys are option names with dashes or underscores.

Exit codes: 0 success, 1 usage, 2 I/O or format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import evaluation, meta, network, sampler, spikegen
from .preprocess import DegenerateWaveformError, preprocess_batch, preprocess_dataset
from .seeding import derive_seed

log = logging.getLogger("metasort")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object
    help: str = ""
    check: tuple | None = None  # (predicate, requirement text)


def _ge(lo):
    return (lambda v: v >= lo, f"must be >= {lo:g}")


def _gt(lo):
    return (lambda v: v > lo, f"must be > {lo:g}")


_UNIT = (lambda v: 0.0 <= v < 1.0, "must be in [0, 1)")

GLOBAL = [
    Opt("seed", int, 0, "master seed", _ge(0)),
    Opt("out", str, None, "output directory"),
    Opt("jobs", int, 1, "worker processes for per-combination evaluation", _ge(1)),
]

SAMPLER = [
    Opt("k_dense", float, 0.7, "curvature threshold for dense resolution", _ge(0)),
    Opt("k_medium", float, 0.35, "curvature threshold for medium resolution", _ge(0)),
    Opt("slope_low", float, 0.5, "slope threshold for low resolution", _ge(0)),
    Opt("trim", str, "optimal", "candidate trim rule: optimal or salience",
        (lambda v: v in ("optimal", "salience"), "must be 'optimal' or 'salience'")),
]

TRAIN = [
    Opt("batch_size", int, 128, "mini-batch size", _ge(1)),
    Opt("lr", float, 1e-3, "initial learning rate", _gt(0)),
    Opt("lr_patience", int, 10, "plateau epochs before halving the lr", _ge(1)),
    Opt("patience", int, 20, "early-stopping patience in epochs", _ge(1)),
    Opt("max_epochs", int, 300, "maximum training epochs", _ge(1)),
    Opt("dropout", float, 0.3, "dropout rate", _UNIT),
    Opt("alpha", float, 0.2, "compression-loss weight", _ge(0)),
]

ADAPT = [
    Opt("eta", float, 1e-3, "adaptation learning rate", _gt(0)),
    Opt("steps", int, 10, "adaptation gradient steps", _ge(0)),
    Opt("ways", int, 4, "classes per episode", _ge(1)),
    Opt("shots", int, 4, "support examples per class", _ge(1)),
    Opt("queries", int, 1, "query examples per class", _ge(0)),
]

GEN = [
    Opt("comb", int, 1, "template combination (1-4)", (lambda v: 1 <= v <= 4, "must be in 1..4")),
    Opt("sigma", float, 0.05, "noise std in normalized amplitude units", _ge(0)),
    Opt("n", int, 100, "spikes per neuron class", _ge(1)),
    Opt("artefact_rate", float, 0.25, "fraction of artefact events", _UNIT),
    Opt("jitter", int, 3, "max alignment jitter in samples", _ge(0)),
    Opt("amplitude_jitter", float, 0.1, "relative amplitude jitter", _UNIT),
    Opt("template_seed", int, 0, "seed for template shape perturbation", _ge(0)),
]

COMMANDS = {
    "generate": ("synthesize a labelled spike dataset", GEN, "dataset"),
    "preprocess": ("align, crop and z-score a dataset", [Opt("data", str, None, "dataset directory")], "preprocessed"),
    "train": ("train the multi-task network",
              [Opt("data", str, None, "dataset directory")] + TRAIN + SAMPLER, "model"),
    "compress": ("compress spikes to 8 retained samples",
                 [Opt("data", str, None, "dataset directory or CSV of waveforms"),
                  Opt("model", str, None, "use the network compression head of this checkpoint")] + SAMPLER,
                 "compressed"),
    "classify": ("classify spikes with a checkpoint",
                 [Opt("data", str, None, "dataset directory or CSV of waveforms"),
                  Opt("model", str, None, "model.json checkpoint")], "classified"),
    "calibrate": ("fine-tune deep layers on a support episode",
                  [Opt("data", str, None, "dataset directory of the new channel"),
                   Opt("model", str, None, "model.json checkpoint"), Opt("alpha", float, 0.2, "compression-loss weight", _ge(0))]
                  + ADAPT + SAMPLER, "calibrated"),
    "evaluate": ("run the compression study, plus the dynamic test given --model or --full",
                 [Opt("model", str, None, "base checkpoint for the dynamic test"),
                  Opt("full", bool, False, "train a base model and run both studies"),
                  Opt("n_train", int, 500, "training spikes per class for the base model", _ge(2)),
                  Opt("n_compress", int, 500, "spikes in the compression study", _ge(1)),
                  Opt("query_pool", int, 200, "query spikes per combination", _ge(1)),
                  Opt("adapt_eta", float, 0.1, "Model B adaptation learning rate", _gt(0)),
                  Opt("adapt_steps", int, 100, "Model B adaptation steps", _ge(0))] + TRAIN + SAMPLER,
                 "results"),
    "report": ("summarize an evaluation directory", [Opt("results", str, None, "evaluation output directory")], None),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="key=value or JSON config file")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")
    for o in GLOBAL:
        common.add_argument(_flag(o.name), dest=o.name, type=o.type, default=None, help=o.help)
    p = _Parser(prog="metasort", description="Adaptive spike compression and meta-calibrated sorting.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, (help_text, opts, _) in COMMANDS.items():
        sp = sub.add_parser(cmd, parents=[common], help=help_text, description=help_text)
        for o in opts:
            if o.type is bool:
                sp.add_argument(_flag(o.name), dest=o.name, action="store_const", const=True, default=None, help=o.help)
            else:
                sp.add_argument(_flag(o.name), dest=o.name, type=o.type, default=None,
                                help=f"{o.help} (default: {o.default})")
    return p


def read_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"--config {path}: invalid JSON ({e})") from e
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"--config {path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _coerce(o: Opt, v):
    if o.type is bool and isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    try:
        return o.type(v)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{_flag(o.name)}: cannot parse {v!r} as {o.type.__name__}") from e


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over config file over defaults, then validate."""
    _, opts, out_default = COMMANDS[args.command]
    cfg = read_config(args.config) if args.config else {}
    allowed = {o.name for o in GLOBAL + opts}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"--config: unknown key(s) for '{args.command}': {', '.join(unknown)}")
    merged = {"command": args.command, "quiet": args.quiet}
    for o in GLOBAL + opts:
        v = getattr(args, o.name, None)
        if v is None and o.name in cfg:
            v = _coerce(o, cfg[o.name])
        if v is None:
            v = out_default if o.name == "out" else o.default
        if o.check is not None and v is not None and not o.check[0](v):
            raise UsageError(f"{_flag(o.name)} {o.check[1]}, got {v}")
        merged[o.name] = v
    return merged


def _require(opts: dict, *names):
    for n in names:
        if not opts.get(n):
            raise UsageError(f"{_flag(n)} is required for '{opts['command']}'")


def _sampler_cfg(o: dict) -> sampler.SamplerConfig:
    return sampler.SamplerConfig(k_dense=o["k_dense"], k_medium=o["k_medium"], slope_low=o["slope_low"], trim=o["trim"])


def _train_cfg(o: dict, seed: int) -> network.TrainConfig:
    return network.TrainConfig(
        batch_size=o["batch_size"], lr_initial=o["lr"], lr_halving_patience=o["lr_patience"],
        early_stop_patience=o["patience"], max_epochs=o["max_epochs"], dropout=o["dropout"],
        alpha=o["alpha"], seed=seed,
    )


def _load_waveforms(path: str):
    """Preprocessed (windows, labels or None) from a dataset directory or CSV file."""
    if os.path.isdir(path):
        raw = spikegen.load_dataset(path)
        if not np.all(np.isfinite(raw.waveforms)):
            raise network.NumericError(f"{path}: non-finite samples in dataset")
        ds = preprocess_dataset(raw)
        return ds.waveforms, ds.labels
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.reader(fh):
            try:
                rows.append([float(v) for v in rec if v.strip()])
            except ValueError:
                if rows:
                    raise
    if not rows:
        raise ValueError(f"{path}: no waveform rows")
    x = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise network.NumericError(f"{path}: non-finite samples")
    win, _, keep = preprocess_batch(x)
    if not keep.all():
        raise DegenerateWaveformError(f"{path}: rows {np.flatnonzero(~keep).tolist()} are flat or all-zero")
    return win, None


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# --- commands ----------------------------------------------------------------


def cmd_generate(o: dict) -> None:
    cfg = spikegen.GenConfig(
        comb_id=o["comb"], noise_sigma=o["sigma"], n_spikes_per_class=o["n"], artefact_rate=o["artefact_rate"],
        seed=o["seed"], template_seed=o["template_seed"], jitter=o["jitter"], amplitude_jitter=o["amplitude_jitter"],
    )
    ds = spikegen.generate_dataset(cfg)
    spikegen.save_dataset(ds, o["out"])
    log.info("wrote %d spikes (%s) to %s", len(ds), cfg.label, o["out"])


def cmd_preprocess(o: dict) -> None:
    _require(o, "data")
    raw = spikegen.load_dataset(o["data"])
    ds = preprocess_dataset(raw)
    spikegen.save_dataset(ds, o["out"])
    log.info("kept %d of %d spikes -> %s", len(ds), len(raw), o["out"])


def cmd_train(o: dict) -> None:
    _require(o, "data")
    ds = preprocess_dataset(spikegen.load_dataset(o["data"]))
    params, hist = network.train(ds, _train_cfg(o, o["seed"]), _sampler_cfg(o))
    os.makedirs(o["out"], exist_ok=True)
    network.save_params(params, os.path.join(o["out"], "model.json"))
    hist.write_csv(os.path.join(o["out"], "history.csv"))
    log.info("trained %d epochs (best %s) -> %s", len(hist.rows), hist.best_epoch, o["out"])


def cmd_compress(o: dict) -> None:
    _require(o, "data")
    x, _ = _load_waveforms(o["data"])
    if o["model"]:
        params = network.load_params(o["model"])
        idx = np.stack([network.predict_compress(params, row).indices for row in x])
    else:
        idx = sampler.compress_indices(x, _sampler_cfg(o))
    rec = sampler.reconstruct_batch(idx, x)
    err = sampler.rmse_rows(x, rec)
    vals = np.take_along_axis(x, idx, axis=1)
    k = idx.shape[1]
    os.makedirs(o["out"], exist_ok=True)
    _write_rows(
        os.path.join(o["out"], "compressed.csv"),
        ["spike"] + [f"i{j}" for j in range(k)] + [f"v{j}" for j in range(k)] + ["rmse"],
        [[s] + idx[s].tolist() + vals[s].tolist() + [err[s]] for s in range(len(x))],
    )
    log.info("compressed %d spikes, mean rmse %.4f", len(x), float(err.mean()))


def cmd_classify(o: dict) -> None:
    _require(o, "data", "model")
    params = network.load_params(o["model"])
    x, y = _load_waveforms(o["data"])
    probs = network.forward(params, x, "eval").class_probs
    pred = np.argmax(probs, axis=1)
    os.makedirs(o["out"], exist_ok=True)
    header = ["spike", "label"] + [f"p{c}" for c in range(probs.shape[1])] + (["true_label"] if y is not None else [])
    rows = [[s, int(pred[s])] + probs[s].tolist() + ([int(y[s])] if y is not None else []) for s in range(len(x))]
    _write_rows(os.path.join(o["out"], "predictions.csv"), header, rows)
    if y is not None:
        acc = evaluation.cacc(pred, y)
        evaluation._write_json(os.path.join(o["out"], "classification.json"), {"cacc": acc, "n_spikes": len(y)})
        log.info("cacc %.4f over %d spikes", acc, len(y))


def cmd_calibrate(o: dict) -> None:
    _require(o, "data", "model")
    params = network.load_params(o["model"])
    ds = preprocess_dataset(spikegen.load_dataset(o["data"]))
    scfg = _sampler_cfg(o)
    ep = meta.sample_episode(ds, o["ways"], o["shots"], o["queries"], o["seed"], os.path.basename(os.path.normpath(o["data"])))
    tc = sampler.compress_indices(ep.support_x, scfg)
    acfg = meta.AdaptConfig(eta=o["eta"], steps=o["steps"], alpha=o["alpha"])
    adapted = meta.adapt(params, ep.support_x, ep.support_y, acfg, comp_targets=tc)
    os.makedirs(o["out"], exist_ok=True)
    network.save_params(adapted, os.path.join(o["out"], "model.json"))
    has_query = len(ep.query_y) > 0
    row = {
        "episode": 0,
        "channel_id": ep.channel_id,
        "steps": acfg.steps,
        "pre_accuracy": meta.evaluate_episode(params, ep.query_x, ep.query_y) if has_query else float("nan"),
        "post_accuracy": meta.evaluate_episode(adapted, ep.query_x, ep.query_y) if has_query else float("nan"),
        "support_loss_before": meta.support_loss(params, ep.support_x, ep.support_y, tc, acfg.alpha),
        "support_loss_after": meta.support_loss(adapted, ep.support_x, ep.support_y, tc, acfg.alpha),
    }
    meta.write_episodes_csv([row], os.path.join(o["out"], "episodes.csv"))
    log.info("support loss %.4f -> %.4f", row["support_loss_before"], row["support_loss_after"])


def base_training_config(n_train: int, seed: int) -> spikegen.GenConfig:
    return spikegen.GenConfig(comb_id=1, noise_sigma=0.05, n_spikes_per_class=n_train,
                              seed=derive_seed(seed, "base"))


def cmd_evaluate(o: dict) -> None:
    seed = o["seed"]
    scfg = _sampler_cfg(o)
    os.makedirs(o["out"], exist_ok=True)
    params = None
    if o["full"]:
        gcfg = base_training_config(o["n_train"], seed)
        log.info("training base model on %s", gcfg.label)
        ds = preprocess_dataset(spikegen.generate_dataset(gcfg))
        params, hist = network.train(ds, _train_cfg(o, derive_seed(seed, "train")), scfg)
        network.save_params(params, os.path.join(o["out"], "model.json"))
        hist.write_csv(os.path.join(o["out"], "history.csv"))
    elif o["model"]:
        params = network.load_params(o["model"])
    dynamic = None
    if params is not None:
        policy = evaluation.AdaptPolicy(eta=o["adapt_eta"], steps=o["adapt_steps"], alpha=o["alpha"],
                                        query_pool=o["query_pool"])
        dynamic = evaluation.run_dynamic_test(params, evaluation.dynamic_schedule(seed, policy), policy, seed, o["jobs"])
        log.info("median cacc A %.4f, B %.4f", dynamic.median_cacc_A, dynamic.median_cacc_B)
    comp = evaluation.run_compression_study(evaluation.compression_dataset(o["n_compress"], seed=seed), scfg)
    log.info("compression rmse %.4f (uniform %.4f)", comp.mean_rmse, comp.baseline_mean_rmse)
    evaluation.emit_report(o["out"], dynamic, comp)


def cmd_report(o: dict) -> None:
    d = o["results"] or o["out"]
    if not d:
        raise UsageError("--results is required for 'report'")
    with open(os.path.join(d, "summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    lines = [f"{k}: {summary[k]:.6g}" if isinstance(summary[k], float) else f"{k}: {summary[k]}" for k in sorted(summary)]
    dyn_path = os.path.join(d, "dynamic_test.json")
    if os.path.exists(dyn_path):
        with open(dyn_path, encoding="utf-8") as fh:
            res = evaluation.DynamicTestResult.from_dict(json.load(fh))
        lines.append("")
        lines.append(f"{'comb':<6}{'sigma':>7}{'A':>8}{'B':>8}")
        pairs = {}
        for r in res.records:
            pairs.setdefault((r.comb_id, r.comb_label, r.noise_sigma), {})[r.model] = r.cacc
        for (cid, lab, s), m in pairs.items():
            lines.append(f"{f'{cid}{lab}':<6}{s:>7g}{m['A']:>8.3f}{m['B']:>8.3f}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(d, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    if not o["quiet"]:
        sys.stdout.write(text)


HANDLERS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "compress": cmd_compress,
    "classify": cmd_classify,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        opts = resolve(args)
    except UsageError as e:
        sys.stderr.write(f"metasort: error: {e}\n")
        return EXIT_USAGE
    except OSError as e:
        sys.stderr.write(f"metasort: error: {e}\n")
        return EXIT_IO
    logging.basicConfig(level=logging.WARNING if opts["quiet"] else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            HANDLERS[opts["command"]](opts)
    except UsageError as e:
        sys.stderr.write(f"metasort: error: {e}\n")
        return EXIT_USAGE
    except (network.NumericError, FloatingPointError) as e:
        sys.stderr.write(f"metasort: numeric failure: {e}\n")
        return EXIT_NUMERIC
    except (OSError, network.CheckpointFormatError, json.JSONDecodeError) as e:
        sys.stderr.write(f"metasort: error: {e}\n")
        return EXIT_IO
    except (ValueError, spikegen.GenerationError, DegenerateWaveformError) as e:
        sys.stderr.write(f"metasort: error: {e}\n")
        return EXIT_IO if "format" in str(e) else EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
