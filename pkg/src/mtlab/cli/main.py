"""``mtlab`` command line.

Every command takes ``--seed``, ``--config`` and ``--out``. Results go only
to files under ``--out``; progress logging goes to stderr. Failures print a
single ``ERR <code>: <message>`` line on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import corpus as corpus_mod
from .. import kmeans, pipeline, probes, rvq, targets
from ..dsp import FeatureSequence, mfcc_from_logmel
from ..encoder import extract_all_layers
from ..formats import FormatError, Report, parse_report, read_tensor, report_to_text, tensor_to_bytes
from ..heads import HeadStack
from ..tensorcore import NonFiniteError
from ..trainer import model_inputs, train_masked_prediction
from . import codecs
from .config import ConfigError, Experiment, dump_config, load_config
from .store import LockedError, RunStore, atomic_write

log = logging.getLogger("mtlab")

EXIT_CODES = {"usage": 2, "input": 3, "format": 4, "numeric": 5, "locked": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- helpers ------------------------------------------------------------------

def _out(args) -> Path:
    if not args.out:
        raise CliError("usage", f"{args.command} requires --out")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.tsv" if p.is_dir() else p


def _corpus(args, exp: Experiment):
    if getattr(args, "corpus", None):
        return corpus_mod.load_manifest(_manifest_path(args.corpus))
    return corpus_mod.generate(exp.corpus)


def _write_report(path: Path, report: Report, exp: Experiment):
    report.meta = {"config_hash": exp.config_hash(), "seed": str(exp.seed), **report.meta}
    atomic_write(path, report_to_text(report).encode("utf-8"))


def _features_bytes(feats) -> tuple[bytes, str]:
    cat = np.concatenate([np.asarray(getattr(f, "data", f), dtype=np.float64) for f in feats])
    return tensor_to_bytes(cat), "".join(f"{len(getattr(f, 'data', f))}\n" for f in feats)


def _load_encoder(path):
    return codecs.encoder_from_bytes(Path(path).read_bytes())[0]


def _load_targets(path):
    return codecs.targets_from_bytes(Path(path).read_bytes())


# -- commands -----------------------------------------------------------------

def cmd_gen_corpus(args, exp: Experiment):
    out = _out(args)
    spec = exp.corpus
    if args.n_utterances is not None:
        spec = replace(spec, n_utterances=args.n_utterances)
    if args.noise_snr is not None:
        spec = replace(spec, noise_snr_db=args.noise_snr)
    utts = corpus_mod.generate(spec)
    (out / "wav").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    lines = []
    for u in utts:
        corpus_mod.write_wav(out / "wav" / f"{u.id}.wav", u.samples, u.sample_rate)
        if spec.noise_snr_db is not None:
            corpus_mod.write_wav(out / "wav" / f"{u.id}.clean.wav", u.clean_samples, u.sample_rate)
        atomic_write(out / "labels" / f"{u.id}.tensor", tensor_to_bytes(u.phone_labels.astype(np.uint32)))
        lines.append(f"{u.id}\twav/{u.id}.wav\t{u.speaker_id}\tlabels/{u.id}.tensor\n")
    atomic_write(out / "manifest.tsv", "".join(lines).encode("utf-8"))
    log.info("wrote %d utterances to %s", len(utts), out)


def cmd_extract_features(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    lm = model_inputs(utts, exp.dsp)
    if args.kind == "logmel":
        feats = lm
    elif args.kind == "mfcc":
        feats = [FeatureSequence(mfcc_from_logmel(f.data, exp.dsp), f.frame_rate, "mfcc") for f in lm]
    else:
        if not args.ckpt or args.layer is None:
            raise CliError("usage", "--kind layer needs --ckpt and --layer")
        model = _load_encoder(args.ckpt)
        inputs = lm if model.cfg.front_end == "logmel" else model_inputs(utts, exp.dsp, "conv")
        feats = extract_all_layers(model, inputs, [args.layer])[args.layer]
    data, index = _features_bytes(feats)
    atomic_write(out / "features.tensor", data)
    atomic_write(out / "index.tsv", "".join(f"{u.id}\t{len(f.data)}\n" for u, f in zip(utts, feats)).encode())


def cmd_train_initial(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    strat = targets.InitialTargetStrategy(args.strategy or exp.pipeline.strategy,
                                          args.k or exp.pipeline.initial_k, exp.pipeline.tap_layer)
    cfg = exp.pipeline_config()
    bundle, cb = targets.initial_targets(utts, strat, exp.dsp, cfg.encoder, exp.train,
                                         replace(exp.kmeans, k=strat.k))
    atomic_write(out / "targets", codecs.targets_to_bytes(bundle))
    atomic_write(out / "codebook-0", codecs.codebook_to_bytes(cb))


def cmd_kmeans_fit(args, exp: Experiment):
    out = _out(args)
    if args.points:
        x = read_tensor(args.points).astype(np.float64)
        if x.ndim == 1:
            x = x[:, None]
    else:
        utts = _corpus(args, exp)
        x = np.concatenate([mfcc_from_logmel(f.data, exp.dsp) for f in model_inputs(utts, exp.dsp)])
    cfg = replace(exp.kmeans, k=args.k or exp.kmeans.k)
    cb = kmeans.fit(x, cfg, {"feature": "points" if args.points else "mfcc"}, restarts=args.restarts)
    atomic_write(out / "codebook", codecs.codebook_to_bytes(cb))
    atomic_write(out / "assign.tensor", tensor_to_bytes(kmeans.assign(x, cb).astype(np.uint32)))


def cmd_make_targets(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    model = _load_encoder(args.ckpt)
    lm = model_inputs(utts, exp.dsp)
    inputs = lm if model.cfg.front_end == "logmel" else model_inputs(utts, exp.dsp, "conv")
    layers = [int(x) for x in args.layers.split(",")]
    kcfg = replace(exp.kmeans, k=args.k or exp.pipeline.k)
    uids = [u.id for u in utts]
    bundle = targets.multilayer_targets(model, inputs, layers, kcfg.k, kcfg, args.iteration, uids)
    if args.rvq:
        if len(layers) != 1:
            raise CliError("usage", "--rvq pins level 1 to exactly one clustered layer")
        rmodel = codecs.rvq_from_bytes(Path(args.rvq).read_bytes())
        ids = bundle.streams[0].ids
        cbs = bundle.codebooks
        bundle = targets.rvq_targets(rmodel, lm, ids, args.levels, uids)
        bundle.codebooks = cbs
    atomic_write(out / "targets", codecs.targets_to_bytes(bundle))
    for j, cb in enumerate(bundle.codebooks):
        atomic_write(out / f"codebook-{j}", codecs.codebook_to_bytes(cb))


def cmd_train(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    bundle = _load_targets(args.targets)
    if bundle.utterance_ids and bundle.utterance_ids != [u.id for u in utts]:
        raise CliError("input", "targets were built for a different corpus")
    cfg = exp.pipeline_config()
    from ..encoder import EncoderModel
    model = EncoderModel(cfg.encoder)
    inputs = model_inputs(utts, exp.dsp, cfg.encoder.front_end)
    model.set_feature_stats(inputs)
    mode = args.head_mode or ("single" if bundle.n_streams == 1 else "conditional")
    stack = HeadStack(mode, cfg.encoder.d_model, bundle.vocab_sizes, seed=exp.seed, dtype=cfg.encoder.dtype)
    tcfg = exp.train if args.epochs is None else replace(exp.train, epochs=args.epochs)
    hist = train_masked_prediction(model, stack, inputs, bundle.stream_ids(), tcfg)
    atomic_write(out / "ckpt", codecs.encoder_to_bytes(model, {"head_mode": mode, "loss": hist}))


def cmd_dump_layers(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    model = _load_encoder(args.ckpt)
    inputs = model_inputs(utts, exp.dsp, model.cfg.front_end)
    layers = None if args.layers is None else [int(x) for x in args.layers.split(",")]
    taps = extract_all_layers(model, inputs, layers)
    for layer, feats in taps.items():
        atomic_write(out / f"layer{layer}.tensor", _features_bytes(feats)[0])
    atomic_write(out / "index.tsv", "".join(f"{u.id}\t{f.n_frames}\n" for u, f in zip(utts, inputs)).encode())


def cmd_rvq_train(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    lm = model_inputs(utts, exp.dsp)
    pinned = not args.unpinned
    ids = None
    k1 = exp.rvq.k1
    if pinned:
        if not args.targets:
            raise CliError("usage", "pinned RVQ needs --targets (k-means IDs for level 1); or pass --unpinned")
        bundle = _load_targets(args.targets)
        ids = bundle.streams[0].ids
        k1 = bundle.streams[0].vocab_size
    model = rvq.RvqModel(replace(exp.rvq, pinned=pinned, k1=k1, d_in=exp.dsp.n_mels))
    hist = rvq.train(model, lm, ids, args.epochs if args.epochs is not None else exp.pipeline.rvq_epochs,
                     [u.id for u in utts])
    atomic_write(out / "rvq", codecs.rvq_to_bytes(model))
    rows = [[i + 1, hist.train_loss[i], hist.heldout_mse[i] if i < len(hist.heldout_mse) else float("nan"),
             hist.reseeded[i]] for i in range(len(hist.train_loss))]
    _write_report(out / "rvq_history.tsv", Report(["epoch", "train_loss", "heldout_mse", "reseeded"], rows), exp)


def cmd_probe(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    model = _load_encoder(args.ckpt)
    noisy = corpus_mod.noisy_copy(utts, exp.probe.snr_db, exp.seed)
    tasks = probes.TASKS if args.task == "all" else (args.task,)
    rows, weights = [], {}
    for t in tasks:
        metric, res = probes.run_probe(model, noisy, probes.ProbeTask(t, epochs=exp.probe.epochs, seed=exp.seed),
                                       exp.dsp)
        rows.append([t, probes.METRICS[t], metric])
        weights[t] = res.weights
    _write_report(out / "probe.tsv", Report(["task", "metric", "value"], rows), exp)
    _write_report(out / "layer_weights.tsv", probes.layer_weight_report(weights), exp)


def _records_report(records) -> Report:
    rows = [[r.index, json.dumps(r.strategy, sort_keys=True), *[r.metrics.get(t, float("nan")) for t in probes.TASKS],
             ",".join(r.converged_tasks)] for r in records]
    return Report(["iteration", "strategy", *probes.TASKS, "converged_tasks"], rows)


def cmd_pipeline_run(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    cfg = exp.pipeline_config()
    if args.name:
        cfg = replace(cfg, name=args.name)
    if args.max_iterations:
        cfg = replace(cfg, max_iterations=args.max_iterations)
    root = out / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    atomic_write(root / "config.ini", dump_config(exp).encode())
    records = pipeline.run(utts, cfg, RunStore(root))
    _write_report(root / "report.tsv", _records_report(records), exp)


def cmd_grid(args, exp: Experiment):
    out = _out(args)
    utts = _corpus(args, exp)
    cfg = exp.pipeline_config()
    values = [v for v in args.values.split(",") if v]
    store = RunStore(out / "shared")
    report = pipeline.experiment_grid(utts, cfg, args.axis, values, store)
    atomic_write(out / "config.ini", dump_config(exp).encode())
    _write_report(out / "grid.tsv", report, exp)


def cmd_report(args, exp: Experiment):
    out = _out(args)
    run = Path(args.run)
    if (run / "grid.tsv").is_file():
        rep = parse_report((run / "grid.tsv").read_text("utf-8"))
    else:
        records = RunStore(run).records()
        if not records:
            raise CliError("input", f"{run} holds neither grid.tsv nor completed iterations")
        rep = _records_report(records)
    rep.meta = {k: v for k, v in rep.meta.items() if k not in ("config_hash", "seed")}
    _write_report(out / "report.tsv", rep, exp)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "extract-features": cmd_extract_features, "train-initial": cmd_train_initial,
    "kmeans-fit": cmd_kmeans_fit, "make-targets": cmd_make_targets, "train": cmd_train,
    "dump-layers": cmd_dump_layers, "rvq-train": cmd_rvq_train, "probe": cmd_probe,
    "pipeline-run": cmd_pipeline_run, "grid": cmd_grid, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="experiment config file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="mtlab", description="masked-prediction target lab")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    s = add("gen-corpus", "write a synthetic corpus (WAV + labels + manifest)")
    s.add_argument("--n-utterances", type=int)
    s.add_argument("--noise-snr", type=float)
    corpus_cmds = []
    s = add("extract-features", "MFCC, log-Mel or encoder-layer features")
    s.add_argument("--kind", choices=["mfcc", "logmel", "layer"], default="mfcc")
    s.add_argument("--ckpt")
    s.add_argument("--layer", type=int)
    corpus_cmds.append(s)
    s = add("train-initial", "iteration-1 targets from an initial strategy")
    s.add_argument("--strategy", choices=targets.STRATEGIES)
    s.add_argument("--k", type=int)
    corpus_cmds.append(s)
    s = add("kmeans-fit", "fit a codebook to a points tensor or corpus MFCCs")
    s.add_argument("--points")
    s.add_argument("--k", type=int)
    s.add_argument("--restarts", type=int, default=1)
    corpus_cmds.append(s)
    s = add("make-targets", "cluster encoder layers (optionally extend with RVQ levels)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layers", required=True, help="comma-separated taps")
    s.add_argument("--k", type=int)
    s.add_argument("--iteration", type=int, default=1)
    s.add_argument("--rvq")
    s.add_argument("--levels", type=int, default=2)
    corpus_cmds.append(s)
    s = add("train", "masked-prediction training on a targets file")
    s.add_argument("--targets", required=True)
    s.add_argument("--head-mode", choices=["single", "flat", "conditional"])
    s.add_argument("--epochs", type=int)
    corpus_cmds.append(s)
    s = add("dump-layers", "write every encoder tap")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layers")
    corpus_cmds.append(s)
    s = add("rvq-train", "train the RVQ-VAE (level 1 pinned to --targets stream 0)")
    s.add_argument("--targets")
    s.add_argument("--unpinned", action="store_true")
    s.add_argument("--epochs", type=int)
    corpus_cmds.append(s)
    s = add("probe", "weighted-layer-sum probes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", choices=["all", *probes.TASKS], default="all")
    corpus_cmds.append(s)
    s = add("pipeline-run", "iterative clustering run into <out>/<name>")
    s.add_argument("--name")
    s.add_argument("--max-iterations", type=int)
    corpus_cmds.append(s)
    s = add("grid", "one pipeline variant per axis value")
    s.add_argument("--axis", choices=pipeline.GRID_AXES, required=True)
    s.add_argument("--values", required=True, help="comma-separated")
    corpus_cmds.append(s)
    s = add("report", "TSV summary of a finished run or grid")
    s.add_argument("--run", required=True)
    for s in corpus_cmds:
        s.add_argument("--corpus", help="manifest file or corpus directory; default: generate from [corpus]")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        exp = load_config(args.config, args.seed)
        COMMANDS[args.command](args, exp)
        return 0
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = "usage", f"config: {exc}"
    except LockedError as exc:
        code, msg = "locked", str(exc)
    except FormatError as exc:
        code, msg = "format", str(exc)
    except NonFiniteError as exc:
        code, msg = "numeric", str(exc)
    except (FileNotFoundError, IsADirectoryError, probes.ProbeError, ValueError, KeyError) as exc:
        code, msg = "input", f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # noqa: BLE001 - last-resort single-line error
        code, msg = "internal", f"{type(exc).__name__}: {exc}"
    print(f"ERR {code}: {' '.join(str(msg).split())}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
