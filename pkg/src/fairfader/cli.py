"""Command-line entry point.

Every command takes ``--config`` (JSON), ``--seed`` (overrides the config)
and ``--out`` (output directory).  Exit codes: 0 success, 1 runtime
failure, 2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import data, gradcheck, nets
from . import training as T
from .config import ConfigError, load_config
from .experiment import evaluate_classifier
from .fairness import balanced_accuracy, emit_report, predict, report_dict, write_predictions
from .snapshot import SnapshotFormatError

log = logging.getLogger("fairfader")

EXT = ".ffm"
MODEL_IDS = {"fader": "FaderCNN", "ae": "SimpleCNN", "ae-conditioned": "SimpleCNN"}


class UsageError(Exception):
    """Bad arguments or missing inputs (exit code 2)."""


# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None


def _stamp(out, command, cfg, names):
    """``run.json``: command, config hash and the hash of every artifact.
    ``config.json`` is covered by the config hash (it also records ``out``)."""
    arts = {n: _sha256(os.path.join(out, n)) for n in sorted(names)}
    _write_json(os.path.join(out, "run.json"),
                {"command": command, "config_hash": cfg.config_hash(), "artifacts": arts})


def _prepare(out, cfg):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())


def _load_records(path, cfg):
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {path}")
    if os.path.exists(os.path.join(path, "manifest.json")):
        return data.read_synthetic(path)
    a = cfg.arch
    records = data.load_dataset(path, a.input_size, a.input_channels, a.num_attrs)
    if not records:
        raise UsageError(f"no usable images in {path}")
    return records


def _split(path, cfg, out=None):
    recs = _load_records(path, cfg)
    try:
        split = data.make_splits(recs, cfg.split.n_test_per_race, cfg.split.val_fraction,
                                 cfg.seed, cfg.arch.num_attrs)
    except ValueError as exc:
        raise UsageError(f"split: {exc}") from None
    shape = (cfg.arch.input_channels, cfg.arch.input_size, cfg.arch.input_size)
    if split.train and split.train[0].image.shape != shape:
        raise UsageError(f"dataset images have shape {split.train[0].image.shape}, arch expects {shape}")
    if out is not None:
        _write_json(os.path.join(out, "split.json"), split.manifest)
    return split


def _resolve(path, kind):
    """Model file for ``kind`` from a file path or a run directory."""
    if os.path.isdir(path):
        marker = os.path.join(path, "selected.json")
        if os.path.exists(marker):
            files = _read_json(marker)["files"]
            if kind not in files:
                raise UsageError(f"{path} has no selected {kind}")
            return os.path.join(path, files[kind])
        cand = os.path.join(path, kind + EXT)
        if os.path.exists(cand):
            return cand
        raise UsageError(f"no {kind} model in {path}")
    if not os.path.exists(path):
        raise UsageError(f"{kind} model not found: {path}")
    return path


def _load(path, cls):
    try:
        model = nets.load_model(path)
    except (SnapshotFormatError, OSError) as exc:
        raise UsageError(f"cannot load {path}: {exc}") from None
    if not isinstance(model, cls):
        raise UsageError(f"{path} holds a {type(model).__name__}, expected {cls.__name__}")
    return model


def _provenance(path):
    """Training kind recorded next to an encoder ("fader", "ae", ...)."""
    d = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
    for cand in (d, os.path.dirname(d), os.path.dirname(os.path.dirname(d))):
        m = os.path.join(cand, "manifest.json")
        if os.path.exists(m):
            kind = _read_json(m).get("kind")
            if kind:
                return kind
    return None


class _LossLog:
    def __init__(self, path, append):
        self.fh = open(path, "a" if append else "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if not append:
            self.w.writerow(T.LOSS_FIELDS)

    def __call__(self, rec):
        self.w.writerow([T._fmt(getattr(rec, f)) for f in T.LOSS_FIELDS])

    def close(self):
        self.fh.close()


def _truncate_losses(path, step):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(rows[0])
        w.writerows(r for r in rows[1:] if int(r[0]) <= step)


# commands


def cmd_gen_synth(args, cfg):
    out = cfg.out
    records = data.gen_synthetic(cfg.synth)
    data.write_synthetic(records, out)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    _stamp(out, "gen-synth", cfg, ["manifest.json"])
    log.info("wrote %d samples to %s (manifest %s)", len(records), out,
             _sha256(os.path.join(out, "manifest.json"))[:12])
    return 0


def _train_run(args, cfg, kind):
    out = cfg.out
    _prepare(out, cfg)
    split = _split(args.dataset, cfg, out)
    tcfg = cfg.fader if kind == "fader" else cfg.ae
    spec = cfg.arch
    conditioned = kind != "ae"
    builders = {"encoder": nets.build_encoder, "discriminator": nets.build_discriminator,
                "decoder": lambda s: nets.build_decoder(s, conditioned=conditioned)}
    ckdir = os.path.join(out, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)
    manifest_path = os.path.join(out, "manifest.json")
    loss_path = os.path.join(out, "losses.csv")

    entries, resume = [], None
    if args.resume:
        manifest = _read_json(manifest_path)
        if manifest.get("config_hash") != cfg.config_hash() or manifest.get("kind") != kind:
            raise UsageError("cannot resume: run directory was made with a different config")
        entries = manifest["checkpoints"]
        if entries:
            last = entries[-1]
            states = {n: _load(os.path.join(out, f), nets.Model).state_dict()
                      for n, f in last["files"].items()}
            resume = T.Checkpoint(last["step"], states, last["metrics"], tcfg.config_hash())
            _truncate_losses(loss_path, last["step"])

    def save_manifest():
        _write_json(manifest_path, {"kind": kind, "config_hash": cfg.config_hash(), "checkpoints": entries})

    def on_checkpoint(ck):
        files = {}
        for name, state in ck.states.items():
            model = builders[name](spec)
            model.load_state_dict(state)
            rel = os.path.join("checkpoints", f"step_{ck.step:06d}_{name}{EXT}")
            nets.save_model(model, os.path.join(out, rel))
            files[name] = rel
        entries.append({"step": ck.step, "metrics": ck.metrics, "files": files})
        losses.fh.flush()
        save_manifest()

    save_manifest()
    losses = _LossLog(loss_path, append=resume is not None)
    try:
        if kind == "fader":
            T.train_fader(split, spec, tcfg, resume=resume, log=losses, on_checkpoint=on_checkpoint)
        else:
            T.train_vanilla_ae(split, spec, tcfg, conditioned=conditioned, resume=resume, log=losses,
                               on_checkpoint=on_checkpoint)
    finally:
        losses.close()

    cks = [T.Checkpoint(e["step"], {}, e["metrics"], "") for e in entries]
    if kind == "fader":
        sel = T.select_checkpoint(cks, tcfg.selection_gate)
    else:
        sel = min(range(len(cks)), key=lambda i: cks[i].metrics["val_l_ae"]) if cks else None
    if sel is None:
        raise RuntimeError("training produced no checkpoints")
    _write_json(os.path.join(out, "selected.json"), entries[sel])
    names = ["split.json", "losses.csv", "manifest.json", "selected.json"]
    names += sorted({f for e in entries for f in e["files"].values()})
    _stamp(out, f"train-{kind}", cfg, names)
    m = entries[sel]["metrics"]
    log.info("selected step %d: %s", entries[sel]["step"], json.dumps(m, sort_keys=True))
    return 0


def cmd_train_fader(args, cfg):
    return _train_run(args, cfg, "fader")


def cmd_train_ae(args, cfg):
    return _train_run(args, cfg, "ae-conditioned" if args.conditioned else "ae")


def _latents(enc, records):
    x, g, r = data.stack(records)
    return T.encode_all(enc, x), g, r


def cmd_train_clf(args, cfg):
    enc_path = _resolve(args.encoder, "encoder")
    enc = _load(enc_path, nets.Encoder)
    out = cfg.out
    _prepare(out, cfg)
    split = _split(args.dataset, cfg, out)
    K = enc.spec.num_attrs
    spec = dataclasses.replace(enc.spec, clf_channels=cfg.arch.clf_channels,
                               clf_stride=cfg.arch.clf_stride, clf_dropout=cfg.arch.clf_dropout)
    z, g, r = _latents(enc, split.train)
    weights = None
    if args.weighted:
        weights = T.class_weights(data.race_fractions(split.train, K))
        log.info("class weights: %s", " ".join(f"{w:.4f}" for w in weights))
    kind = _provenance(args.encoder)
    model_id = args.model_id or MODEL_IDS.get(kind, "SimpleCNN")
    if args.weighted and not args.model_id:
        model_id += "-WL"
    loss_path = os.path.join(out, "clf_losses.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        clf, losses = T.train_classifier(z, g, cfg.clf, spec, races=r, weights=weights,
                                         log=lambda s, v: w.writerow((s, repr(v))))
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("classifier loss became non-finite")
    nets.save_model(clf, os.path.join(out, "classifier" + EXT))
    train_acc = float(np.mean(predict(clf.forward, z) == g) * 100)
    metrics = {"model_id": model_id, "encoder": os.path.relpath(enc_path, out), "encoder_kind": kind,
               "weighted": bool(args.weighted),
               "class_weights": None if weights is None else [float(v) for v in weights],
               "final_loss": float(losses[-1]), "train_accuracy": train_acc}
    _write_json(os.path.join(out, "metrics.json"), metrics)
    _stamp(out, "train-clf", cfg, ["split.json", "clf_losses.csv",
                                   "classifier" + EXT, "metrics.json"])
    log.info("%s: train accuracy %.2f%%", model_id, train_acc)
    return 0


def cmd_eval(args, cfg):
    clf = _load(_resolve(args.model, "classifier"), nets.Classifier)
    enc = _load(_resolve(args.encoder, "encoder"), nets.Encoder)
    if enc.spec.latent_shape != clf.spec.latent_shape:
        raise UsageError("encoder and classifier do not fit together\n"
                         f"encoder ArchSpec:\n{enc.spec.to_text()}\n"
                         f"classifier ArchSpec:\n{clf.spec.to_text()}")
    out = cfg.out
    _prepare(out, cfg)
    split = _split(args.dataset, cfg, out)
    records = getattr(split, args.split)
    if not records:
        raise UsageError(f"the {args.split} split is empty")
    z, _, _ = _latents(enc, records)
    model_id = args.model_id
    if model_id is None:
        mpath = os.path.join(args.model if os.path.isdir(args.model) else os.path.dirname(args.model),
                             "metrics.json")
        model_id = _read_json(mpath)["model_id"] if os.path.exists(mpath) else ""
    report, preds = evaluate_classifier(clf, z, records, enc.spec.num_attrs, model_id)
    write_predictions(preds, os.path.join(out, "predictions.csv"))
    emit_report(report, os.path.join(out, "report.json"))
    _stamp(out, "eval", cfg, ["split.json", "predictions.csv", "report.json"])
    print(json.dumps(report_dict(report), sort_keys=False))
    return 0


def cmd_grad_check(args, cfg):
    ok = gradcheck.main(print_fn=print, instances=args.instances, seed=cfg.seed)
    return 0 if ok else 1


def cmd_run_experiment(args, cfg):
    """gen-synth (unless a dataset is configured), both autoencoders, the
    three classifiers and their evaluations, plus latent race probes."""
    out = cfg.out
    _prepare(out, cfg)

    def sub(name, **kw):
        ns = argparse.Namespace(resume=False, conditioned=False, weighted=False, model_id=None,
                                split="test", **kw)
        return ns, dataclasses.replace(cfg, out=os.path.join(out, name))

    dataset = cfg.dataset
    if dataset is None:
        ns, c = sub("data")
        cmd_gen_synth(ns, c)
        dataset = c.out
    for name, fn in (("fader", cmd_train_fader), ("ae", cmd_train_ae)):
        ns, c = sub(name, dataset=dataset)
        fn(ns, c)
    runs = (("SimpleCNN", "ae", False), ("SimpleCNN-WL", "ae", True), ("FaderCNN", "fader", False))
    summary = {"config_hash": cfg.config_hash(), "reports": {}}
    for model_id, enc_run, weighted in runs:
        tag = model_id.lower().replace("-", "_")
        ns, c = sub("clf_" + tag, dataset=dataset, encoder=os.path.join(out, enc_run))
        ns.weighted, ns.model_id = weighted, model_id
        cmd_train_clf(ns, c)
        ns, c = sub("eval_" + tag, dataset=dataset, model=os.path.join(out, "clf_" + tag),
                    encoder=os.path.join(out, enc_run))
        ns.model_id = model_id
        cmd_eval(ns, c)
        summary["reports"][model_id] = _read_json(os.path.join(c.out, "report.json"))

    split = _split(dataset, cfg)
    _, _, rtr = data.stack(split.train)
    xva, _, rva = data.stack(split.validation)
    summary["probe_dis_val_acc"] = {}
    for run in ("ae", "fader"):
        enc = _load(_resolve(os.path.join(out, run), "encoder"), nets.Encoder)
        ztr, _, _ = _latents(enc, split.train)
        dis, _ = T.train_probe(ztr, rtr, cfg.probe, enc.spec)
        acc = balanced_accuracy(predict(dis.logits, T.encode_all(enc, xva)), rva, enc.spec.num_attrs)
        summary["probe_dis_val_acc"][run] = round(float(acc), 2)
    summary["fader_selected"] = _read_json(os.path.join(out, "fader", "selected.json"))["metrics"]
    _write_json(os.path.join(out, "summary.json"), summary)
    for model_id, rep in summary["reports"].items():
        print(f"{model_id:14s} overall {rep['overall_accuracy']:6.2f}  variance {rep['variance']:8.2f}")
    return 0


# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="fairfader", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.set_defaults(func=fn)
        return sp

    add("gen-synth", cmd_gen_synth, "write a synthetic biased dataset")
    sp = add("train-fader", cmd_train_fader, "adversarial encoder/decoder/discriminator training")
    sp.add_argument("dataset")
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    sp = add("train-ae", cmd_train_ae, "plain autoencoder training")
    sp.add_argument("dataset")
    sp.add_argument("--conditioned", action="store_true", help="give the decoder the attribute planes")
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    sp = add("train-clf", cmd_train_clf, "gender classifier on frozen latents")
    sp.add_argument("dataset")
    sp.add_argument("encoder", help="encoder model file or training run directory")
    sp.add_argument("--weighted", action="store_true", help="inverse race-frequency sample weights")
    sp.add_argument("--model-id", help="name recorded in metrics and reports")
    sp = add("eval", cmd_eval, "stratified per-race evaluation")
    sp.add_argument("dataset")
    sp.add_argument("model", help="classifier model file or train-clf directory")
    sp.add_argument("encoder", help="encoder model file or training run directory")
    sp.add_argument("--split", choices=("train", "validation", "test"), default="test")
    sp.add_argument("--model-id")
    sp = add("grad-check", cmd_grad_check, "finite-difference gradient checks")
    sp.add_argument("--instances", type=int, default=20)
    add("run-experiment", cmd_run_experiment, "full pipeline from one config")
    return p


def _threads():
    raw = os.environ.get("FAIRFADER_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"FAIRFADER_THREADS: expected a positive integer, got {raw!r}") from None
    return n


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        from threadpoolctl import threadpool_limits

        cfg = load_config(args.config, args.seed, args.out)
        with threadpool_limits(limits=_threads()):
            return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; partial artifacts stay on disk
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
