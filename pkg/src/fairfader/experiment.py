"""End-to-end desk-scale bias experiment.

For one seed: generate biased synthetic data, train a Fader network and a
vanilla autoencoder, probe both latent spaces for race, train the three
gender classifiers (SimpleCNN, SimpleCNN-WL, FaderCNN) and evaluate each on
the race-balanced test split.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data, nets
from . import training as T
from .fairness import EvalReport, PredictionRecord, balanced_accuracy, predict

log = logging.getLogger(__name__)


def desk_arch(**kw):
    base = dict(input_channels=1, input_size=32, depth=4, base_channels=8, num_attrs=5,
                clf_channels=(64, 32, 16, 8))
    base.update(kw)
    return nets.ArchSpec(**base)


@dataclass
class DeskConfig:
    synth: data.SynthConfig = field(default_factory=data.SynthConfig)
    arch: nets.ArchSpec = field(default_factory=desk_arch)
    # the discriminator needs ~500 steps to learn race before the fooling term bites
    fader: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(
        lambda_e=0.05, warmup_steps=500, eta=0.05, epochs=10, eval_every=50))
    ae: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(
        lambda_e=0.0, eta=0.05, epochs=10, eval_every=50))
    clf: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(
        lambda_e=0.0, eta=0.05, epochs=10, eval_every=50))
    probe: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(
        lambda_e=0.0, eta=0.05, epochs=10, eval_every=50))
    n_test_per_race: int = 50
    val_fraction: float = 0.1

    def with_seed(self, seed):
        r = dataclasses.replace
        return r(self, synth=r(self.synth, seed=seed), fader=r(self.fader, seed=seed),
                 ae=r(self.ae, seed=seed), clf=r(self.clf, seed=seed), probe=r(self.probe, seed=seed))


@dataclass
class DeskResult:
    seed: int
    reports: dict  # model id -> EvalReport
    fader_dis_acc: float  # selected checkpoint, validation, class-balanced
    probe_vanilla_acc: float
    probe_fader_acc: float
    dis_curve: list  # (step, dis_val_acc, lambda) per fader checkpoint
    warmup_step: int
    selected_step: int
    seconds: float

    @property
    def variances(self):
        return {k: r.variance for k, r in self.reports.items()}


def evaluate_classifier(clf, latents, records, K, model_id=""):
    pred = predict(clf.forward, latents)
    preds = [PredictionRecord(r.source_id, int(p), r.gender, r.race) for r, p in zip(records, pred)]
    return EvalReport.from_predictions(preds, K, model_id), preds


def run_desk(cfg: DeskConfig, seed: int) -> DeskResult:
    t0 = time.time()
    cfg = cfg.with_seed(seed)
    K = cfg.arch.num_attrs
    split = data.make_splits(data.gen_synthetic(cfg.synth), cfg.n_test_per_race, cfg.val_fraction, seed, K)
    xtr, gtr, rtr = data.stack(split.train)
    xva, _, rva = data.stack(split.validation)
    xte, _, _ = data.stack(split.test)

    fader = T.train_fader(split, cfg.arch, cfg.fader)
    sel = fader.selected_checkpoint
    fader.restore()
    enc_f = fader.models["encoder"]

    ae = T.train_vanilla_ae(split, cfg.arch, cfg.ae)
    ae.restore()
    enc_v = ae.models["encoder"]

    lat = {name: (T.encode_all(e, xtr), T.encode_all(e, xva), T.encode_all(e, xte))
           for name, e in (("vanilla", enc_v), ("fader", enc_f))}

    probes = {}
    for name, (ztr, zva, _) in lat.items():
        dis, _ = T.train_probe(ztr, rtr, cfg.probe, cfg.arch)
        probes[name] = balanced_accuracy(predict(dis.logits, zva), rva, K)

    weights = T.class_weights(data.race_fractions(split.train, K))
    reports = {}
    for model_id, space, w in (("SimpleCNN", "vanilla", None), ("SimpleCNN-WL", "vanilla", weights),
                               ("FaderCNN", "fader", None)):
        ztr, _, zte = lat[space]
        clf, _ = T.train_classifier(ztr, gtr, cfg.clf, cfg.arch, races=rtr, weights=w)
        reports[model_id], _ = evaluate_classifier(clf, zte, split.test, K, model_id)

    per_epoch, _ = T._schedule(len(xtr), cfg.fader)
    res = DeskResult(
        seed=seed,
        reports=reports,
        fader_dis_acc=sel.metrics["dis_val_acc"],
        probe_vanilla_acc=probes["vanilla"],
        probe_fader_acc=probes["fader"],
        dis_curve=[(c.step, c.metrics["dis_val_acc"], c.metrics["lambda"]) for c in fader.checkpoints],
        warmup_step=cfg.fader.warmup(per_epoch * cfg.fader.epochs),
        selected_step=sel.step,
        seconds=time.time() - t0,
    )
    log.info("seed %d: %s", seed, summarize(res))
    return res


def rise_then_fall(curve, warmup_step, peak_min=60.0, floor=40.0):
    """Whether validation discriminator accuracy exceeds ``peak_min`` and
    later, after the warmup, drops to ``floor`` or below."""
    accs = [a for _, a, _ in curve]
    if not accs or max(accs) <= peak_min:
        return False
    peak = int(np.argmax(accs))
    later = [a for (s, a, _), i in zip(curve, range(len(curve))) if i > peak and s >= warmup_step]
    return bool(later) and min(later) <= floor


def summarize(res: DeskResult):
    v = res.variances
    return (f"var SimpleCNN={v['SimpleCNN']:.2f} WL={v['SimpleCNN-WL']:.2f} Fader={v['FaderCNN']:.2f} | "
            f"acc " + " ".join(f"{k}={r.overall_accuracy:.1f}" for k, r in res.reports.items()) +
            f" | dis sel={res.fader_dis_acc:.1f}@{res.selected_step} probe van={res.probe_vanilla_acc:.1f} "
            f"fad={res.probe_fader_acc:.1f} | {res.seconds:.0f}s")
