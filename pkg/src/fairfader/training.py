"""Adversarial Fader training, vanilla autoencoder training and the gender
classifier trainings (plain and inverse-frequency weighted).

One iteration of :func:`train_fader` first updates the discriminator on the
current encoding, then updates encoder and decoder against the freshly
updated discriminator.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import nets
from .data import stack
from .fairness import balanced_accuracy, predict
from .tensor import Tensor, backward, no_grad, sgd_step

# independent random streams, all derived from TrainConfig.seed
ENC_INIT, DEC_INIT, DIS_INIT, BATCH_ORDER, CLF_INIT, CLF_ORDER, AUGMENT = range(1, 8)


@dataclass
class TrainConfig:
    lambda_e: float = 1e-4
    warmup_steps: int | None = None  # None: first 20% of all steps
    eta: float = 2e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    eval_every: int = 100
    hflip: bool = False
    selection_gate: float = 0.25

    def validate(self):
        if not self.lambda_e >= 0:
            raise ValueError(f"lambda_e: must be >= 0, got {self.lambda_e}")
        if not self.eta > 0:
            raise ValueError(f"eta: must be > 0, got {self.eta}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size: must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs: must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every: must be >= 1, got {self.eval_every}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError(f"warmup_steps: must be >= 0, got {self.warmup_steps}")
        if self.selection_gate < 0:
            raise ValueError(f"selection_gate: must be >= 0, got {self.selection_gate}")

    def warmup(self, total_steps):
        return int(0.2 * total_steps) if self.warmup_steps is None else self.warmup_steps

    def lambda_at(self, step, total_steps):
        """lambda_e * min(1, step / warmup)."""
        w = self.warmup(total_steps)
        return self.lambda_e if w <= 0 else self.lambda_e * min(1.0, step / w)

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def rng(self, stream, *extra):
        return np.random.default_rng([self.seed, stream, *extra])


@dataclass
class LossRecord:
    step: int
    l_ae: float
    l_dis: float
    l_adv: float
    l_total: float
    dis_val_acc: float


@dataclass
class Checkpoint:
    step: int
    states: dict  # model name -> state dict
    metrics: dict
    config_hash: str


@dataclass
class TrainResult:
    models: dict
    checkpoints: list
    records: list
    selected: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def selected_checkpoint(self):
        return None if self.selected is None else self.checkpoints[self.selected]

    def restore(self, checkpoint=None):
        """Load ``checkpoint`` (default: the selected one) into ``models``."""
        ck = checkpoint or self.selected_checkpoint
        for name, state in ck.states.items():
            self.models[name].load_state_dict(state)
        return self.models


def _batch(x, y, lo, hi, order):
    idx = order[lo:hi]
    return x[idx], y[idx]


def _maybe_flip(x, cfg, step):
    if not cfg.hflip:
        return x
    flip = cfg.rng(AUGMENT, step).random(len(x)) < 0.5
    x = x.copy()
    x[flip] = x[flip, ..., ::-1]
    return x


def dis_step(enc, dis, x, y, eta):
    """One gradient step on the discriminator; the encoding is a constant."""
    if len(x) == 0:
        raise ValueError("dis_step needs a nonempty batch")
    with no_grad():
        z = enc.forward(Tensor(x), "train", update_stats=False)
    loss = F.softmax_nll(dis.logits(Tensor(z.data), "train"), y)
    backward(loss)
    sgd_step(dis.params, eta)
    return {"l_dis": loss.item()}


def encdec_step(enc, dec, dis, x, y, eta, lambda_eff):
    """One gradient step on encoder and decoder for
    ``mse(D(E(x), y), x) + lambda_eff * H(uniform, P_dis(. | E(x)))``.

    The discriminator is applied with batch statistics but never updated.
    """
    if len(x) == 0:
        raise ValueError("encdec_step needs a nonempty batch")
    k = enc.spec.num_attrs
    z = enc.forward(Tensor(x), "train")
    l_ae = F.mse_loss(dec.forward(z, y, "train"), x)
    if lambda_eff > 0:
        l_adv = F.soft_cross_entropy(dis.logits(z, "train", update_stats=False), np.full(k, 1.0 / k))
        total = l_ae + l_adv * lambda_eff
    else:
        with no_grad():
            l_adv = F.soft_cross_entropy(dis.logits(Tensor(z.data), "train", update_stats=False),
                                         np.full(k, 1.0 / k))
        total = l_ae
    backward(total)
    sgd_step(enc.parameters() + dec.parameters(), eta)
    dis.zero_grad()
    return {"l_ae": l_ae.item(), "l_adv": l_adv.item(), "l_total": total.item()}


def ae_step(enc, dec, x, y, eta):
    if len(x) == 0:
        raise ValueError("ae_step needs a nonempty batch")
    z = enc.forward(Tensor(x), "train")
    loss = F.mse_loss(dec.forward(z, y, "train"), x)
    backward(loss)
    sgd_step(enc.parameters() + dec.parameters(), eta)
    return {"l_ae": loss.item()}


def encode_all(enc, x, batch_size=256):
    """Eval-mode latents of ``x`` under a frozen encoder."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(enc.forward(Tensor(x[i : i + batch_size]), "eval").data)
    return np.concatenate(out)


def reconstruction_error(enc, dec, x, y, batch_size=256):
    tot = 0.0
    with no_grad():
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            z = enc.forward(Tensor(xb), "eval")
            r = dec.forward(z, None if y is None else y[i : i + batch_size], "eval")
            tot += float(((r.data - xb) ** 2).sum())
    return tot / x.size


def select_checkpoint(checkpoints, gate=0.25):
    """Index of the checkpoint with the lowest validation discriminator
    accuracy among those whose validation reconstruction error is within
    ``gate`` of the best one seen.  Ties go to the later checkpoint."""
    if not checkpoints:
        return None
    best_ae = min(c.metrics["val_l_ae"] for c in checkpoints)
    ok = [i for i, c in enumerate(checkpoints) if c.metrics["val_l_ae"] <= (1 + gate) * best_ae]
    return min(ok, key=lambda i: (checkpoints[i].metrics["dis_val_acc"], -i))


def _schedule(n_train, cfg):
    per_epoch = max(n_train // cfg.batch_size, 1)
    bs = min(cfg.batch_size, n_train)
    if bs < 2:
        raise ValueError(f"need at least 2 training samples, got {n_train}")
    return per_epoch, bs


def _batches(n_train, cfg, start_step=0, stream=BATCH_ORDER):
    """Yield ``(step, index array)``; batch order depends only on seed/epoch."""
    per_epoch, bs = _schedule(n_train, cfg)
    total = per_epoch * cfg.epochs
    step = start_step
    while step < total:
        epoch, j = divmod(step, per_epoch)
        order = cfg.rng(stream, epoch).permutation(n_train)
        yield step, order[j * bs : (j + 1) * bs]
        step += 1


def train_fader(split, spec, cfg: TrainConfig, resume: Checkpoint | None = None, log=None,
                on_checkpoint=None):
    """Adversarial training of encoder, conditioned decoder and discriminator.

    Evaluates every ``eval_every`` steps (and at the end), storing a
    checkpoint each time; ``selected`` indexes the checkpoint picked by
    :func:`select_checkpoint`.
    """
    cfg.validate()
    x, _, y = stack(split.train)
    if not split.validation:
        raise ValueError("train_fader needs a validation split")
    xv, _, yv = stack(split.validation)
    enc = nets.build_encoder(spec, cfg.rng(ENC_INIT))
    dec = nets.build_decoder(spec, cfg.rng(DEC_INIT), conditioned=True)
    dis = nets.build_discriminator(spec, cfg.rng(DIS_INIT))
    models = {"encoder": enc, "decoder": dec, "discriminator": dis}
    per_epoch, _ = _schedule(len(x), cfg)
    total = per_epoch * cfg.epochs
    h = cfg.config_hash()

    def evaluate():
        zv = encode_all(enc, xv)
        acc = balanced_accuracy(predict(dis.logits, zv), yv, spec.num_attrs)
        return {"dis_val_acc": acc, "val_l_ae": reconstruction_error(enc, dec, xv, yv)}

    start = 0
    if resume is not None:
        for name, st in resume.states.items():
            models[name].load_state_dict(st)
        start = resume.step
    metrics = evaluate()
    checkpoints, records = [], []
    for step, idx in _batches(len(x), cfg, start):
        xb, yb = _maybe_flip(x[idx], cfg, step), y[idx]
        d = dis_step(enc, dis, xb, yb, cfg.eta)
        lam = cfg.lambda_at(step, total)
        e = encdec_step(enc, dec, dis, xb, yb, cfg.eta, lam)
        t = step + 1
        if not all(math.isfinite(v) for v in (d["l_dis"], *e.values())):
            raise FloatingPointError(f"non-finite loss at step {t}: {d} {e}")
        due = t % cfg.eval_every == 0 or t == total
        if due:
            metrics = evaluate()
        rec = LossRecord(t, e["l_ae"], d["l_dis"], e["l_adv"], e["l_total"], metrics["dis_val_acc"])
        records.append(rec)
        if log is not None:
            log(rec)
        if due:
            checkpoints.append(Checkpoint(t, {n: m.state_dict() for n, m in models.items()},
                                          {**metrics, "lambda": lam}, h))
            if on_checkpoint is not None:
                on_checkpoint(checkpoints[-1])
    result = TrainResult(models, checkpoints, records)
    result.selected = select_checkpoint(checkpoints, cfg.selection_gate)
    return result


def train_vanilla_ae(split, spec, cfg: TrainConfig, conditioned=False, resume=None, log=None,
                     on_checkpoint=None):
    """Plain reconstruction training.  With ``conditioned`` the decoder gets
    the attribute planes (the Fader topology without the adversary)."""
    cfg.validate()
    x, _, y = stack(split.train)
    xv, _, yv = stack(split.validation) if split.validation else (x, None, y)
    enc = nets.build_encoder(spec, cfg.rng(ENC_INIT))
    dec = nets.build_decoder(spec, cfg.rng(DEC_INIT), conditioned=conditioned)
    models = {"encoder": enc, "decoder": dec}
    per_epoch, _ = _schedule(len(x), cfg)
    total = per_epoch * cfg.epochs
    h = cfg.config_hash()
    start = 0
    if resume is not None:
        for name, st in resume.states.items():
            models[name].load_state_dict(st)
        start = resume.step
    checkpoints, records = [], []
    for step, idx in _batches(len(x), cfg, start):
        xb, yb = _maybe_flip(x[idx], cfg, step), y[idx]
        e = ae_step(enc, dec, xb, yb if conditioned else None, cfg.eta)
        t = step + 1
        if not math.isfinite(e["l_ae"]):
            raise FloatingPointError(f"non-finite loss at step {t}")
        rec = LossRecord(t, e["l_ae"], math.nan, math.nan, e["l_ae"], math.nan)
        records.append(rec)
        if log is not None:
            log(rec)
        if t % cfg.eval_every == 0 or t == total:
            err = reconstruction_error(enc, dec, xv, yv if conditioned else None)
            checkpoints.append(Checkpoint(t, {n: m.state_dict() for n, m in models.items()},
                                          {"val_l_ae": err}, h))
            if on_checkpoint is not None:
                on_checkpoint(checkpoints[-1])
    result = TrainResult(models, checkpoints, records)
    if checkpoints:
        result.selected = min(range(len(checkpoints)), key=lambda i: checkpoints[i].metrics["val_l_ae"])
    return result


def class_weights(freqs):
    """Inverse-frequency class weights normalized to mean 1."""
    f = np.asarray(freqs, dtype=np.float64)
    if f.ndim != 1 or f.size < 1:
        raise ValueError("freqs must be a nonempty vector")
    if np.any(f <= 0):
        raise ValueError(f"class frequency must be positive, got {f.min()}")
    if abs(f.sum() - 1) > 1e-6:
        raise ValueError(f"frequencies must sum to 1, got {f.sum()}")
    inv = 1.0 / f
    return inv / inv.mean()


def train_latent_classifier(model, latents, labels, cfg: TrainConfig, sample_weights=None,
                            order_stream=CLF_ORDER, log=None):
    """Minimize softmax NLL of ``model`` on fixed latents.  With
    ``sample_weights`` each batch loss is the weighted mean of the per-sample
    losses (divided by the batch's total weight)."""
    cfg.validate()
    latents = np.asarray(latents, dtype=np.float32)
    labels = np.asarray(labels)
    w = None if sample_weights is None else np.asarray(sample_weights, dtype=np.float32)
    per_epoch, bs = _schedule(len(latents), cfg)
    records = []
    for step, idx in _batches(len(latents), cfg, stream=order_stream):
        logits = model.forward(Tensor(latents[idx]), "train")
        if w is None:
            loss = F.softmax_nll(logits, labels[idx])
        else:
            loss = F.softmax_nll(logits, labels[idx], w[idx], weighted_mean=True)
        backward(loss)
        sgd_step(model.params, cfg.eta)
        records.append(loss.item())
        if log is not None:
            log(step + 1, records[-1])
    return records


def train_classifier(latents, genders, cfg: TrainConfig, spec, races=None, weights=None, log=None):
    """Gender classifier on latents from a frozen encoder.

    ``weights`` is a per-race weight vector (see :func:`class_weights`); each
    sample's loss is multiplied by its race's entry.  All-ones weights
    reproduce unweighted training exactly.
    """
    sw = None
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (spec.num_attrs,):
            raise ValueError(f"weight vector has length {weights.size}, expected K={spec.num_attrs}")
        if races is None:
            raise ValueError("weighted training needs the race of every sample")
        sw = weights[np.asarray(races)]
    clf = nets.build_classifier(spec, cfg.rng(CLF_INIT))
    clf.rng = cfg.rng(CLF_INIT, 1)
    losses = train_latent_classifier(clf, latents, genders, cfg, sw, log=log)
    return clf, losses


def train_probe(latents, races, cfg: TrainConfig, spec):
    """Fresh discriminator fit to predict race from fixed latents."""
    dis = nets.build_discriminator(spec, cfg.rng(DIS_INIT, 1))
    losses = train_latent_classifier(dis, latents, races, cfg)
    return dis, losses


# artifacts


LOSS_FIELDS = ("step", "l_ae", "l_dis", "l_adv", "l_total", "dis_val_acc")


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_loss_csv(records, path, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(LOSS_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in LOSS_FIELDS])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), *(float(r[f]) if r[f] else math.nan for f in LOSS_FIELDS[1:]))
            for r in rows]
