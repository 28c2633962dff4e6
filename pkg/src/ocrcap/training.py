"""Teacher-forced cross-entropy training with Adam and step-annealed learning rate."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ocrcap import autodiff as ad
from ocrcap import model as M
from ocrcap.captioner import Captioner

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

PRESETS = {
    # values used for the full-scale runs; the epoch count depends on the variant
    "paper": {"learning_rate": 2e-5, "anneal_factor": 0.8, "anneal_every": 3, "batch_size": 16},
    # desk-scale: randomly initialised small model, so a much larger step size
    "synthetic": {
        "learning_rate": 5e-3,
        "anneal_factor": 0.8,
        "anneal_every": 3,
        "batch_size": 16,
        "epochs": 20,
    },
}
PAPER_EPOCHS = {"baseline": 10, "extended": 15, "pointer": 15}


@dataclass
class TrainConfig:
    variant: str = "pointer"
    ocr_threshold: int = 2
    learning_rate: float = 5e-3
    anneal_factor: float = 0.8
    anneal_every: int = 3
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 5.0
    d_model: int = 64
    n_layers: int = 2
    teacher_forcing: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.variant not in M.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.anneal_every < 1:
            raise ValueError("epochs, batch_size and anneal_every must be >= 1")


def preset_config(preset, variant, **overrides):
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if preset == "paper":
        values["epochs"] = PAPER_EPOCHS[variant]
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(variant=variant, **values)


def lr_schedule(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.learning_rate * cfg.anneal_factor ** (epoch // cfg.anneal_every)


def sequence_loss(step_distributions, target, floor=PROB_FLOOR):
    """Sum over steps of ``-log max(P_t(y_t), floor)``."""
    if len(step_distributions) != len(target):
        raise ValueError(
            f"sequence_loss: {len(step_distributions)} distributions for {len(target)} targets"
        )
    terms = [
        ad.log(ad.clamp_min(ad.pick(dist, (0, int(y))), floor))
        for dist, y in zip(step_distributions, target)
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return -total


# ------------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place Adam update of ``params`` (name -> Tensor) from ``grads`` (name -> array)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"adam_step: gradient {g.shape} for {name} {params[name].shape}")
        if not np.isfinite(g).all():
            raise ad.NumericalError(f"adam_step: non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data = params[name].data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        k = max_norm / total
        grads = {n: g * k for n, g in grads.items()}
    return grads, total


# ------------------------------------------------------------------ data


def pair_examples(bundles, records):
    by_id = {r.image_id: r for r in records}
    missing = [b.image_id for b in bundles if b.image_id not in by_id]
    if missing:
        raise ValueError(f"no captions for image(s): {', '.join(missing[:5])}")
    return [(b, by_id[b.image_id].captions) for b in bundles]


def _image_loss(captioner, bundle, captions):
    session = captioner.start(bundle)
    losses, p_gens = [], []
    for cap in captions:
        target = captioner.target_ids(cap, session)
        outs = captioner.teacher_forced(session, target)
        losses.append(sequence_loss([o.probs for o in outs], target))
        p_gens.extend(o.p_gen for o in outs if o.p_gen is not None)
    return losses, p_gens


@dataclass
class TrainResult:
    captioner: Captioner
    history: list


def train(bundles, records, ext_vocab, cfg, out_dir=None):
    """Train one variant; returns the model and its per-epoch log records.

    With ``out_dir`` set, a checkpoint per epoch and ``train_log.jsonl`` are written.
    """
    examples = pair_examples(bundles, records)
    if not examples:
        raise ValueError("train: empty dataset")
    captioner = Captioner.create(
        cfg.variant, ext_vocab, seed=cfg.seed, d_model=cfg.d_model, n_layers=cfg.n_layers,
        d_region=bundles[0].regions.shape[1],
        d_ocr=_ocr_dim(bundles),
    )
    params = captioner.params
    opt = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(examples))
        epoch_losses, epoch_pgen = [], []
        for batch_id, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            losses = []
            for bundle, captions in batch:
                cl, pg = _image_loss(captioner, bundle, captions)
                losses.extend(cl)
                epoch_pgen.extend(pg)
            total = losses[0]
            for term in losses[1:]:
                total = total + term
            batch_loss = ad.scale(total, 1.0 / len(losses))
            if not batch_loss.is_finite():
                raise ad.NumericalError(f"epoch {epoch} batch {batch_id}: loss is not finite")
            for p in params.values():
                p.zero_grad()
            ad.backward(batch_loss)
            grads = {
                n: (p.grad if p.grad is not None else np.zeros(p.shape)) for n, p in params.items()
            }
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, opt, lr)
            epoch_losses.extend(float(l.item()) for l in losses)
        record = {"epoch": epoch, "lr": lr, "mean_loss": float(np.mean(epoch_losses))}
        if cfg.variant == "pointer":
            record["mean_p_gen"] = float(np.mean(epoch_pgen)) if epoch_pgen else 1.0
        history.append(record)
        log.info("epoch %d lr %.3g loss %.4f", epoch, lr, record["mean_loss"])
        if out is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            extra = {"train_config": asdict(cfg), "epoch": epoch}
            M.save_checkpoint(
                out / f"checkpoint_epoch_{epoch + 1:03d}.npz",
                captioner.cfg, params, captioner.vocab_hash, extra,
            )
            M.save_checkpoint(out / "checkpoint.npz", captioner.cfg, params, captioner.vocab_hash, extra)
    return TrainResult(captioner, history)


def _ocr_dim(bundles):
    for b in bundles:
        if b.ocr:
            return b.ocr[0].embedding.shape[0]
    return M.ModelConfig.d_ocr


def evaluate_loss(captioner, bundles, records, strict=True):
    """Mean per-caption teacher-forced loss.

    With ``strict`` a gold word the model cannot represent (mapped to UNK) is
    charged the probability floor instead of receiving credit for UNK.
    """
    examples = pair_examples(bundles, records)
    floor_cost = -math.log(PROB_FLOOR)
    losses = []
    with ad.no_grad():
        for bundle, captions in examples:
            session = captioner.start(bundle)
            for cap in captions:
                target = captioner.target_ids(cap, session)
                outs = captioner.teacher_forced(session, target)
                ok = captioner.representable(cap, session) + [True]
                total = 0.0
                for o, y, good in zip(outs, target, ok):
                    if strict and not good:
                        total += floor_cost
                    else:
                        total += -math.log(max(float(o.probs.data[0, y]), PROB_FLOOR))
                losses.append(total)
    return float(np.mean(losses))


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
