"""Variant wiring: one object that encodes an image and yields per-step
distributions over the right output space.

* ``baseline``  vision only, softmax over the fixed vocabulary.
* ``extended``  regions + OCR features, softmax over the extended vocabulary.
* ``pointer``   regions + OCR features, fixed-vocabulary generator mixed with
  a copy distribution over the image's OCR tokens.
"""
from dataclasses import dataclass

import numpy as np

from ocrcap import autodiff as ad
from ocrcap import model as M
from ocrcap import pointer as P
from ocrcap.vocab import BOS_ID, EOS_ID, UNK, UNK_ID, as_extended, vocab_hash


@dataclass
class Session:
    """Everything a decoder needs for one image."""

    bundle: object
    memory: M.Memory
    layout: P.CopyLayout


@dataclass
class StepOutput:
    probs: ad.Tensor  # (1, layout.size)
    p_gen: float  # None outside the pointer variant
    step: M.DecoderStep
    copy_probs: ad.Tensor = None  # (1, layout.size) copy component, pointer only


class Captioner:
    def __init__(self, cfg, params, ext_vocab):
        self.cfg = cfg
        self.params = params
        self.vocab = as_extended(ext_vocab)
        expected = len(self.vocab) if cfg.variant == "extended" else self.vocab.fixed_size
        if cfg.vocab_size != expected or cfg.fixed_size != self.vocab.fixed_size:
            raise ValueError(
                f"{cfg.variant} model expects a vocabulary of size {cfg.vocab_size}, "
                f"got fixed={self.vocab.fixed_size} extended={len(self.vocab)}"
            )

    @classmethod
    def create(cls, variant, ext_vocab, seed=0, **dims):
        ext = as_extended(ext_vocab)
        size = len(ext) if variant == "extended" else ext.fixed_size
        cfg = M.ModelConfig(
            variant=variant, vocab_size=size, fixed_size=ext.fixed_size, seed=seed, **dims
        )
        return cls(cfg, M.init_params(cfg), ext)

    @property
    def vocab_hash(self):
        return vocab_hash(self.vocab)

    # -------------------------------------------------------------- sessions

    def prepare(self, bundle):
        """Bundle as the model consumes it: cleaned OCR, none for the baseline."""
        return bundle.cleaned() if self.cfg.uses_ocr else bundle.without_ocr()

    def start(self, bundle):
        b = self.prepare(bundle)
        memory = M.encode(b, self.params, self.cfg)
        if self.cfg.variant == "pointer":
            layout = P.copy_layout(memory.ocr_tokens, self.vocab)
        else:
            size = self.cfg.vocab_size
            layout = P.CopyLayout((), (), size, self.vocab.fixed_size)
        return Session(b, memory, layout)

    def initial_state(self):
        return M.initial_state(self.cfg)

    def feedback_id(self, ext_id):
        """Embedding row for a previously emitted id (copied OCR-only ids feed back as UNK)."""
        return ext_id if ext_id < self.cfg.vocab_size else UNK_ID

    def step(self, session, state, prev_id):
        step, new_state = M.decode_step(
            state, self.feedback_id(prev_id), session.memory, self.params, self.cfg
        )
        if self.cfg.variant != "pointer":
            return StepOutput(step.p_vocab, None, step), new_state
        size = session.layout.size
        if not session.layout.ids:
            probs = P.mix(step.p_vocab, None, ad.Tensor([[1.0]]), size)
            return StepOutput(probs, 1.0, step), new_state
        p_gen = P.generation_probability(step, self.params)
        copy = P.copy_distribution(step.a_t, session.memory.region_count, session.layout)
        probs = P.mix(step.p_vocab, copy, p_gen, size)
        return StepOutput(probs, p_gen.item(), step, copy), new_state

    # -------------------------------------------------------------- targets

    def target_ids(self, tokens, session):
        """Gold extended ids for a caption, EOS appended."""
        ids = []
        ocr = set(session.memory.ocr_tokens)
        for tok in tokens:
            if self.cfg.variant == "pointer":
                i = session.layout.token_id(tok, self.vocab) if tok in ocr else None
                if i is None:
                    i = self.vocab.base.id(tok)
            elif self.cfg.variant == "extended":
                i = self.vocab.id(tok)
            else:
                i = self.vocab.base.id(tok)
            ids.append(i)
        ids.append(EOS_ID)
        return ids

    def representable(self, tokens, session):
        """Per-token flags: False where the gold word had to be mapped to UNK."""
        ids = self.target_ids(tokens, session)[:-1]
        return [i != UNK_ID or t == UNK for i, t in zip(ids, tokens)]

    def token(self, ext_id, session):
        if ext_id < len(self.vocab):
            return self.vocab.token(ext_id)
        return session.layout.local_tokens[ext_id - len(self.vocab)]

    def teacher_forced(self, session, target):
        """Step outputs when conditioning on the gold prefix."""
        state = self.initial_state()
        prev = BOS_ID
        outs = []
        for y in target:
            out, state = self.step(session, state, prev)
            outs.append(out)
            prev = y
        return outs

    def score(self, bundle, ids):
        """Teacher-forced log-probability of an id sequence (floats only)."""
        with ad.no_grad():
            session = self.start(bundle)
            outs = self.teacher_forced(session, ids)
        total = 0.0
        for out, y in zip(outs, ids):
            total += float(np.log(out.probs.data[0, y]))
        return total
