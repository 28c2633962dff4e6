"""Caption generation (beam search, top-k sampling) and repetition diagnostics."""
from dataclasses import dataclass, field

import numpy as np

from ocrcap import autodiff as ad
from ocrcap.vocab import BOS_ID, EOS_ID

REPEAT_RUN = 3


@dataclass
class Hypothesis:
    tokens: tuple = ()
    log_prob: float = 0.0
    finished: bool = False
    state: object = field(default=None, repr=False, compare=False)
    p_gens: tuple = field(default=(), repr=False)
    copied: tuple = field(default=(), repr=False)

    @property
    def length(self):
        return len(self.tokens)

    def score(self, alpha=1.0):
        return self.log_prob / max(1, self.length) ** alpha


@dataclass
class DecodeReport:
    image_id: str
    token_ids: tuple  # includes EOS when the hypothesis finished
    caption: tuple  # words, EOS stripped
    log_prob: float
    p_gen_trace: tuple
    copied_positions: tuple
    repetition_flag: bool

    def to_json(self, include_p_gen=True):
        out = {
            "image_id": self.image_id,
            "caption": " ".join(self.caption),
        }
        if include_p_gen and self.p_gen_trace:
            out["p_gen_trace"] = [round(p, 6) for p in self.p_gen_trace]
        out["copied_positions"] = list(self.copied_positions)
        out["repetition_flag"] = self.repetition_flag
        return out


def has_repetition(tokens, run=REPEAT_RUN):
    count = 0
    prev = object()
    for t in tokens:
        count = count + 1 if t == prev else 1
        if count >= run:
            return True
        prev = t
    return False


def _is_copied(out, token_id, fixed_size):
    if token_id >= fixed_size:
        return True
    if out.copy_probs is None:
        return False
    copy_mass = (1.0 - out.p_gen) * out.copy_probs.data[0, token_id]
    gen_mass = out.p_gen * out.step.p_vocab.data[0, token_id]
    return copy_mass > gen_mass


def _extend(hyp, out, token_id, new_state, fixed_size):
    pos = len(hyp.tokens)
    copied = hyp.copied + ((pos,) if _is_copied(out, token_id, fixed_size) else ())
    return Hypothesis(
        tokens=hyp.tokens + (token_id,),
        log_prob=hyp.log_prob + float(np.log(out.probs.data[0, token_id])),
        finished=token_id == EOS_ID,
        state=new_state,
        p_gens=hyp.p_gens + ((out.p_gen,) if out.p_gen is not None else ()),
        copied=copied,
    )


def _report(captioner, session, hyp):
    ids = hyp.tokens
    words = tuple(captioner.token(i, session) for i in ids if i != EOS_ID)
    return DecodeReport(
        image_id=session.bundle.image_id,
        token_ids=ids,
        caption=words,
        log_prob=hyp.log_prob,
        p_gen_trace=hyp.p_gens,
        copied_positions=tuple(p for p in hyp.copied if ids[p] != EOS_ID),
        repetition_flag=has_repetition(words),
    )


def _greedy(captioner, session, max_len):
    fixed = captioner.vocab.fixed_size
    hyp = Hypothesis(state=captioner.initial_state())
    while not hyp.finished and hyp.length < max_len:
        prev = hyp.tokens[-1] if hyp.tokens else BOS_ID
        out, new_state = captioner.step(session, hyp.state, prev)
        token = int(np.argmax(out.probs.data[0]))
        hyp = _extend(hyp, out, token, new_state, fixed)
    return hyp


def _select(pool, alpha):
    return min(pool, key=lambda h: (-h.score(alpha), h.tokens))


def beam_search(captioner, bundle, beam_size=3, max_len=20, alpha=1.0):
    """Length-normalised beam search over the model's output distribution.

    The greedy hypothesis always enters the final pool, so the result never
    scores below greedy decoding. Ties go to the lexicographically smaller id
    sequence.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    fixed = captioner.vocab.fixed_size
    with ad.no_grad():
        session = captioner.start(bundle)
        greedy = _greedy(captioner, session, max_len)
        if beam_size == 1:
            return _report(captioner, session, greedy)
        active = [Hypothesis(state=captioner.initial_state())]
        pool = [greedy]
        for _ in range(max_len):
            candidates = []
            for hyp in active:
                prev = hyp.tokens[-1] if hyp.tokens else BOS_ID
                out, new_state = captioner.step(session, hyp.state, prev)
                probs = out.probs.data[0]
                with np.errstate(divide="ignore"):
                    logp = np.log(probs)
                # only the best beam_size continuations of one parent can survive
                top = np.argsort(-logp, kind="stable")[:beam_size]
                for token in top:
                    if np.isfinite(logp[token]):
                        candidates.append(
                            (hyp.log_prob + logp[token], hyp.tokens + (int(token),), hyp, out, new_state)
                        )
            candidates.sort(key=lambda c: (-c[0], c[1]))
            active = []
            for _, toks, hyp, out, new_state in candidates[:beam_size]:
                child = _extend(hyp, out, toks[-1], new_state, fixed)
                (pool if child.finished else active).append(child)
            if not active:
                break
        pool.extend(active)  # closed at max_len
        return _report(captioner, session, _select(pool, alpha))


def top_k_sample(captioner, bundle, k=5, temperature=1.0, max_len=20, seed=0):
    """Sample from the ``k`` most probable tokens at each step (seeded)."""
    if k < 1 or not temperature > 0:
        raise ValueError("k must be >= 1 and temperature > 0")
    rng = np.random.default_rng(seed)
    fixed = captioner.vocab.fixed_size
    with ad.no_grad():
        session = captioner.start(bundle)
        hyp = Hypothesis(state=captioner.initial_state())
        while not hyp.finished and hyp.length < max_len:
            prev = hyp.tokens[-1] if hyp.tokens else BOS_ID
            out, new_state = captioner.step(session, hyp.state, prev)
            probs = out.probs.data[0]
            top = np.argsort(-probs, kind="stable")[:k]
            p = probs[top]
            if k == 1 or p[0] <= 0:
                token = int(top[0])
            else:
                with np.errstate(divide="ignore"):
                    logits = np.log(p) / temperature
                w = np.exp(logits - logits.max())
                w /= w.sum()
                token = int(top[rng.choice(len(top), p=w)])
            hyp = _extend(hyp, out, token, new_state, fixed)
        return _report(captioner, session, hyp)


def repetition_rate(reports):
    """Fraction of captions in which some token repeats 3+ times in a row.

    Accepts DecodeReports or plain token sequences / strings.
    """
    if not reports:
        raise ValueError("repetition_rate: no captions given")
    flags = []
    for r in reports:
        if isinstance(r, DecodeReport):
            flags.append(r.repetition_flag)
        elif isinstance(r, str):
            flags.append(has_repetition(r.split()))
        else:
            flags.append(has_repetition(list(r)))
    return sum(flags) / len(flags)


def gold_token_hit_rate(reports, gold_tokens):
    """Fraction of captions containing their image's gold OCR word."""
    if not reports:
        raise ValueError("no reports")
    hits = sum(gold_tokens[r.image_id] in r.caption for r in reports)
    return hits / len(reports)
