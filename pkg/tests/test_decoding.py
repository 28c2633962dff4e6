import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from ocrcap import decoding as D
from ocrcap import features as F
from ocrcap.autodiff import Tensor
from ocrcap.captioner import Captioner, Session, StepOutput
from ocrcap.vocab import BOS_ID, EOS_ID, build_fixed_vocab, extend_with_ocr

A, B = 4, 5
NAMES = {A: "a", B: "b", EOS_ID: "<eos>"}

# next-token tables keyed by prefix; after two words only EOS is possible
TABLE = {
    (): {A: 0.5, B: 0.4, EOS_ID: 0.1},
    (A,): {A: 0.4, B: 0.3, EOS_ID: 0.3},
    (B,): {A: 0.9, B: 0.05, EOS_ID: 0.05},
}


class ToyCaptioner:
    """Prefix-table language model over {a, b, EOS}."""

    vocab = SimpleNamespace(fixed_size=6)

    def start(self, bundle):
        return Session(bundle, None, None)

    def initial_state(self):
        return ()

    def dist(self, prefix):
        p = np.zeros(6)
        for k, v in TABLE.get(prefix, {EOS_ID: 1.0}).items():
            p[k] = v
        return p

    def step(self, session, state, prev):
        prefix = state if prev == BOS_ID else state + (prev,)
        return StepOutput(Tensor(self.dist(prefix)[None, :]), None, None), prefix

    def token(self, i, session):
        return NAMES[i]


def _toy_report(beam):
    return D.beam_search(ToyCaptioner(), SimpleNamespace(image_id="toy"), beam_size=beam, max_len=5)


def _exhaustive_best(max_len=5):
    cap = ToyCaptioner()
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product([A, B, EOS_ID], repeat=n):
            if EOS_ID in seq[:-1]:
                continue
            lp = sum(math.log(cap.dist(seq[:i])[t]) if cap.dist(seq[:i])[t] > 0 else -math.inf for i, t in enumerate(seq))
            if seq[-1] != EOS_ID and n < max_len:
                continue
            key = (-lp / n, seq)
            if best is None or key < best:
                best = key
    return best[1]


def test_beam_beats_greedy_on_toy_model():
    greedy = _toy_report(1)
    beam = _toy_report(2)
    assert greedy.caption == ("a", "a")
    assert beam.caption == ("b", "a")
    assert beam.token_ids == _exhaustive_best()
    assert beam.log_prob / len(beam.token_ids) > greedy.log_prob / len(greedy.token_ids)
    assert beam.log_prob == pytest.approx(math.log(0.36), abs=1e-12)


def test_has_repetition():
    assert D.has_repetition("a a a b".split())
    assert not D.has_repetition("a a b a a".split())
    assert not D.has_repetition([])


def test_repetition_rate_examples():
    assert D.repetition_rate(["a a a b", "a b c"]) == 0.5
    assert D.repetition_rate([["x", "x", "x"]]) == 1.0
    with pytest.raises(ValueError):
        D.repetition_rate([])


# ---------------------------------------------------------------- real model


@pytest.fixture(scope="module")
def model():
    cfg = F.SynthConfig(n_images=6, n_regions=3, d_v=8, d_e=8, copy_rate=1.0)
    bundles, records = F.synth_generate(cfg, 5)
    base = build_fixed_vocab([c for r in records for c in r.captions], 1, restrict_to=cfg.fixed_vocab_words)
    ext = extend_with_ocr(base, [b.cleaned().ocr_tokens[:1] for b in bundles[:3]], 1)
    cap = Captioner.create("pointer", ext, seed=2, d_model=12, n_layers=1, d_region=8, d_ocr=8, init_scale=0.8)
    return cap, bundles


def test_beam_one_equals_greedy(model):
    cap, bundles = model
    for b in bundles:
        g = D.beam_search(cap, b, beam_size=1, max_len=8)
        k1 = D.top_k_sample(cap, b, k=1, max_len=8, seed=9)
        assert g.token_ids == k1.token_ids


@pytest.mark.parametrize("beam", [2, 3, 5])
def test_beam_never_below_greedy(model, beam):
    cap, bundles = model
    for b in bundles:
        g = D.beam_search(cap, b, beam_size=1, max_len=8)
        r = D.beam_search(cap, b, beam_size=beam, max_len=8)
        assert r.log_prob / len(r.token_ids) >= g.log_prob / len(g.token_ids) - 1e-12


def test_rescoring_matches_decode(model):
    cap, bundles = model
    for b in bundles:
        for r in (D.beam_search(cap, b, 3, 8), D.top_k_sample(cap, b, 4, 1.0, 8, seed=1)):
            assert abs(cap.score(b, list(r.token_ids)) - r.log_prob) <= 1e-9


def test_top_k_seeded(model):
    cap, bundles = model
    a = [D.top_k_sample(cap, b, 5, 1.5, 8, seed=4).token_ids for b in bundles]
    c = [D.top_k_sample(cap, b, 5, 1.5, 8, seed=4).token_ids for b in bundles]
    assert a == c


def test_low_temperature_is_greedy(model):
    cap, bundles = model
    for b in bundles:
        g = D.beam_search(cap, b, beam_size=1, max_len=8)
        assert D.top_k_sample(cap, b, 5, 1e-6, 8, seed=3).token_ids == g.token_ids


def test_report_fields(model):
    cap, bundles = model
    r = D.beam_search(cap, bundles[0], 3, 8)
    assert len(r.p_gen_trace) == len(r.token_ids)
    assert all(0 < p < 1 for p in r.p_gen_trace)
    js = r.to_json()
    assert set(js) == {"image_id", "caption", "p_gen_trace", "copied_positions", "repetition_flag"}
    assert all(0 <= p < len(r.caption) for p in r.copied_positions)


def test_copied_positions_marked(model):
    cap, bundles = model
    # push all mass through the copy channel: every emitted word is copied
    saved = cap.params["ptr.b"].data.copy()
    cap.params["ptr.b"].data[:] = -30.0
    try:
        r = D.beam_search(cap, bundles[0], 1, 3)
        words = [w for w in r.caption]
        assert words and set(words) <= set(bundles[0].cleaned().ocr_tokens)
        assert r.copied_positions == tuple(range(len(words)))
    finally:
        cap.params["ptr.b"].data[:] = saved


def test_argument_errors(model):
    cap, bundles = model
    with pytest.raises(ValueError):
        D.beam_search(cap, bundles[0], beam_size=0)
    with pytest.raises(ValueError):
        D.top_k_sample(cap, bundles[0], k=2, temperature=0)
