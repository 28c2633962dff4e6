"""Attention-on-Attention encoder/decoder over region and OCR features."""
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from ocrcap import autodiff as ad
from ocrcap.autodiff import Tensor

VARIANTS = ("baseline", "extended", "pointer")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "pointer"
    vocab_size: int = 0  # rows of the word embedding / width of the generator head
    fixed_size: int = 0
    d_model: int = 64
    d_region: int = 32
    d_ocr: int = 32
    n_layers: int = 2
    init_scale: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def uses_ocr(self):
        return self.variant != "baseline"

    @property
    def uses_pointer(self):
        return self.variant == "pointer"


def param_shapes(cfg):
    """Ordered parameter names and shapes for a configuration."""
    d, V = cfg.d_model, cfg.vocab_size
    shapes = {"region_proj.w": (cfg.d_region, d), "region_proj.b": (1, d)}
    if cfg.uses_ocr:
        shapes["ocr_proj.w"] = (cfg.d_ocr, d)
        shapes["ocr_proj.b"] = (1, d)
    for layer in range(cfg.n_layers):
        p = f"enc{layer}."
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "aoa.w"] = (2 * d, 2 * d)
        shapes[p + "aoa.b"] = (1, 2 * d)
        shapes[p + "ln.gamma"] = (1, d)
        shapes[p + "ln.beta"] = (1, d)
    shapes["embed"] = (V, d)
    # GRU input is [word embedding, mean memory, previous attended context]
    shapes["gru.wx"] = (3 * d, 3 * d)
    shapes["gru.bx"] = (1, 3 * d)
    shapes["gru.wh"] = (d, 3 * d)
    shapes["gru.bh"] = (1, 3 * d)
    shapes["dec.wq"] = (d, d)
    shapes["dec.wk"] = (d, d)
    shapes["dec.wv"] = (d, d)
    shapes["dec.aoa.w"] = (2 * d, 2 * d)
    shapes["dec.aoa.b"] = (1, 2 * d)
    shapes["out.w"] = (d, V)
    shapes["out.b"] = (1, V)
    if cfg.uses_pointer:
        shapes["ptr.w_h"] = (d, 1)
        shapes["ptr.w_s"] = (d, 1)
        shapes["ptr.w_x"] = (d, 1)
        shapes["ptr.b"] = (1, 1)
    return shapes


def param_count(cfg):
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg):
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln.gamma"):
            data = np.ones(shape)
        elif name.endswith("ln.beta"):
            data = np.zeros(shape)
        else:
            data = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------ building blocks


def attend(Q, K, V):
    """Scaled dot-product attention. Returns ``(attended, weights)``.

    Scores are ``Q K^T / sqrt(D)`` with D the query dimension; each row of
    weights is a softmax over the key rows.
    """
    if K.shape[0] != V.shape[0]:
        raise ad.ShapeError(f"attend: {K.shape[0]} keys but {V.shape[0]} values")
    if Q.shape[1] != K.shape[1]:
        raise ad.ShapeError(f"attend: query dim {Q.shape[1]} != key dim {K.shape[1]}")
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.shape[1]))
    weights = ad.softmax(scores, axis=1)
    return ad.matmul(weights, V), weights


def aoa_weights(w_iq, w_iv, b_i, w_gq, w_gv, b_g):
    """Pack the six AoA parameters into the fused ``(w, b)`` used by :func:`aoa`.

    Each ``w_*`` maps a row vector of size d to size d (applied as ``x @ w``).
    """
    w = np.block([[w_iq, w_gq], [w_iv, w_gv]])
    b = np.concatenate([np.reshape(b_i, -1), np.reshape(b_g, -1)]).reshape(1, -1)
    return w, b


def aoa(q, v_hat, w, b):
    """Information vector gated by a sigmoid attention gate.

    ``[q, v_hat] @ w + b`` yields ``[i, gate_logits]`` side by side.
    """
    if q.shape != v_hat.shape:
        raise ad.ShapeError(f"aoa: query {q.shape} and attended {v_hat.shape} differ")
    d = q.shape[1]
    if w.shape != (2 * d, 2 * d):
        raise ad.ShapeError(f"aoa: weight {w.shape} does not match model dim {d}")
    z = ad.linear(ad.concat([q, v_hat], axis=1), w, b)
    info = ad.slice_cols(z, 0, d)
    gate = ad.sigmoid(ad.slice_cols(z, d, 2 * d))
    return ad.hadamard(gate, info)


@dataclass
class Memory:
    rows: Tensor
    region_count: int
    ocr_tokens: tuple
    keys: Tensor = None
    values: Tensor = None
    mean: Tensor = None

    @property
    def n_ocr(self):
        return len(self.ocr_tokens)


def encode(bundle, params, cfg):
    """Project regions (and OCR embeddings) to d and refine them jointly."""
    x = ad.linear(Tensor(bundle.regions), params["region_proj.w"], params["region_proj.b"])
    ocr_tokens = ()
    if cfg.uses_ocr and bundle.ocr:
        o = ad.linear(
            Tensor(bundle.ocr_matrix(cfg.d_ocr)), params["ocr_proj.w"], params["ocr_proj.b"]
        )
        x = ad.concat([x, o], axis=0)
        ocr_tokens = tuple(bundle.ocr_tokens)
    for layer in range(cfg.n_layers):
        p = f"enc{layer}."
        v_hat, _ = attend(x @ params[p + "wq"], x @ params[p + "wk"], x @ params[p + "wv"])
        refined = aoa(x, v_hat, params[p + "aoa.w"], params[p + "aoa.b"])
        x = ad.layer_norm(x + refined, params[p + "ln.gamma"], params[p + "ln.beta"])
    return Memory(
        rows=x,
        region_count=bundle.n_regions,
        ocr_tokens=ocr_tokens,
        keys=x @ params["dec.wk"],
        values=x @ params["dec.wv"],
        mean=ad.mean_rows(x),
    )


@dataclass
class DecoderState:
    h: Tensor
    ctx: Tensor


@dataclass
class DecoderStep:
    a_t: Tensor  # (1, R+M) attention over memory rows
    c_t: Tensor  # (1, d) attention context
    h_t: Tensor  # (1, d) hidden state
    x_t: Tensor  # (1, d) input word embedding
    p_vocab: Tensor  # (1, vocab_size)


def initial_state(cfg):
    z = np.zeros((1, cfg.d_model))
    return DecoderState(Tensor(z), Tensor(z.copy()))


def gru_cell(inp, h, params, d):
    gx = ad.linear(inp, params["gru.wx"], params["gru.bx"])
    gh = ad.linear(h, params["gru.wh"], params["gru.bh"])
    z = ad.sigmoid(ad.slice_cols(gx, 0, d) + ad.slice_cols(gh, 0, d))
    r = ad.sigmoid(ad.slice_cols(gx, d, 2 * d) + ad.slice_cols(gh, d, 2 * d))
    n = ad.tanh(ad.slice_cols(gx, 2 * d, 3 * d) + r * ad.slice_cols(gh, 2 * d, 3 * d))
    return n + z * (h - n)


def decode_step(state, prev_token_id, memory, params, cfg):
    if not 0 <= prev_token_id < cfg.vocab_size:
        raise ValueError(
            f"decode_step: token id {prev_token_id} outside embedding range 0..{cfg.vocab_size - 1}"
        )
    d = cfg.d_model
    x_t = ad.gather_rows(params["embed"], [prev_token_id])
    h_t = gru_cell(ad.concat([x_t, memory.mean, state.ctx], axis=1), state.h, params, d)
    c_t, a_t = attend(h_t @ params["dec.wq"], memory.keys, memory.values)
    refined = aoa(h_t, c_t, params["dec.aoa.w"], params["dec.aoa.b"])
    p_vocab = ad.softmax(ad.linear(refined, params["out.w"], params["out.b"]), axis=1)
    return DecoderStep(a_t, c_t, h_t, x_t, p_vocab), DecoderState(h_t, refined)


# ------------------------------------------------------------------ checkpoints

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, cfg, params, vocab_digest, extra=None):
    """Zip container: ``config.json`` plus one ``.npy`` per parameter.

    Timestamps are pinned so identical parameters give identical bytes.
    """
    meta = {"config": asdict(cfg), "vocab_hash": vocab_digest, "params": list(params)}
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "config.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, t in params.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(t.data), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path, expected_vocab_hash=None):
    """Returns ``(config, params, meta)``; refuses a vocabulary mismatch."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("config.json"))
            if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
                raise CheckpointError(
                    f"checkpoint vocabulary hash {meta['vocab_hash'][:12]} does not match "
                    f"supplied vocabulary {expected_vocab_hash[:12]}"
                )
            cfg = ModelConfig(**meta["config"])
            params = {}
            for name in meta["params"]:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")))
                params[name] = Tensor(arr, requires_grad=True, name=name)
    except (KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from exc
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match the stored config")
    return cfg, params, meta
