"""Recurrent encoder/decoder language model with covariance inference heads.

A single-layer LSTM encodes each sentence; its final hidden state feeds four
affine heads: the posterior mean (through batch normalization), the log
variance, and the two covariance parameters (diagonal through a floored ReLU,
rank-one direction through tanh). The decoder is another LSTM conditioned on
the latent code twice: the code is affine-projected into the initial hidden
and cell state, and concatenated onto every input embedding.

All forward passes build autodiff graphs; evaluation simply never calls
backward on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import PAD
from .errors import ConfigError, InputError, NumericError
from .lowrank import W_FLOOR


@dataclass(frozen=True)
class ModelDims:
    vocab: int
    embed: int
    hidden: int
    latent: int
    scalar_w: bool = False


class ModelParams:
    """Trainable tensors in a fixed declaration order, plus batch-norm state."""

    def __init__(self, dims: ModelDims, tensors: dict):
        self.dims = dims
        self.tensors = tensors
        self.bn_mean = np.zeros(dims.latent)
        self.bn_var = np.ones(dims.latent)

    def __getitem__(self, name: str) -> ad.Var:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors.keys())


def tensor_shapes(dims: ModelDims) -> dict:
    """Canonical name -> shape map; declaration order fixes the checkpoint layout."""
    v, e, h, d = dims.vocab, dims.embed, dims.hidden, dims.latent
    cov_cols = 1 if dims.scalar_w else d
    return {
        "embedding": (v, e),
        "enc_wx": (e, 4 * h),
        "enc_wh": (h, 4 * h),
        "enc_b": (4 * h,),
        "mu_w": (h, d),
        "mu_b": (d,),
        "bn_gamma": (d,),
        "bn_beta": (d,),
        "logvar_w": (h, d),
        "logvar_b": (d,),
        "covdiag_w": (h, cov_cols),
        "covdiag_b": (cov_cols,),
        "covdir_w": (h, d),
        "covdir_b": (d,),
        "z2h_w": (d, h),
        "z2h_b": (h,),
        "z2c_w": (d, h),
        "z2c_b": (h,),
        "dec_wx": (e + d, 4 * h),
        "dec_wh": (h, 4 * h),
        "dec_b": (4 * h,),
        "out_w": (h, v),
        "out_b": (v,),
    }

_RECURRENT_SCALE = 0.1
_HEAD_TENSORS = ("mu_w", "logvar_w", "covdiag_w", "covdir_w", "z2h_w", "z2c_w")


def init_params(dims: ModelDims, rng: np.random.Generator) -> ModelParams:
    """Uniform(-0.1, 0.1) recurrent/embedding weights, 1/sqrt(fan_in)-scaled
    head weights, zero biases, unit batch-norm gain."""
    tensors = {}
    for name, shape in tensor_shapes(dims).items():
        if name == "bn_gamma":
            value = np.ones(shape)
        elif name.endswith("_b") or name == "bn_beta":
            value = np.zeros(shape)
        elif name in _HEAD_TENSORS:
            scale = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-scale, scale, size=shape)
        else:
            value = rng.uniform(-_RECURRENT_SCALE, _RECURRENT_SCALE, size=shape)
        tensors[name] = ad.param(value, name=name)
    return ModelParams(dims, tensors)


@dataclass
class Posterior:
    """Per-example posterior parameters (autodiff nodes, each (B, d))."""

    mu: ad.Var
    logvar: ad.Var
    w: ad.Var
    a: ad.Var


def dropout(x: ad.Var, rate: float, train: bool, rng: np.random.Generator | None) -> ad.Var:
    """Inverted dropout: scale kept units by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    mask = (rng.random(x.v.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.const(mask))


def apply_batch_norm(x: ad.Var, params: ModelParams, train: bool,
                     momentum: float = 0.1) -> ad.Var:
    """Batch normalization for the mean head; updates running stats in train mode."""
    gamma, beta = params["bn_gamma"], params["bn_beta"]
    if train:
        n = x.v.shape[0]
        if n < 2:
            raise ConfigError("train-mode batch norm requires batch size >= 2")
        out = ad.batch_norm_train(x, gamma, beta)
        batch_mean = x.v.mean(axis=0)
        batch_var = x.v.var(axis=0) * n / max(1, n - 1)
        params.bn_mean = (1.0 - momentum) * params.bn_mean + momentum * batch_mean
        params.bn_var = (1.0 - momentum) * params.bn_var + momentum * batch_var
        return out
    inv_std = 1.0 / np.sqrt(params.bn_var + 1e-5)
    centered = ad.sub(x, ad.const(params.bn_mean))
    return ad.add(ad.mul(ad.mul(centered, ad.const(inv_std)), gamma), beta)


def _lstm_step(x, h, c, wx, wh, b, hidden):
    pre = ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h, wh)), b)
    gate_in = ad.sigmoid(ad.slice_cols(pre, 0, hidden))
    gate_forget = ad.sigmoid(ad.slice_cols(pre, hidden, 2 * hidden))
    cand = ad.tanh(ad.slice_cols(pre, 2 * hidden, 3 * hidden))
    gate_out = ad.sigmoid(ad.slice_cols(pre, 3 * hidden, 4 * hidden))
    c_new = ad.add(ad.mul(gate_forget, c), ad.mul(gate_in, cand))
    h_new = ad.mul(gate_out, ad.tanh(c_new))
    return h_new, c_new


def _validate_ids(ids: np.ndarray, vocab_size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise InputError(f"token id out of range [0, {vocab_size})")


def encode(params: ModelParams, ids: np.ndarray, lengths: np.ndarray,
           train: bool, dropout_rate: float = 0.0,
           drop_rng: np.random.Generator | None = None) -> ad.Var:
    """Final LSTM hidden state per example, carried across padded positions.

    An empty batch of steps (T = 0) returns the zero initial state.
    """
    dims = params.dims
    batch = ids.shape[0]
    _validate_ids(ids, dims.vocab)
    h = ad.const(np.zeros((batch, dims.hidden)))
    c = ad.const(np.zeros((batch, dims.hidden)))
    if ids.shape[1] == 0:
        return h
    drop_mask = None
    if train and dropout_rate > 0.0:
        drop_mask = (drop_rng.random((batch, ids.shape[1], dims.embed)) >= dropout_rate) \
            / (1.0 - dropout_rate)
    for t in range(ids.shape[1]):
        x = ad.embedding(params["embedding"], ids[:, t])
        if drop_mask is not None:
            x = ad.mul(x, ad.const(drop_mask[:, t, :]))
        h_new, c_new = _lstm_step(x, h, c, params["enc_wx"], params["enc_wh"],
                                  params["enc_b"], dims.hidden)
        alive = ad.const((t < lengths).astype(np.float64)[:, None])
        keep = ad.const(1.0) - alive
        h = ad.add(ad.mul(h_new, alive), ad.mul(h, keep))
        c = ad.add(ad.mul(c_new, alive), ad.mul(c, keep))
    return h


def infer_posterior(params: ModelParams, h: ad.Var, train: bool) -> Posterior:
    """Posterior parameters from the encoder state.

    mu goes through batch normalization (train-mode statistics only during
    training); the covariance diagonal is clamped at W_FLOOR after the ReLU
    so the implied covariance stays positive definite.
    """
    dims = params.dims
    mu = apply_batch_norm(ad.add(ad.matmul(h, params["mu_w"]), params["mu_b"]), params, train)
    logvar = ad.add(ad.matmul(h, params["logvar_w"]), params["logvar_b"])
    w = ad.relu_floor(ad.add(ad.matmul(h, params["covdiag_w"]), params["covdiag_b"]), W_FLOOR)
    if dims.scalar_w:
        w = ad.mul(w, ad.const(np.ones((1, dims.latent))))
    a = ad.tanh(ad.add(ad.matmul(h, params["covdir_w"]), params["covdir_b"]))
    for label, node in (("mu", mu), ("logvar", logvar), ("cov_diag", w), ("cov_dir", a)):
        if not np.all(np.isfinite(node.v)):
            raise NumericError(f"non-finite output from posterior head '{label}'")
    return Posterior(mu=mu, logvar=logvar, w=w, a=a)


def reparam_z(mu: ad.Var, logvar: ad.Var, eps: np.ndarray) -> ad.Var:
    """z = mu + exp(logvar / 2) * eps for externally supplied noise."""
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, ad.const(0.5))), ad.const(eps)))


def decode_nll(params: ModelParams, z: ad.Var, input_ids: np.ndarray,
               target_ids: np.ndarray, train: bool, dropout_rate: float = 0.0,
               drop_rng: np.random.Generator | None = None) -> ad.Var:
    """Teacher-forced per-example NLL (B,), summed over non-pad targets."""
    dims = params.dims
    _validate_ids(input_ids, dims.vocab)
    _validate_ids(target_ids, dims.vocab)
    batch, steps = input_ids.shape
    h = ad.add(ad.matmul(z, params["z2h_w"]), params["z2h_b"])
    c = ad.add(ad.matmul(z, params["z2c_w"]), params["z2c_b"])
    drop_mask = None
    if train and dropout_rate > 0.0:
        drop_mask = (drop_rng.random((batch, steps, dims.embed)) >= dropout_rate) \
            / (1.0 - dropout_rate)
    nll = ad.const(np.zeros(batch))
    for t in range(steps):
        x = ad.embedding(params["embedding"], input_ids[:, t])
        if drop_mask is not None:
            x = ad.mul(x, ad.const(drop_mask[:, t, :]))
        x = ad.concat_cols(x, z)
        h, c = _lstm_step(x, h, c, params["dec_wx"], params["dec_wh"],
                          params["dec_b"], dims.hidden)
        logits = ad.add(ad.matmul(h, params["out_w"]), params["out_b"])
        mask = (target_ids[:, t] != PAD).astype(np.float64)
        nll = ad.add(nll, ad.mul(ad.softmax_xent(logits, target_ids[:, t]), ad.const(mask)))
    return nll


def greedy_decode(params: ModelParams, z: np.ndarray, max_len: int, bos: int, eos: int) -> list:
    """Argmax roll-out from latent codes; returns lists of token ids (eos excluded)."""
    dims = params.dims
    z = np.asarray(z, dtype=np.float64)
    zv = ad.const(z)
    h = ad.add(ad.matmul(zv, params["z2h_w"]), params["z2h_b"])
    c = ad.add(ad.matmul(zv, params["z2c_w"]), params["z2c_b"])
    batch = z.shape[0]
    current = np.full(batch, bos, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    outputs = [[] for _ in range(batch)]
    for _ in range(max_len):
        x = ad.concat_cols(ad.embedding(params["embedding"], current), zv)
        h, c = _lstm_step(x, h, c, params["dec_wx"], params["dec_wh"],
                          params["dec_b"], dims.hidden)
        logits = (ad.add(ad.matmul(h, params["out_w"]), params["out_b"])).v
        current = logits.argmax(axis=1).astype(np.int64)
        for i in range(batch):
            if not done[i]:
                if current[i] == eos:
                    done[i] = True
                else:
                    outputs[i].append(int(current[i]))
        if done.all():
            break
    return outputs
