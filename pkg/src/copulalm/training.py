"""Adam training of the copula-regularized bound, with deterministic streams.

Reproducibility model: every random draw (init, shuffling, dropout, both
noise vectors, evaluation, gradient gate) comes from a counter-based stream
keyed by (seed, purpose, epoch, batch), so a (seed, config, corpus) triple
fully determines every logged number. Wall-clock is the one exception and is
logged as 0 when the determinism flag is set.

Checkpoint format: magic ``CVLM``, uint32 format version, uint32 length +
UTF-8 JSON block (config, vocabulary, progress counters, tensor manifest),
then raw float64 little-endian tensor data in manifest order (parameters in
declaration order, batch-norm running stats, Adam first/second moments), and
a trailing uint32 CRC-32 of everything before it.
"""

from __future__ import annotations

import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rngs
from .copula import log_copula_density_graph, log_marginals_sum_graph
from .data import Batch, Vocabulary, batches, build_vocab, encode_line
from .errors import CheckpointError, ConfigError, InputError, NumericError
from .model import (ModelDims, ModelParams, Posterior, decode_nll, encode,
                    infer_posterior, init_params, reparam_z, tensor_shapes)
from .objective import (AnnealSchedule, anneal_weight, compose_loss,
                        kl_diag_graph, kl_fullcov_graph)

MODES = ("mean_field", "copula", "fullcov")
METRICS_HEADER = ("epoch,step,split,rec_nll,kl,log_copula,sum_log_marg,"
                  "elbo_nll,ppl,anneal_w,lambda,grad_norm,wallclock_s")
GRAD_CLIP_NORM = 5.0
CHECKPOINT_MAGIC = b"CVLM"
CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    """All run hyperparameters; field names mirror the config-file keys
    except ``copula_weight``, which the file spells ``lambda``."""

    mode: str = "copula"
    copula_weight: float = 0.4
    latent_dim: int = 32
    hidden_dim: int = 200
    embed_dim: int = 200
    vocab_max: int = 20000
    max_len: int = 200
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    dropout: float = 0.5
    anneal_warmup_steps: int = -1   # -1: ten epochs' worth of steps
    seed: int = 0
    deterministic: bool = True
    shared_noise: bool = False
    anneal_copula: bool = False
    scalar_w: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.copula_weight < 0.0:
            raise ConfigError("lambda must be >= 0")
        for name in ("latent_dim", "hidden_dim", "embed_dim", "batch_size", "epochs", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_max <= 4:
            raise ConfigError("vocab_max must exceed the 4 reserved ids")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, one slot per parameter tensor."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        state = cls()
        for name, var in params.items():
            state.m[name] = np.zeros_like(var.v)
            state.v[name] = np.zeros_like(var.v)
        return state


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    if lr <= 0.0:
        raise ConfigError("lr must be positive")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, var in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        var.v -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# per-batch objective assembly
# ---------------------------------------------------------------------------

@dataclass
class BatchStats:
    """Float sums over one batch, for metric aggregation."""

    rec: float
    kl: float
    log_copula: float
    sum_log_marg: float
    tokens: int
    sentences: int


def effective_copula_weight(cfg: TrainingConfig, anneal_w: float) -> float:
    if cfg.mode != "copula":
        return 0.0
    return cfg.copula_weight * (anneal_w if cfg.anneal_copula else 1.0)


def batch_objective(params: ModelParams, cfg: TrainingConfig, batch: Batch,
                    anneal_w: float, train: bool,
                    eps_z: np.ndarray, eps_q: np.ndarray,
                    drop_rng_enc=None, drop_rng_dec=None):
    """Build the differentiable batch objective and collect logging sums.

    Returns (objective node averaged over the batch, BatchStats).
    """
    ids, lengths = batch.ids, batch.lengths
    n = batch.size
    h = encode(params, ids, lengths, train, cfg.dropout, drop_rng_enc)
    post = infer_posterior(params, h, train)

    if cfg.mode == "fullcov":
        factor = ad.rank_one_chol(post.w, post.a)
        z = ad.add(post.mu, ad.matvec(factor, ad.const(eps_z)))
        kl_vec = kl_fullcov_graph(post.mu, post.w, post.a)
        logc_vec = ad.const(np.zeros(n))
        slm_vec = ad.const(np.zeros(n))
    else:
        z = reparam_z(post.mu, post.logvar, eps_z)
        kl_vec = kl_diag_graph(post.mu, post.logvar)
        factor = ad.rank_one_chol(post.w, post.a)
        q = ad.matvec(factor, ad.const(eps_q))
        logc_vec = log_copula_density_graph(post.w, post.a, q)
        slm_vec = log_marginals_sum_graph(post.mu, post.logvar, z)

    rec_vec = decode_nll(params, z, ids[:, :-1], ids[:, 1:], train,
                         cfg.dropout, drop_rng_dec)
    scale = 1.0 / n
    breakdown = compose_loss(ad.vsum(rec_vec) * scale, ad.vsum(kl_vec) * scale,
                             ad.vsum(logc_vec) * scale, ad.vsum(slm_vec) * scale,
                             effective_copula_weight(cfg, anneal_w), anneal_w)
    stats = BatchStats(rec=float(np.sum(rec_vec.v)), kl=float(np.sum(kl_vec.v)),
                       log_copula=float(np.sum(logc_vec.v)),
                       sum_log_marg=float(np.sum(slm_vec.v)),
                       tokens=int(np.sum(lengths - 1)), sentences=n)
    return breakdown.modified_objective, stats


def _corpus_eval_sums(params: ModelParams, cfg: TrainingConfig, encoded) -> BatchStats:
    """Deterministic eval-mode sums over an encoded corpus.

    Noise is drawn per example up front, so the totals are independent of the
    evaluation batch size.
    """
    n = len(encoded)
    rng = rngs.stream(cfg.seed, "eval")
    eps_z_all = rng.standard_normal((n, cfg.latent_dim))
    eps_q_all = rng.standard_normal((n, cfg.latent_dim))
    totals = BatchStats(0.0, 0.0, 0.0, 0.0, 0, 0)
    start = 0
    for batch in batches(encoded, cfg.batch_size):
        rows = slice(start, start + batch.size)
        start += batch.size
        _, stats = batch_objective(params, cfg, batch, anneal_w=1.0, train=False,
                                   eps_z=eps_z_all[rows], eps_q=eps_q_all[rows])
        totals.rec += stats.rec
        totals.kl += stats.kl
        totals.log_copula += stats.log_copula
        totals.sum_log_marg += stats.sum_log_marg
        totals.tokens += stats.tokens
        totals.sentences += stats.sentences
    return totals


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    config: TrainingConfig
    vocab: Vocabulary
    params: ModelParams
    adam: AdamState
    progress: dict


def _dims_from(cfg: TrainingConfig, vocab_size: int) -> ModelDims:
    return ModelDims(vocab=vocab_size, embed=cfg.embed_dim, hidden=cfg.hidden_dim,
                     latent=cfg.latent_dim, scalar_w=cfg.scalar_w)


def save_checkpoint(path, params: ModelParams, adam: AdamState, cfg: TrainingConfig,
                    vocab: Vocabulary, progress: dict) -> None:
    order = params.names()
    manifest = [[name, list(params[name].v.shape)] for name in order]
    meta = {
        "config": asdict(cfg),
        "vocab": list(vocab.id_to_token),
        "progress": dict(progress, adam_step=adam.step),
        "tensors": manifest,
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    for name in order:
        blob += params[name].v.astype("<f8").tobytes()
    blob += params.bn_mean.astype("<f8").tobytes()
    blob += params.bn_var.astype("<f8").tobytes()
    for name in order:
        blob += adam.m[name].astype("<f8").tobytes()
    for name in order:
        blob += adam.v[name].astype("<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    meta_len = struct.unpack("<I", raw[8:12])[0]
    meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
    cfg = TrainingConfig(**meta["config"])
    vocab = Vocabulary.from_tokens(meta["vocab"])
    dims = _dims_from(cfg, vocab.size)
    expected = tensor_shapes(dims)
    offset = 12 + meta_len

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise CheckpointError(f"{path}: truncated tensor data")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        return arr.copy()

    tensors = {}
    for name, shape in meta["tensors"]:
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, expected {expected[name]}")
        tensors[name] = ad.param(take(shape), name=name)
    params = ModelParams(dims, tensors)
    params.bn_mean = take((dims.latent,))
    params.bn_var = take((dims.latent,))
    adam = AdamState()
    for name, shape in meta["tensors"]:
        adam.m[name] = take(shape)
    for name, shape in meta["tensors"]:
        adam.v[name] = take(shape)
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    adam.step = meta["progress"]["adam_step"]
    return CheckpointBundle(config=cfg, vocab=vocab, params=params, adam=adam,
                            progress=meta["progress"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    config: TrainingConfig
    metrics: list
    best_path: Path
    last_path: Path
    metrics_path: Path
    best_val_objective: float


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _metric_row(epoch, step, split, sums: BatchStats, anneal_w, lam, grad_norm, wallclock):
    n = max(1, sums.sentences)
    tokens = max(1, sums.tokens)
    ppl = math.exp(min(700.0, (sums.rec + sums.kl) / tokens))
    values = [str(epoch), str(step), split, _fmt(sums.rec / n), _fmt(sums.kl / n),
              _fmt(sums.log_copula / n), _fmt(sums.sum_log_marg / n),
              _fmt((sums.rec + sums.kl) / n), _fmt(ppl), _fmt(anneal_w), _fmt(lam),
              _fmt(grad_norm), _fmt(wallclock)]
    return ",".join(values)


def gradient_gate(params: ModelParams, cfg: TrainingConfig, encoded, tol: float = 1e-3,
                  max_coords_per_tensor: int = 3) -> ad.GradientReport:
    """Finite-difference spot check of the full objective on one micro-batch.

    Runs in eval mode (running-stat batch norm, no dropout) with frozen noise
    so the loss is deterministic under perturbation.
    """
    micro = [seq[:16] for seq in encoded[:2]]
    lengths = np.array([len(s) for s in micro], dtype=np.int64)
    width = int(lengths.max())
    ids = np.zeros((len(micro), width), dtype=np.int64)
    for row, seq in enumerate(micro):
        ids[row, :len(seq)] = seq
    batch = Batch(ids=ids, lengths=lengths)
    gate_rng = rngs.stream(cfg.seed, "grad_gate")
    eps_z = gate_rng.standard_normal((batch.size, cfg.latent_dim))
    eps_q = eps_z if cfg.shared_noise else gate_rng.standard_normal((batch.size, cfg.latent_dim))

    def loss_fn():
        objective, _ = batch_objective(params, cfg, batch, anneal_w=1.0, train=False,
                                       eps_z=eps_z, eps_q=eps_q)
        return objective

    return ad.finite_diff_check(loss_fn, dict(params.items()), step=1e-4, tol=tol,
                                max_coords_per_tensor=max_coords_per_tensor,
                                rng=rngs.stream(cfg.seed, "grad_gate", 1))


def train(cfg: TrainingConfig, train_lines, valid_lines, out_dir,
          grad_check: bool = True, log_interval: int = 50,
          resume_from=None) -> TrainResult:
    """Train on raw sentence lines, logging metrics and checkpoints to ``out_dir``.

    The best-validation checkpoint (by the modified objective, annealing fully
    on) is kept alongside the rolling last-epoch checkpoint.
    """
    cfg.validate()
    if not train_lines:
        raise InputError("training corpus is empty")
    if not valid_lines:
        raise InputError("validation corpus is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        if asdict(bundle.config) != asdict(cfg):
            raise ConfigError("resume checkpoint was written with a different config")
        vocab, params, adam = bundle.vocab, bundle.params, bundle.adam
        start_epoch = bundle.progress["epoch"] + 1
        global_step = bundle.progress["global_step"]
        best_val = bundle.progress.get("best_val", math.inf)
    else:
        vocab = build_vocab(train_lines, cfg.vocab_max)
        params = init_params(_dims_from(cfg, vocab.size), rngs.stream(cfg.seed, "init"))
        adam = AdamState.for_params(params)
        start_epoch, global_step, best_val = 0, 0, math.inf
    vocab.save(out_dir / "vocab.txt")

    train_enc = [encode_line(s, vocab, cfg.max_len) for s in train_lines]
    valid_enc = [encode_line(s, vocab, cfg.max_len) for s in valid_lines]
    steps_per_epoch = math.ceil(len(train_enc) / cfg.batch_size)
    warmup = cfg.anneal_warmup_steps if cfg.anneal_warmup_steps >= 0 else 10 * steps_per_epoch
    schedule = AnnealSchedule(warmup_steps=warmup)

    if grad_check and resume_from is None:
        report = gradient_gate(params, cfg, train_enc)
        if not report.passed:
            worst = report.worst
            raise NumericError(
                f"gradient gate failed: max relative error {report.max_rel_error:.3e} "
                f"in tensor {worst.tensor}{worst.index} (tolerance {report.tol})")

    best_path = out_dir / "checkpoint_best.bin"
    last_path = out_dir / "checkpoint_last.bin"
    metrics_path = out_dir / "metrics.csv"
    metrics_rows = []
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"
    t0 = time.monotonic()

    def wallclock() -> float:
        return 0.0 if cfg.deterministic else time.monotonic() - t0

    with open(metrics_path, mode, encoding="utf-8") as metrics_fh:
        if mode == "w":
            metrics_fh.write(METRICS_HEADER + "\n")

        def emit(row: str) -> None:
            metrics_fh.write(row + "\n")
            metrics_fh.flush()
            metrics_rows.append(row)

        window = BatchStats(0.0, 0.0, 0.0, 0.0, 0, 0)
        window_norm = 0.0
        for epoch in range(start_epoch, cfg.epochs):
            shuffle_rng = rngs.stream(cfg.seed, "shuffle", epoch)
            for b_idx, batch in enumerate(batches(train_enc, cfg.batch_size, shuffle_rng)):
                anneal_w = anneal_weight(global_step, schedule)
                eps_z = rngs.stream(cfg.seed, "noise_z", epoch, b_idx).standard_normal(
                    (batch.size, cfg.latent_dim))
                eps_q = eps_z if cfg.shared_noise else rngs.stream(
                    cfg.seed, "noise_q", epoch, b_idx).standard_normal(
                        (batch.size, cfg.latent_dim))
                objective, stats = batch_objective(
                    params, cfg, batch, anneal_w, train=True, eps_z=eps_z, eps_q=eps_q,
                    drop_rng_enc=rngs.stream(cfg.seed, "dropout_enc", epoch, b_idx),
                    drop_rng_dec=rngs.stream(cfg.seed, "dropout_dec", epoch, b_idx))
                if not np.isfinite(objective.v):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} batch {b_idx}; "
                        f"last-good checkpoint: {last_path}")
                ad.backward(objective)
                grads = {}
                sq_norm = 0.0
                for name, var in params.items():
                    g = ad.grad_of(var)
                    if not np.all(np.isfinite(g)):
                        raise NumericError(f"non-finite gradient in {name} at epoch "
                                           f"{epoch} batch {b_idx}")
                    grads[name] = g
                    sq_norm += float(np.sum(g * g))
                grad_norm = math.sqrt(sq_norm)
                if grad_norm > GRAD_CLIP_NORM:
                    scale = GRAD_CLIP_NORM / grad_norm
                    for g in grads.values():
                        g *= scale
                adam_step(params, grads, adam, cfg.lr)
                global_step += 1
                window.rec += stats.rec
                window.kl += stats.kl
                window.log_copula += stats.log_copula
                window.sum_log_marg += stats.sum_log_marg
                window.tokens += stats.tokens
                window.sentences += stats.sentences
                window_norm = max(window_norm, grad_norm)
                if global_step % log_interval == 0:
                    emit(_metric_row(epoch, global_step, "train", window, anneal_w,
                                     cfg.copula_weight, window_norm, wallclock()))
                    window = BatchStats(0.0, 0.0, 0.0, 0.0, 0, 0)
                    window_norm = 0.0

            val = _corpus_eval_sums(params, cfg, valid_enc)
            emit(_metric_row(epoch, global_step, "valid", val, 1.0,
                             cfg.copula_weight, 0.0, wallclock()))
            lam_eff = effective_copula_weight(cfg, 1.0)
            val_objective = (val.rec + val.kl
                             - lam_eff * (val.log_copula + val.sum_log_marg)) / val.sentences
            progress = {"epoch": epoch, "global_step": global_step, "best_val": best_val}
            save_checkpoint(last_path, params, adam, cfg, vocab, progress)
            if val_objective < best_val:
                best_val = val_objective
                progress["best_val"] = best_val
                save_checkpoint(best_path, params, adam, cfg, vocab, progress)

    return TrainResult(params=params, vocab=vocab, config=cfg, metrics=metrics_rows,
                       best_path=best_path, last_path=last_path,
                       metrics_path=metrics_path, best_val_objective=best_val)
