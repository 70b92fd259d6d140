"""Command-line entry point: train | eval | generate | sweep-lambda | verify.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-data error,
4 numeric failure, 5 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import rngs
from .data import read_lines
from .errors import (CheckpointError, ConfigError, InputError, NumericError,
                     OracleError)
from .evaluation import EVAL_HEADER, distinct_ratio, evaluate, sample_from_prior
from .training import TrainingConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5

# key name in config files -> (TrainingConfig field or path key, parser)
_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_VALUES[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


CONFIG_SCHEMA = {
    "mode": ("mode", str),
    "lambda": ("copula_weight", float),
    "latent_dim": ("latent_dim", int),
    "hidden_dim": ("hidden_dim", int),
    "embed_dim": ("embed_dim", int),
    "vocab_max": ("vocab_max", int),
    "max_len": ("max_len", int),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "dropout": ("dropout", float),
    "anneal_warmup_steps": ("anneal_warmup_steps", int),
    "seed": ("seed", int),
    "deterministic": ("deterministic", _parse_bool),
    "shared_noise": ("shared_noise", _parse_bool),
    "anneal_copula": ("anneal_copula", _parse_bool),
    "scalar_w": ("scalar_w", _parse_bool),
    "train_path": ("train_path", str),
    "valid_path": ("valid_path", str),
    "test_path": ("test_path", str),
    "out_dir": ("out_dir", str),
}
_PATH_KEYS = ("train_path", "valid_path", "test_path", "out_dir")


def parse_config_file(path) -> dict:
    """Flat key=value file with '#' comments; unknown keys are rejected."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        field, caster = CONFIG_SCHEMA[key]
        try:
            values[field] = caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def resolve_run_config(args) -> tuple:
    """Layer defaults <- config file <- CLI flags; returns (config, paths)."""
    values = {}
    if args.config is not None:
        values.update(parse_config_file(args.config))
    for key, (field, _) in CONFIG_SCHEMA.items():
        flag = key.replace("-", "_")
        override = getattr(args, flag, None)
        if override is not None:
            values[field] = override
    paths = {key: values.pop(key, None) for key in _PATH_KEYS}
    cfg = TrainingConfig(**values)
    cfg.validate()
    return cfg, paths


def write_resolved_config(cfg: TrainingConfig, paths: dict, out_dir: Path) -> Path:
    fields = asdict(cfg)
    lines = []
    for key, (field, caster) in CONFIG_SCHEMA.items():
        if key in _PATH_KEYS:
            value = paths.get(key)
            if value is None:
                continue
        else:
            value = fields[field]
        if caster is _parse_bool:
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    resolved = out_dir / "config.resolved"
    resolved.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return resolved


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="key=value config file")
    for key, (_, caster) in CONFIG_SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if caster is _parse_bool:
            parser.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, type=caster, default=None)


def cmd_train(args) -> int:
    cfg, paths = resolve_run_config(args)
    for key in ("train_path", "valid_path", "out_dir"):
        if paths.get(key) is None:
            raise ConfigError(f"missing required config key: {key}")
    out_dir = Path(paths["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, paths, out_dir)
    train_lines = read_lines(paths["train_path"])
    valid_lines = read_lines(paths["valid_path"])
    result = train(cfg, train_lines, valid_lines, out_dir,
                   grad_check=not args.skip_grad_check,
                   resume_from=args.resume_from)
    print(f"finished {cfg.epochs} epochs; metrics: {result.metrics_path}; "
          f"best checkpoint: {result.best_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    cfg = bundle.config
    if args.seed is not None:
        cfg.seed = args.seed
    lines = read_lines(args.corpus)
    report = evaluate(bundle.params, cfg, bundle.vocab, lines,
                      diversity_samples=args.diversity_samples)
    print(EVAL_HEADER)
    print(report.csv_row(epoch=bundle.progress.get("epoch", 0),
                         step=bundle.progress.get("global_step", 0),
                         copula_weight=cfg.copula_weight))
    return EXIT_OK


def cmd_generate(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    sentences = sample_from_prior(bundle.params, bundle.config, bundle.vocab,
                                  args.n, seed=args.seed)
    text = "".join(line + "\n" for line in sentences)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"distinct_ratio={distinct_ratio(sentences):.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    try:
        weights = [float(tok) for tok in args.lambdas.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --lambdas list: {exc}") from exc
    if not weights:
        raise ConfigError("--lambdas must list at least one value")
    cfg, paths = resolve_run_config(args)
    for key in ("train_path", "valid_path", "out_dir"):
        if paths.get(key) is None:
            raise ConfigError(f"missing required config key: {key}")
    sweep_dir = Path(paths["out_dir"])
    sweep_dir.mkdir(parents=True, exist_ok=True)
    train_lines = read_lines(paths["train_path"])
    valid_lines = read_lines(paths["valid_path"])
    rows = []
    failures = []
    for weight in weights:
        run_cfg = TrainingConfig(**{**asdict(cfg), "copula_weight": weight})
        run_dir = sweep_dir / f"lambda_{weight:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(run_cfg, {**paths, "out_dir": str(run_dir)}, run_dir)
        try:
            result = train(run_cfg, train_lines, valid_lines, run_dir,
                           grad_check=not args.skip_grad_check)
        except Exception as exc:  # keep sweeping, report at the end
            failures.append((weight, exc))
            print(f"lambda={weight:g} failed: {exc}", file=sys.stderr)
            continue
        last_valid = [r for r in result.metrics if r.split(",")[2] == "valid"][-1]
        cells = last_valid.split(",")
        rows.append(f"{weight:g},{cells[4]},{cells[3]},{cells[8]}")
    summary = sweep_dir / "summary.csv"
    summary.write_text("lambda,final_val_kl,final_val_rec,final_val_ppl\n"
                       + "".join(row + "\n" for row in rows), encoding="utf-8")
    print(f"sweep summary: {summary}")
    return EXIT_OK if not failures else 1


def _run_verification(seed: int, tol_scale: float, flip_m_sign: bool) -> list:
    """The oracle suite behind `verify`; returns (name, passed, detail) rows."""
    from . import autodiff as ad
    from .copula import log_copula_density
    from .lowrank import DiagRankOneCov, cholesky, dense, inv_quadratic_form, log_det
    from .objective import kl_diag_gaussian_std_normal
    from .oracles import (copula_normalization_2d, dense_reference,
                          mc_covariance, mc_kl_estimate)
    from .model import ModelDims, init_params
    from .training import gradient_gate
    from .synthetic import generate_corpus
    from .data import build_vocab, encode_line

    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 65))
        cov = DiagRankOneCov(w=rng.uniform(0.5, 2.0, d), a=rng.uniform(-1.0, 1.0, d))
        ref = dense_reference(cov)
        q = rng.standard_normal(d)
        worst = max(worst, abs(log_det(cov) - ref.logdet) / max(1.0, abs(ref.logdet)))
        fast = float(inv_quadratic_form(cov, q))
        exact = float(q @ ref.inverse @ q)
        worst = max(worst, abs(fast - exact) / max(1e-12, abs(exact)))
        worst = max(worst, float(np.max(np.abs(cholesky(cov).matrix - ref.cholesky)))
                    / max(1e-12, float(np.max(np.abs(dense(cov))))))
    tol = 1e-9 * tol_scale
    results.append(("dense-agreement", worst <= tol, f"max rel err {worst:.3e} (tol {tol:.1e})"))

    density = log_copula_density
    if flip_m_sign:
        def density(cov, q):  # debug hook: flipped quadratic term must break normalization
            base = log_copula_density(cov, q)
            from .lowrank import diag_of
            quad_diag = np.sum(q * q / diag_of(cov), axis=-1)
            return base - (quad_diag - inv_quadratic_form(cov, q))
    worst = 0.0
    for _ in range(5):
        cov = DiagRankOneCov(w=rng.uniform(0.5, 2.0, 2), a=rng.uniform(-1.0, 1.0, 2))
        integral, _ = copula_normalization_2d(density, cov)
        worst = max(worst, abs(integral - 1.0))
    tol = 1e-3 * tol_scale
    results.append(("copula-normalization", worst <= tol,
                    f"max |integral - 1| {worst:.3e} (tol {tol:.1e})"))

    worst_se = 0.0
    for i in range(5):
        d = int(rng.integers(1, 9))
        mu = rng.uniform(-1.5, 1.5, d)
        logvar = rng.uniform(-1.0, 1.0, d)
        estimate, se = mc_kl_estimate(mu, logvar, n=100_000, seed=seed + 100 + i)
        closed = kl_diag_gaussian_std_normal(mu, logvar)
        worst_se = max(worst_se, abs(estimate - closed) / se)
    results.append(("mc-kl", worst_se <= 4.0 * tol_scale,
                    f"max deviation {worst_se:.2f} standard errors (tol 4)"))

    cov = DiagRankOneCov(w=rng.uniform(0.5, 2.0, 4), a=rng.uniform(-1.0, 1.0, 4))
    emp = mc_covariance(cholesky(cov).matrix, n=100_000, seed=seed + 200)
    ref = dense(cov)
    rel = float(np.max(np.abs(emp - ref) / np.maximum(0.05, np.abs(ref))))
    results.append(("mc-covariance", rel <= 0.05 * tol_scale,
                    f"max rel entry err {rel:.3f} (tol {0.05 * tol_scale:g})"))

    micro_cfg = TrainingConfig(mode="copula", copula_weight=0.4, latent_dim=4,
                               hidden_dim=8, embed_dim=8, vocab_max=20, max_len=16,
                               batch_size=2, epochs=1, dropout=0.0, seed=seed)
    corpus = generate_corpus(8, seed)
    vocab = build_vocab(corpus, micro_cfg.vocab_max)
    encoded = [encode_line(s, vocab, micro_cfg.max_len) for s in corpus]
    params = init_params(ModelDims(vocab.size, 8, 8, 4), rngs.stream(seed, "init"))
    report = gradient_gate(params, micro_cfg, encoded, tol=1e-3 * tol_scale,
                           max_coords_per_tensor=12)
    results.append(("gradient-gate", report.passed,
                    f"max rel err {report.max_rel_error:.3e} (tol {report.tol:.1e})"))
    del ad
    return results


def cmd_verify(args) -> int:
    try:
        results = _run_verification(args.seed, args.tol_scale, args.debug_flip_m_sign)
    except OracleError as exc:
        print(f"verification oracle failed to converge: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    width = max(len(name) for name, _, _ in results)
    all_ok = True
    for name, ok, detail in results:
        all_ok &= ok
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return EXIT_OK if all_ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copulalm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config")
    _add_config_flags(p_train)
    p_train.add_argument("--skip-grad-check", action="store_true",
                         help="skip the pre-training finite-difference gate")
    p_train.add_argument("--resume-from", default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--diversity-samples", type=int, default=50)
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("generate", help="greedy-decode sentences from the prior")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default=None)
    p_gen.set_defaults(func=cmd_generate)

    p_sweep = sub.add_parser("sweep-lambda", help="one full run per copula weight")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--lambdas", required=True,
                         help="comma-separated weights, e.g. 0,0.2,0.4")
    p_sweep.add_argument("--skip-grad-check", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep_lambda)

    p_verify = sub.add_parser("verify", help="run the oracle suite")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--tol-scale", type=float, default=1.0,
                          help="multiply all tolerances (values < 1 are stricter)")
    p_verify.add_argument("--debug-flip-m-sign", action="store_true",
                          help=argparse.SUPPRESS)
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, CheckpointError, OSError) as exc:
        print(f"input/IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
