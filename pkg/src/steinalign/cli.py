"""Command-line entry point.

Every subcommand resolves a dataclass config (JSON file, then flags), writes
``config.resolved.json``, ``result.json`` and ``trace.csv`` into ``--out`` and
returns an exit code: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Feeding the resolved echo back through ``--config`` reproduces ``result.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import typing
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import nnet
from .config import (DiagConfig, EvalConfig, GenConfig, KsdConfig, ParseError, RateConfig, SweepConfig,
                     TrainConfig, TwoSampleConfig)
from .discrepancy import ksd_u_statistic, ksd_v_statistic, regularized_ksd
from .errors import DataError, MissingLabels, NumericError, SteinError
from .inference import convergence_experiment, imbalance_sweep, stein_identity_diagnostic, two_sample_test
from .kernels import KernelSpec
from .numeric import make_rng
from .scores import GaussianModel, fit_gaussian, make_gmm, score_model_from_dict
from .uda import Dataset, UdaModel, evaluate, make_blob_shift, make_two_moons, read_csv, run_uda, split_target, \
    write_csv


class UsageError(SteinError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# flag spellings that differ from the field names
_ALIASES = {"target_budget": ["--target-min"]}


def _field_type(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        return _field_type(next(a for a in typing.get_args(tp) if a is not type(None)))
    if origin is list:
        inner = typing.get_args(tp)[0]
        return lambda s: [inner(v) for v in s.split(",") if v.strip()]
    return tp


def _add_config_flags(parser, cls, exclude=()):
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path, default=Path("out"))
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        flags = ["--" + f.name.replace("_", "-")] + _ALIASES.get(f.name, [])
        parser.add_argument(*flags, dest=f.name, type=_field_type(typing.get_type_hints(cls)[f.name]),
                            default=None)


def _resolve(cls, args, path_fields=()):
    doc = {}
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        doc = cfgmod.parse_json_strict(text, str(args.config))
    names = {f.name for f in dataclasses.fields(cls)}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    for name in path_fields:
        if doc.get(name) is not None:
            doc[name] = str(Path(doc[name]).resolve())
    return cfgmod.from_dict(cls, doc, str(args.config or "<flags>"))


# ---------------------------------------------------------------- output


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _write_json(path: Path, doc):
    path.write_text(cfgmod.dumps(doc), encoding="utf-8")


def _write_trace(path: Path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in columns])


def _finish(out: Path, cfg, result, trace_rows, columns=None):
    out = _prepare_out(out)
    _write_json(out / "config.resolved.json", cfgmod.resolved_dict(cfg))
    _write_json(out / "result.json", result)
    _write_trace(out / "trace.csv", trace_rows, columns)


def _kernel(cfg) -> KernelSpec:
    return KernelSpec(cfg.kernel, cfg.bandwidth)


def _need(value, what):
    if value is None:
        raise UsageError(f"{what} is required (flag or config)")
    return value


def _load_csv(path):
    try:
        return read_csv(path)
    except FileNotFoundError:
        raise DataError(f"no such data file: {path}") from None


# ---------------------------------------------------------------- subcommands


def cmd_ksd(args) -> int:
    cfg = _resolve(KsdConfig, args, ("data", "model"))
    data = _load_csv(_need(cfg.data, "--data"))
    if cfg.domain not in data:
        raise DataError(f"no {cfg.domain} rows in {cfg.data}")
    X = data[cfg.domain].features
    rng = make_rng(cfg.seed, "ksd")
    if cfg.model is not None:
        doc = cfgmod.parse_json_strict(Path(cfg.model).read_text(encoding="utf-8"), cfg.model)
        model = score_model_from_dict(doc.get("score_model", doc))
        m = None
    else:
        if "target" not in data:
            raise DataError("without --model the CSV must hold target rows to fit a Gaussian")
        model = fit_gaussian(data["target"].features)
        m = len(data["target"])
    kernel = _kernel(cfg)
    est = ksd_u_statistic(kernel, model, X, rng=rng, m=m)
    result = {"estimate": est.to_record(kernel, model.to_dict()["variant"], cfg.seed),
              "v_statistic": ksd_v_statistic(kernel, model, X, rng=make_rng(cfg.seed, "ksd"))}
    if cfg.reg_lambda is not None:
        result["regularized"] = regularized_ksd(kernel, model, X, cfg.reg_lambda, rng=make_rng(cfg.seed, "ksd"))
    rows = [{"statistic": "u", "value": est.value, "std_error": est.std_error},
            {"statistic": "v", "value": result["v_statistic"], "std_error": None}]
    if "regularized" in result:
        rows.append({"statistic": "regularized", "value": result["regularized"], "std_error": None})
    _finish(args.out, cfg, result, rows)
    return 0


def _diag_model(cfg: DiagConfig):
    d = cfg.dim
    if cfg.score == "gaussian":
        return GaussianModel.from_moments(np.zeros(d), np.eye(d))
    if cfg.score == "gmm":
        k = cfg.gmm_k
        means = np.zeros((k, d))
        means[:, 0] = 2.0 * (np.arange(k) - (k - 1) / 2.0)
        return make_gmm(np.full(k, 1.0 / k), means, np.full((k, d), 0.5))
    raise UsageError("diag stein-identity supports --score gaussian or gmm")


def cmd_diag(args) -> int:
    cfg = _resolve(DiagConfig, args)
    model = _diag_model(cfg)

    def sampler(n, rng):
        X = model.sample(n, rng)
        X[:, 0] += cfg.shift
        return X

    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    rep = stein_identity_diagnostic(model, _kernel(cfg), sampler, cfg.n, seeds)
    rows = [{"seed": s, "estimate": e, "std_error": se} for s, e, se in zip(seeds, rep.estimates, rep.std_errors)]
    _finish(args.out, cfg, rep.to_record(), rows)
    return 0


def cmd_two_sample(args) -> int:
    cfg = _resolve(TwoSampleConfig, args, ("data",))
    data = _load_csv(_need(cfg.data, "--data"))
    if "source" not in data or "target" not in data:
        raise DataError("two-sample testing needs source and target rows")
    from .inference import fitted_target_model, ksd_null_statistics

    X, Z = data["source"].features, data["target"].features
    kernel = _kernel(cfg)
    # same stream as the test's own fit, so the null belongs to the tested model
    q_hat = fitted_target_model(Z, cfg.score, make_rng(cfg.seed, "two-sample"), cfg.gmm_k)
    null = ksd_null_statistics(q_hat, X.shape[0], Z.shape[0], kernel, cfg.null_draws,
                               make_rng(cfg.seed, "two-sample", "null"), cfg.score, cfg.gmm_k)
    res = two_sample_test(X, Z, cfg.score, kernel, cfg.alpha, cfg.null_draws, make_rng(cfg.seed, "two-sample"),
                          cfg.gmm_k, null=null)
    rows = [{"draw": b, "null_statistic": float(v)} for b, v in enumerate(null)]
    _finish(args.out, cfg, res.to_record(), rows)
    return 0


def cmd_rate(args) -> int:
    cfg = _resolve(RateConfig, args)
    records = []
    fit_n, fit_m = convergence_experiment((cfg.p_mean, cfg.p_var), (cfg.q_mean, cfg.q_var), _kernel(cfg),
                                          cfg.n_grid, cfg.m_grid, cfg.reps, make_rng(cfg.seed, "rate"),
                                          n_phase2=cfg.n_phase2, records=records)
    result = {"phase_n": fit_n.to_record(), "phase_m": fit_m.to_record()}
    _finish(args.out, cfg, result, records, ["phase", "size", "rep", "error"])
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(SweepConfig, args)
    rows = imbalance_sweep(cfg.d, cfg.n, cfg.m_grid, cfg.trials, make_rng(cfg.seed, "sweep"), cfg.alpha,
                           cfg.shift, cfg.null_draws, cfg.permutations, _kernel(cfg))
    trace = []
    for row in rows:
        for t, (p0, p1) in enumerate(zip(row["ksd_pvalues_h0"], row["ksd_pvalues_h1"])):
            trace.append({"m": row["m"], "trial": t, "ksd_p_h0": p0, "ksd_p_h1": p1})
    summary = [{k: v for k, v in row.items() if not k.startswith("ksd_pvalues")} for row in rows]
    _finish(args.out, cfg, {"rows": summary}, trace, ["m", "trial", "ksd_p_h0", "ksd_p_h1"])
    return 0


def cmd_gen(args) -> int:
    cfg = _resolve(GenConfig, args)
    if args.kind is not None:
        cfg = dataclasses.replace(cfg, dataset=args.kind)
    rng = make_rng(cfg.seed, "gen", cfg.dataset)
    n_target = cfg.n_target if cfg.n_target is not None else cfg.n
    if cfg.dataset == "two-moons":
        source = make_two_moons(cfg.n, cfg.noise, 0.0, rng, "source")
        target = make_two_moons(n_target, cfg.noise, cfg.rotation, rng, "target")
    elif cfg.dataset == "blobs":
        source, _ = make_blob_shift(cfg.n, cfg.d, cfg.shift, cfg.cov_scale, cfg.classes, rng)
        _, target = make_blob_shift(n_target, cfg.d, cfg.shift, cfg.cov_scale, cfg.classes, rng)
    else:
        raise UsageError(f"unknown dataset {cfg.dataset!r}; expected two-moons or blobs")
    out = args.out
    if out.suffix == ".csv":
        csv_path, out_dir = out, out.parent
    else:
        out_dir = out
        csv_path = out / "data.csv"
    _prepare_out(out_dir)
    write_csv(csv_path, [source, target])
    digest = hashlib.sha256(csv_path.read_bytes()).hexdigest()
    result = {"csv": csv_path.name, "sha256": digest, "n_source": len(source), "n_target": len(target),
              "dim": source.dim}
    _write_json(out_dir / "config.resolved.json", cfgmod.resolved_dict(cfg))
    _write_json(out_dir / "result.json", result)
    _write_trace(out_dir / "trace.csv", [{"domain": d.domain, "rows": len(d)} for d in (source, target)])
    return 0


def _uda_data(cfg: TrainConfig):
    data = _load_csv(_need(cfg.data, "--data"))
    if "source" not in data:
        raise DataError(f"no source rows in {cfg.data}")
    if "target" not in data:
        raise DataError(f"no target rows in {cfg.data}")
    target_train, rest = split_target(data["target"], cfg.target_percent, cfg.target_budget,
                                      make_rng(cfg.seed, "target-split"))
    if cfg.target_test is not None:
        test = _load_csv(cfg.target_test).get("target")
        if test is None:
            raise DataError(f"no target rows in {cfg.target_test}")
    else:
        test = rest if len(rest) else data["target"]
    if test.labels is None:
        raise MissingLabels("target test rows need labels for evaluation")
    # the trainer never sees target labels
    return data["source"], Dataset(target_train.features, None, "target"), test


def cmd_uda_train(args) -> int:
    cfg = _resolve(TrainConfig, args, ("data", "target_test"))
    source, target_train, target_test = _uda_data(cfg)
    result, model = run_uda(source, target_train, target_test, cfg)
    result["target_train_size"] = len(target_train)
    result["target_test_size"] = len(target_test)
    _finish(args.out, cfg, result, result["epochs"],
            ["epoch", "lambda", "loss_c", "loss_d_raw", "loss_d_scaled", "target_acc", "ksd"])
    _write_json(args.out / "model.json", model.to_dict())
    return 0


def cmd_uda_eval(args) -> int:
    cfg = _resolve(EvalConfig, args, ("model", "data"))
    path = Path(_need(cfg.model, "--model"))
    try:
        doc = cfgmod.parse_json_strict(path.read_text(encoding="utf-8"), str(path))
    except FileNotFoundError:
        raise DataError(f"no such model file: {path}") from None
    model = UdaModel(nnet.Mlp.from_dict(doc["g"]), nnet.Mlp.from_dict(doc["c"]), doc.get("form", "kernelized"),
                     doc.get("score_family", "gaussian"))
    data = _load_csv(_need(cfg.data, "--data"))
    if cfg.domain not in data:
        raise DataError(f"no {cfg.domain} rows in {cfg.data}")
    ds = data[cfg.domain]
    acc, err = evaluate(model, ds)
    pred = model.predict(ds.features)
    rows = [{"row": i, "label": int(y), "prediction": int(p)} for i, (y, p) in enumerate(zip(ds.labels, pred))]
    _finish(args.out, cfg, {"accuracy": acc, "error": err, "n": len(ds), "domain": cfg.domain}, rows)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="steinalign", description="Stein-discrepancy estimators, tests and domain adaptation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ksd", help="KSD of CSV rows against a score model")
    _add_config_flags(s, KsdConfig)
    s.set_defaults(func=cmd_ksd)

    diag = sub.add_parser("diag", help="diagnostics").add_subparsers(dest="what", required=True,
                                                                      parser_class=_Parser)
    s = diag.add_parser("stein-identity", help="KSD of exact samples across seeds")
    _add_config_flags(s, DiagConfig)
    s.set_defaults(func=cmd_diag)

    test = sub.add_parser("test", help="hypothesis tests").add_subparsers(dest="what", required=True,
                                                                         parser_class=_Parser)
    s = test.add_parser("two-sample", help="KSD two-sample test of source rows against fitted target rows")
    _add_config_flags(s, TwoSampleConfig)
    s.set_defaults(func=cmd_two_sample)

    s = sub.add_parser("rate", help="convergence-rate experiment")
    _add_config_flags(s, RateConfig)
    s.set_defaults(func=cmd_rate)

    sweep = sub.add_parser("sweep", help="parameter sweeps").add_subparsers(dest="what", required=True,
                                                                           parser_class=_Parser)
    s = sweep.add_parser("imbalance", help="type-I error and power versus target size")
    _add_config_flags(s, SweepConfig)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gen", help="write a synthetic dataset CSV")
    s.add_argument("kind", nargs="?", choices=["two-moons", "blobs"], default=None)
    _add_config_flags(s, GenConfig, exclude=("dataset",))
    s.set_defaults(func=cmd_gen)

    uda = sub.add_parser("uda", help="domain adaptation").add_subparsers(dest="what", required=True,
                                                                       parser_class=_Parser)
    s = uda.add_parser("train", help="train g and c with a transfer loss")
    _add_config_flags(s, TrainConfig)
    s.set_defaults(func=cmd_uda_train)
    s = uda.add_parser("eval", help="accuracy of a saved model on CSV rows")
    _add_config_flags(s, EvalConfig)
    s.set_defaults(func=cmd_uda_eval)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
