"""Command-line front end.

Subcommands: train, quantize, taylor-study, pqi, requant, eval.  Every
command resolves one ExperimentConfig (file, then --set overrides, then
convenience flags), derives all randomness from the single seed, and stamps
the config hash into each report so outputs are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff
from .config import (ExperimentConfig, apply_overrides, config_hash,
                     derive_seed, load_config)
from .errors import FormatError, NumericalError, ToolkitError
from .models import CalibSet, ComputationSpec, generate_calib, train
from .pipeline import run_pipeline
from .pqi import COVERAGE_PERCENTS, aggregate, coverage_curve, pqi_integral
from .quantizers import (QuantConfig, bits_breakdown, quantize_model,
                         reconstruct, sparse_matvec)
from .reports import write_report
from .sensitivity import layer_study, lambda_study, make_metric
from .storage import (load_artifact, load_calib, load_checkpoint,
                      save_artifact, save_calib, save_checkpoint)

_FLAG_KEYS = {
    "seed": "seed",
    "bits": "bits",
    "group_size": "group_size",
    "mode": "mode",
    "ro": "r_o",
    "rs": "r_s",
    "alpha": "alpha",
    "beta": "beta",
    "intervals": "intervals",
}

QUADRATURE_INTERVALS = (4, 8, 16, 32)


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set)
    pairs = []
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            pairs.append(f"{key}={value}")
    return apply_overrides(cfg, pairs)


def _spec_of(cfg: ExperimentConfig) -> ComputationSpec:
    return ComputationSpec(cfg.d_in, tuple(cfg.hidden), cfg.classes,
                           cfg.nonlin, cfg.loss)


def _qcfg_of(cfg: ExperimentConfig) -> QuantConfig:
    return QuantConfig(bits=cfg.bits, mode=cfg.mode, group_size=cfg.group_size,
                       int_range=cfg.int_range, preprocess=cfg.preprocess,
                       act_exponent=cfg.act_exponent, kmeans_iters=cfg.kmeans_iters)


def _path(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _load_trained(args):
    spec, w = load_checkpoint(args.model)
    data = load_calib(args.calib)
    if data.d_in != spec.d_in:
        raise FormatError(f"calibration dims {data.d_in} != model input {spec.d_in}")
    return spec, w, data


def _maybe_heldout(args):
    path = getattr(args, "heldout", None)
    if path and os.path.exists(path):
        return load_calib(path)
    return None


def _metric_inputs(cfg, spec, w, data):
    v = make_metric(cfg.metric, spec, w, data).values
    act = (autodiff.activation_stats(spec, w, data)
           if cfg.preprocess == "activation" else None)
    return v, act


def _plain_quantize(cfg, spec, w, data):
    """The r_o = r_s = 0 quantization; the pipeline's first stage matches it."""
    v, act = _metric_inputs(cfg, spec, w, data)
    qm = quantize_model(w, _qcfg_of(cfg), v=v,
                        kmeans_seed=derive_seed(cfg.seed, "kmeans"), act_stats=act)
    qm.meta.update({"seed": cfg.seed, "kmeans_seed": derive_seed(cfg.seed, "kmeans")})
    return qm


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def build_rig(cfg: ExperimentConfig):
    """Train the configured model on fresh data.

    Returns (spec, weights, train info, train set, calibration set, held-out
    set).  All three sets share one cluster geometry but draw disjoint
    samples; every random stream hangs off the master seed by label.
    """
    spec = _spec_of(cfg)
    dist = derive_seed(cfg.seed, "data-dist")

    def draw(label, n):
        return generate_calib(derive_seed(cfg.seed, label), n, cfg.d_in,
                              cfg.classes, cfg.data_kind, cfg.separation,
                              dist_seed=dist)

    train_set = draw("train-data", cfg.train_n)
    calib = draw("calib-data", cfg.calib_n)
    heldout = draw("heldout-data", cfg.heldout_n)
    w, info = train(derive_seed(cfg.seed, "init"), spec, train_set,
                    cfg.train_steps, cfg.lr, cfg.batch_size or None)
    return spec, w, info, train_set, calib, heldout


def cmd_train(cfg: ExperimentConfig, args) -> int:
    spec, w, info, _, calib, heldout = build_rig(cfg)
    save_checkpoint(_path(args, "model.rqmd"), spec, w)
    save_calib(_path(args, "calib.rqcl"), calib)
    save_calib(_path(args, "heldout.rqcl"), heldout)
    rows = [
        ("steps", info.steps),
        ("loss_before", info.loss_before),
        ("loss_after", info.loss_after),
        ("grad_inf_norm", info.grad_inf_norm),
        ("train_error_rate", info.error_rate),
        ("calib_loss", autodiff.forward_loss(spec, w, calib)),
        ("heldout_loss", autodiff.forward_loss(spec, w, heldout)),
        ("d", w.d),
    ]
    write_report(_path(args, "train.tsv"), ("quantity", "value"), rows,
                 config_hash(cfg))
    print(f"trained {len(w.layout)} layers, d={w.d}, "
          f"loss {info.loss_before:.4g} -> {info.loss_after:.4g}")
    print(f"wrote {_path(args, 'model.rqmd')}")
    return 0


def cmd_quantize(cfg: ExperimentConfig, args) -> int:
    spec, w, data = _load_trained(args)
    qm = _plain_quantize(cfg, spec, w, data)
    save_artifact(_path(args, "quantized.rqqt"), qm)
    w_tilde = reconstruct(qm)
    bb = bits_breakdown(qm)
    loss_fp = autodiff.forward_loss(spec, w, data)
    loss_q = autodiff.forward_loss(spec, w_tilde, data)
    rows = [
        ("calib_loss_fp", loss_fp),
        ("calib_loss_quantized", loss_q),
        ("delta_f", loss_q - loss_fp),
        ("error_rate_fp", float(np.mean(autodiff.predict(spec, w, data) != data.y))),
        ("error_rate_quantized",
         float(np.mean(autodiff.predict(spec, w_tilde, data) != data.y))),
        ("bits_per_weight", bb.per_weight),
        ("dense_bits_per_weight", bb.dense_per_weight),
        ("overlay_bits_per_weight", bb.overlay_per_weight),
    ]
    write_report(_path(args, "quantize.tsv"), ("quantity", "value"), rows,
                 config_hash(cfg))
    print(f"quantized at {cfg.bits} bits ({cfg.mode}): "
          f"loss {loss_fp:.4g} -> {loss_q:.4g}, {bb.per_weight:.3f} bits/weight")
    return 0


def _taylor_rows(rows, with_heldout):
    out = []
    for r in rows:
        row = [r.label, r.first, r.second, r.actual]
        if with_heldout:
            row.append(r.actual_heldout)
        row.append(r.underestimation)
        out.append(row)
    return out


def cmd_taylor_study(cfg: ExperimentConfig, args) -> int:
    spec, w, data = _load_trained(args)
    heldout = _maybe_heldout(args)
    v, act = _metric_inputs(cfg, spec, w, data)
    qcfg = _qcfg_of(cfg)
    kseed = derive_seed(cfg.seed, "kmeans")

    layer_rows = layer_study(spec, w, data, qcfg, v=v, kmeans_seed=kseed,
                             act_stats=act, heldout=heldout,
                             fisher_sign=cfg.fisher_sign)
    cols = ["scope", "first_order", "second_order", "actual_delta_f"]
    if heldout is not None:
        cols.append("actual_delta_f_heldout")
    cols.append("underestimation")
    write_report(_path(args, "taylor_layers.tsv"), cols,
                 _taylor_rows(layer_rows, heldout is not None), config_hash(cfg))

    qm = quantize_model(w, qcfg, v=v, kmeans_seed=kseed, act_stats=act)
    lam_rows = lambda_study(spec, w, reconstruct(qm), data, cfg.lambdas,
                            heldout=heldout, fisher_sign=cfg.fisher_sign)
    cols = ["lambda", "first_order", "second_order", "actual_delta_f"]
    if heldout is not None:
        cols.append("actual_delta_f_heldout")
    cols += ["underestimation", "actual_over_first"]
    rows = []
    for base, r in zip(_taylor_rows(lam_rows, heldout is not None), lam_rows):
        ratio = r.actual / r.first if r.first != 0 else float("inf")
        rows.append(base + [ratio])
    write_report(_path(args, "taylor_lambda.tsv"), cols, rows, config_hash(cfg))

    total = layer_rows[-1]
    per_layer = sum(r.actual for r in layer_rows[:-1])
    print(f"all-layers actual delta_f {total.actual:.6g}; "
          f"per-layer sum {per_layer:.6g}; "
          f"underestimation x{total.underestimation:.3g}")
    return 0


def cmd_pqi(cfg: ExperimentConfig, args) -> int:
    spec, w, data = _load_trained(args)
    if args.quantized:
        qm = load_artifact(args.quantized)
        if qm.layout() != w.layout:
            raise FormatError("artifact layout does not match the checkpoint")
    else:
        qm = _plain_quantize(cfg, spec, w, data)
    w_tilde = reconstruct(qm)

    loss_w = autodiff.forward_loss(spec, w, data)
    exact = autodiff.forward_loss(spec, w_tilde, data) - loss_w
    ns = sorted(set(QUADRATURE_INTERVALS) | {cfg.intervals})
    rows = []
    result = None
    for n in ns:
        res = pqi_integral(spec, w, w_tilde, data, n, cfg.rule)
        rel = (abs(res.signed_delta_f - exact) / abs(exact)) if exact != 0 else 0.0
        rows.append((n, res.signed_delta_f, exact, rel, res.delta_f_pqi,
                     res.delta_f_pqi - abs(res.signed_delta_f)))
        if n == cfg.intervals:
            result = res
    write_report(_path(args, "pqi_quadrature.tsv"),
                 ("intervals", "signed_quadrature", "exact_delta_f",
                  "rel_error", "delta_f_pqi", "bound_slack"),
                 rows, config_hash(cfg))

    agg_rows = []
    for gran in ("layer", "sublayer"):
        for label, count, total, mean in aggregate(result, gran):
            agg_rows.append((gran, label, count, total, mean))
    write_report(_path(args, "pqi_layers.tsv"),
                 ("granularity", "scope", "count", "total", "mean"),
                 agg_rows, config_hash(cfg))

    cov = coverage_curve(result, COVERAGE_PERCENTS)
    write_report(_path(args, "pqi_coverage.tsv"),
                 ("percent", "coordinates", "share_of_delta_f_pqi"),
                 [(p, int(np.rint(p * w.d / 100.0)), frac) for p, frac in cov],
                 config_hash(cfg))

    print(f"signed quadrature {result.signed_delta_f:.6g} vs exact {exact:.6g} "
          f"(N={cfg.intervals}); bound {result.delta_f_pqi:.6g}")
    return 0


def cmd_requant(cfg: ExperimentConfig, args) -> int:
    spec, w, data = _load_trained(args)
    heldout = _maybe_heldout(args)
    result = run_pipeline(spec, w, data, _qcfg_of(cfg), r_o=cfg.r_o, r_s=cfg.r_s,
                          alpha=cfg.alpha, beta=cfg.beta, intervals=cfg.intervals,
                          seed=cfg.seed, heldout=heldout, metric=cfg.metric,
                          selection=cfg.selection, include_bias=cfg.include_bias)
    save_artifact(_path(args, "requant.rqqt"), result.qm)

    write_report(_path(args, "requant_steps.tsv"),
                 ("step", "description", "calib_loss", "heldout_loss",
                  "bits_per_weight"),
                 [(s.step, s.description, s.calib_loss, s.heldout_loss,
                   s.bits_per_weight) for s in result.steps],
                 config_hash(cfg))
    write_report(_path(args, "requant_grid.tsv"),
                 ("t", "calib_loss", "chosen"),
                 [(t, loss, t == result.plan.t) for t, loss in result.plan.grid],
                 config_hash(cfg), meta={"budget": result.plan.budget,
                                         "shortfall": result.plan.shortfall})
    write_report(_path(args, "requant_detach.tsv"),
                 ("pass", "entries", "dfpqi_before", "dfpqi_after", "calib_loss"),
                 [(d.index, len(d.coords), d.dfpqi_before, d.dfpqi_after,
                   d.loss_after) for d in result.detach],
                 config_hash(cfg))

    if args.ablation:
        arms = [("pqi", 0.0, 0.0), ("pqi", cfg.r_o, 0.0),
                ("pqi", cfg.r_o, cfg.r_s), ("random", cfg.r_o, cfg.r_s)]
        rows = []
        for selection, r_o, r_s in arms:
            if selection == cfg.selection and r_o == cfg.r_o and r_s == cfg.r_s:
                res = result
            else:
                res = run_pipeline(spec, w, data, _qcfg_of(cfg), r_o=r_o, r_s=r_s,
                                   alpha=cfg.alpha, beta=cfg.beta,
                                   intervals=cfg.intervals, seed=cfg.seed,
                                   heldout=heldout, metric=cfg.metric,
                                   selection=selection,
                                   include_bias=cfg.include_bias)
            last = res.steps[-1]
            rows.append((selection, r_o, r_s, last.calib_loss,
                         last.heldout_loss, last.bits_per_weight))
        write_report(_path(args, "requant_ablation.tsv"),
                     ("selection", "r_o", "r_s", "calib_loss", "heldout_loss",
                      "bits_per_weight"),
                     rows, config_hash(cfg))

    last = result.steps[-1]
    print(f"pipeline done: t={result.plan.t:g}, "
          f"{len(result.qm.outliers)} outliers, "
          f"{len(result.qm.significant)} significant, "
          f"loss {result.steps[0].calib_loss:.6g} -> {last.calib_loss:.6g}, "
          f"{last.bits_per_weight:.3f} bits/weight")
    print(f"wrote {_path(args, 'requant.rqqt')}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    spec, w, data = _load_trained(args)
    rows = [("calib_loss_fp", autodiff.forward_loss(spec, w, data)),
            ("error_rate_fp", float(np.mean(autodiff.predict(spec, w, data) != data.y)))]
    failed = False
    if args.quantized:
        qm = load_artifact(args.quantized)
        if qm.layout() != w.layout:
            raise FormatError("artifact layout does not match the checkpoint")
        w_tilde = reconstruct(qm)
        bb = bits_breakdown(qm)
        rows += [
            ("calib_loss_quantized", autodiff.forward_loss(spec, w_tilde, data)),
            ("error_rate_quantized",
             float(np.mean(autodiff.predict(spec, w_tilde, data) != data.y))),
            ("bits_per_weight", bb.per_weight),
            ("overlay_entries", bb.overlay_entries),
        ]
        # matvec equivalence: packed-code kernel vs dense reconstruction
        rng = np.random.default_rng([derive_seed(cfg.seed, "eval-x")])
        mats = w_tilde.matrices()
        worst = 0.0
        for li, seg in enumerate(w.layout):
            x = rng.standard_normal(seg.cols)
            dense = mats[li][0] @ x
            kernel = sparse_matvec(qm, li, x)
            scale = max(float(np.abs(dense).max()), 1e-30)
            worst = max(worst, float(np.abs(kernel - dense).max()) / scale)
        rows.append(("matvec_max_rel_error", worst))
        ok = worst <= 1e-6
        rows.append(("matvec_check", "pass" if ok else "fail"))
        failed = not ok
    write_report(_path(args, "eval.tsv"), ("quantity", "value"), rows,
                 config_hash(cfg))
    for name, value in rows:
        print(f"{name}\t{value}")
    if failed:
        raise NumericalError("sparse matvec does not match the dense reconstruction")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out-dir", default=".", help="where outputs go")
    common.add_argument("--seed", type=int)
    common.add_argument("--bits", type=int)
    common.add_argument("--group-size", type=int, dest="group_size")
    common.add_argument("--mode", choices=("uniform", "kmeans"))
    common.add_argument("--ro", type=float, help="outlier budget, percent")
    common.add_argument("--rs", type=float, help="significant budget, percent")
    common.add_argument("--alpha", type=float, help="temperature grid step")
    common.add_argument("--beta", type=float, help="per-pass detach budget, percent")
    common.add_argument("--intervals", type=int, help="path quadrature intervals")

    p = argparse.ArgumentParser(
        prog="requant",
        description="Path-integral sensitivity and dense-and-sparse quantization "
                    "experiments on small trained models.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, inputs=()):
        sp = sub.add_parser(name, parents=[common], help=help_)
        if "model" in inputs:
            sp.add_argument("--model", default=None, help="checkpoint (.rqmd)")
        if "calib" in inputs:
            sp.add_argument("--calib", default=None, help="calibration set (.rqcl)")
        if "heldout" in inputs:
            sp.add_argument("--heldout", default=None, help="held-out set (.rqcl)")
        if "quantized" in inputs:
            sp.add_argument("--quantized", default=None, help="artifact (.rqqt)")
        sp.set_defaults(fn=fn, inputs=inputs)
        return sp

    add("train", cmd_train, "train a toy model and write calibration sets")
    add("quantize", cmd_quantize, "quantize a checkpoint, no overlays",
        ("model", "calib"))
    add("taylor-study", cmd_taylor_study,
        "per-layer and lambda-interpolation expansion tables",
        ("model", "calib", "heldout"))
    add("pqi", cmd_pqi, "path-integral quadrature, aggregation, coverage tables",
        ("model", "calib", "quantized"))
    rq = add("requant", cmd_requant, "full dense-and-sparse pipeline",
             ("model", "calib", "heldout"))
    rq.add_argument("--ablation", action="store_true",
                    help="also emit the selection/budget ablation grid")
    add("eval", cmd_eval, "loss, bits per weight, kernel equivalence check",
        ("model", "calib", "quantized"))
    return p


_INPUT_DEFAULTS = {"model": "model.rqmd", "calib": "calib.rqcl",
                   "heldout": "heldout.rqcl"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.makedirs(args.out_dir, exist_ok=True)
    for name in args.inputs if hasattr(args, "inputs") else ():
        if name in _INPUT_DEFAULTS and getattr(args, name) is None:
            setattr(args, name, _path(args, _INPUT_DEFAULTS[name]))
    cfg = _resolve_config(args)
    return args.fn(cfg, args)


def entrypoint() -> None:
    try:
        sys.exit(main())
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(exc.exit_code)
