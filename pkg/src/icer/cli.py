"""Command line entry point: ``icer <subcommand> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
Output paths default to ``$ICER_OUT_DIR`` (or the working directory).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import scenario as scn_mod
from . import verification
from .decoder import ResidualDecoder, als_fit, make_paired_assets
from .design import IcerConfig, design_weights, run_icer, topk_keyframes
from .errors import IcerError, InvalidConfig
from .forward import jsonable, make_model
from .information import build_cache, default_prior
from .inversion import LossConfig, frame_losses
from .scenario import RunResult, atomic_write_text, dumps

OUT_DIR_ENV = "ICER_OUT_DIR"
DECODER_SCHEMA = "icer.decoder/1"
VERIFY_SCHEMA = "icer.verify/1"
ABLATIONS = ("A1", "A2", "A3")
ROUND_COLUMNS = ("round", "icer_objective", "logdet")
FIT_COLUMNS = ("round", "iteration", "objective", "grad_norm", "eta")


class UsageError(Exception):
    pass


def _out_path(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / default_name


def _read_json(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _build(cls, d: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise InvalidConfig(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


def icer_config_from_dict(d: dict) -> tuple[IcerConfig, str | None]:
    """Parse ``{"icer": {...}, "loss": {...}, "ablation": "A1"}`` into a config.

    Ablations only touch config fields: A1 sets ``lambda_cond = 0`` and
    freezes uniform weights, A3 sets ``lambda_id = 0``.  A2 swaps the decoder
    and is applied to the model, not the config.
    """
    d = dict(d)
    ablation = d.pop("ablation", None)
    loss_d = dict(d.pop("loss", {}) or {})
    icer_d = dict(d.pop("icer", {}) or {})
    d.pop("scenario", None)
    if d:
        raise InvalidConfig(f"unknown config sections: {sorted(d)}")
    if ablation is not None and ablation not in ABLATIONS:
        raise InvalidConfig(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    if ablation == "A1":
        icer_d.update(lambda_cond=0.0, lock_weights=True)
    elif ablation == "A3":
        loss_d["lambda_id"] = 0.0
    try:
        loss = _build(LossConfig, loss_d, "loss")
        cfg = _build(IcerConfig, {**icer_d, "loss": loss}, "icer")
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc
    return cfg, ablation


def identity_decoder_model(model):
    """Same renderer, but the code is the full texel residual (ablation A2)."""
    if model.kind != "decoder_composed":
        raise InvalidConfig("ablation A2 needs a decoder_composed scenario")
    params = {k: v for k, v in model.params.items() if k != "basis"}
    params["basis"] = ResidualDecoder.identity(model.n_texels).basis
    return make_model(model.kind, (model.n_texels, model.obs_dim), model.seed, params)


def _config_echo(cfg: IcerConfig) -> dict:
    return jsonable(dataclasses.asdict(cfg))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([[repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row] for row in rows])
    return buf.getvalue()


def round_trace_csv(traces: Sequence[dict], frame_ids: Sequence[int]) -> str:
    """Columns: round, icer_objective, logdet, then one ``w_<id>`` per candidate."""
    header = list(ROUND_COLUMNS) + [f"w_{i}" for i in frame_ids]
    rows = [[t["round"], t["icer_objective"], t["logdet"], *t["weights"]] for t in traces]
    return _csv_text(header, rows)


def fit_trace_csv(fit_traces: Sequence[Sequence[dict]]) -> str:
    """Columns: round, iteration, objective, grad_norm, eta (final refit is the last round)."""
    rows = [[rnd, row["iteration"], row["objective"], row["grad_norm"], row["eta"]]
            for rnd, trace in enumerate(fit_traces, start=1) for row in trace]
    return _csv_text(FIT_COLUMNS, rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _read_json(args.config)
    cfg = dict(cfg.get("scenario", cfg))
    if args.seed is not None:
        cfg["seed"] = args.seed
    dec = cfg.pop("decoder_file", None)
    if dec is not None:
        cfg["decoder"] = _load_decoder(dec)
    scn = scn_mod.generate_scenario(cfg)
    out = _out_path(args.out, "scenario.json")
    scn_mod.save_scenario(scn, out)
    print(f"wrote {out}: {len(scn.candidates)} candidates, {len(scn.held_out)} held out, "
          f"corrupted {sorted(scn.corruptions)}")
    return 0


def cmd_invert(args) -> int:
    scn = scn_mod.load_scenario(args.scenario)
    raw = _read_json(args.config)
    if args.ablation:
        raw["ablation"] = args.ablation
    cfg, ablation = icer_config_from_dict(raw)
    model = identity_decoder_model(scn.model) if ablation == "A2" else scn.model
    seed = args.seed if args.seed is not None else int(scn.config.get("seed", 0))
    res = run_icer(model, scn.frames, cfg, seed=seed)
    echo = {"icer": _config_echo(dataclasses.replace(cfg, lambda_cond=res.lambda_cond, eta_w=res.eta_w,
                                                     budget=res.budget)),
            "ablation": ablation, "seed": seed, "scenario": scn.config}
    result = RunResult(echo, res.v_final, res.weights_final, res.frame_ids, res.keyframes,
                       traces=res.traces, model=model.spec() if ablation == "A2" else None)
    result.metrics = scn_mod.evaluate(result, scn)
    out = _out_path(args.out, "result.json")
    scn_mod.save_result(result, out)
    stem = out.with_suffix("")
    atomic_write_text(f"{stem}_rounds.csv", round_trace_csv(res.traces, res.frame_ids))
    atomic_write_text(f"{stem}_fit.csv", fit_trace_csv(res.fit_traces))
    ce = result.metrics["code_error"]
    print(f"wrote {out}: keyframes {res.keyframes}"
          + (f", code error {ce:.3e}" if ce is not None else ""))
    return 0


def cmd_design(args) -> int:
    scn = scn_mod.load_scenario(args.scenario)
    cfg, ablation = icer_config_from_dict(_read_json(args.config))
    if ablation == "A2":
        raise InvalidConfig("ablation A2 applies to invert only")
    cands = scn.candidates
    v = np.zeros(scn.model.code_dim)
    if args.result:
        v = scn_mod.load_result(args.result).v_final
    prior = default_prior(scn.model.code_dim, cfg.lambda0)
    cache = build_cache(scn.model, cands, prior, method=cfg.build_method, lambda_id=cfg.loss.lambda_id)
    ells = frame_losses(scn.model, cands, v, cfg.loss)
    if cfg.lock_weights:
        state, rows = design_weights(cache, ells, cfg, v=v, steps=0)
    else:
        state, rows = design_weights(cache, ells, cfg, v=v)
    w = state.weights
    ids = cache.order
    k = cfg.n_keyframes if cfg.n_keyframes is not None else int(min(len(ids), max(1, round(state.budget))))
    result = RunResult({"icer": _config_echo(cfg), "ablation": ablation, "scenario": scn.config,
                        "frozen_losses": ells.tolist()},
                       v, w, ids, topk_keyframes(w, k, ids), traces=rows)
    out = _out_path(args.out, "design.json")
    scn_mod.save_result(result, out)
    print(f"wrote {out}: weights {np.round(w, 4).tolist()}, keyframes {result.keyframes}")
    return 0


def _load_decoder(path) -> ResidualDecoder:
    d = _read_json(path)
    if d.get("schema") != DECODER_SCHEMA:
        raise InvalidConfig(f"{path}: expected schema {DECODER_SCHEMA!r}")
    return ResidualDecoder.from_dict(d["decoder"])


PRETRAIN_DEFAULTS = {"n_pairs": 40, "feature_dim": 30, "r": 4, "part_frac": 0.4, "noise": 0.0,
                     "lambda_v": 0.0, "lambda_id": 1.0, "iters": 200}


def cmd_pretrain(args) -> int:
    raw = _read_json(args.config)
    unknown = set(raw) - set(PRETRAIN_DEFAULTS)
    if unknown:
        raise InvalidConfig(f"unknown pretrain keys: {sorted(unknown)}")
    p = {**PRETRAIN_DEFAULTS, **raw}
    seed = args.seed if args.seed is not None else 0
    assets, _, _ = make_paired_assets(int(p["n_pairs"]), int(p["feature_dim"]), int(p["r"]), seed,
                                      float(p["part_frac"]), float(p["noise"]))
    fit = als_fit(assets, int(p["r"]), float(p["lambda_v"]), int(p["iters"]), float(p["lambda_id"]))
    err = fit.reconstruction_error(assets, float(p["lambda_id"]))
    doc = {"schema": DECODER_SCHEMA, "config": {**p, "seed": seed}, "decoder": fit.decoder.to_dict(),
           "loss_trace": fit.loss_trace, "reconstruction_error": err}
    out = _out_path(args.out, "decoder.json")
    atomic_write_text(out, dumps(doc))
    print(f"wrote {out}: rank {fit.decoder.code_dim}, reconstruction error {err:.3e}")
    return 0


def cmd_verify(args) -> int:
    names = list(verification.SUITES) if args.suite == "all" else [args.suite]
    report = verification.run_suites(names, args.n, args.seed if args.seed is not None else 0)
    report = {"schema": VERIFY_SCHEMA, "seed": args.seed, "n": args.n, **report}
    for s in report["suites"]:
        print(f"{'PASS' if s['passed'] else 'FAIL'} {s['name']}: {s['passes']} passed, {s['failures']} failed")
    out = _out_path(args.out, "verify.json")
    atomic_write_text(out, dumps(jsonable(report)))
    return 0 if report["passed"] else 1


def cmd_evaluate(args) -> int:
    scn = scn_mod.load_scenario(args.scenario)
    res = scn_mod.load_result(args.result)
    metrics = scn_mod.evaluate(res, scn)
    out = _out_path(args.out, "metrics.json")
    atomic_write_text(out, dumps(metrics))
    for name in ("supervised", "held_out", "all"):
        row = metrics[name]
        print(f"{name:>10}: fidelity {row['fidelity']}, leakage {row['leakage']}, drift {row['drift']}")
    print(f"code error: {metrics['code_error']}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=None, help=f"output path (default under ${OUT_DIR_ENV})")

    parser = _Parser(prog="icer", description="Information-regularized edit inversion experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="generate a synthetic scenario file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("invert", parents=[common], help="run the alternating inversion")
    p.add_argument("--scenario", required=True)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("design", parents=[common], help="design weights with frozen per-frame losses")
    p.add_argument("--scenario", required=True)
    p.add_argument("--result", default=None, help="take the code from a previous result file")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("pretrain", parents=[common], help="fit a residual decoder on synthetic pairs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("verify", parents=[common], help="run randomized verification suites")
    p.add_argument("--suite", choices=["all", *verification.SUITES], default="all")
    p.add_argument("--n", type=int, default=None, help="instances or Monte Carlo trials")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", parents=[common], help="compute metrics for a result file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--result", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"icer: error: {exc}", file=sys.stderr)
        return 2
    except (IcerError, OSError) as exc:
        print(f"icer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
