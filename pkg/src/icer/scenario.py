"""Scenario generation, JSON round-trips and evaluation metrics.

Scenario and result files are JSON documents carrying a ``schema`` string.
Floats are written with Python's shortest round-trip repr, so reloading a
file reproduces every matrix and target bit for bit.  Matrices are nested
row-major lists.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from .decoder import ResidualDecoder
from .errors import InvalidConfig, MissingGroundTruth, SchemaError
from .forward import FrameConstraint, FrameState, ForwardModel, MODEL_KINDS, make_model, model_from_spec

SCENARIO_SCHEMA = "icer.scenario/1"
RESULT_SCHEMA = "icer.result/1"
CORRUPTIONS = ("wrong_edit", "inconsistent_edit")

DEFAULT_SCENARIO = {
    "kind": "linear",
    "r": 4,
    "m": 24,
    "seed": 0,
    "model_params": {},
    "n_candidates": 8,
    "n_held_out": 4,
    "held_out": None,
    "supervised": None,
    "n_theta": 2,
    "plant": True,
    "v_star_scale": 1.0,
    "corrupt": {},
    "corruption_scale": 2.0,
    "decoder": None,
}


@dataclass
class Scenario:
    model: ForwardModel
    frames: list[FrameConstraint]
    v_star: NDArray | None = None
    corruptions: dict[int, str] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def candidates(self) -> list[FrameConstraint]:
        return [f for f in self.frames if not f.held_out]

    @property
    def held_out(self) -> list[FrameConstraint]:
        return [f for f in self.frames if f.held_out]

    def frame(self, frame_id: int) -> FrameConstraint:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def to_dict(self) -> dict:
        return {
            "schema": SCENARIO_SCHEMA,
            "config": self.config,
            "model": self.model.spec(),
            "v_star": None if self.v_star is None else self.v_star.tolist(),
            "corruptions": [{"frame_id": k, "kind": v} for k, v in sorted(self.corruptions.items())],
            "frames": [_frame_to_dict(f) for f in self.frames],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema") != SCENARIO_SCHEMA:
            raise SchemaError(f"expected schema {SCENARIO_SCHEMA!r}, found {d.get('schema')!r}")
        model = model_from_spec(d["model"])
        frames = [_frame_from_dict(fd) for fd in d["frames"]]
        for fr in frames:
            if not np.array_equal(model.eval(np.zeros(model.code_dim), fr.state), fr.y_base):
                raise SchemaError(f"frame {fr.frame_id}: stored y_base does not match the model at v = 0")
        v_star = None if d.get("v_star") is None else np.asarray(d["v_star"], dtype=np.float64)
        corr = {int(c["frame_id"]): c["kind"] for c in d.get("corruptions", [])}
        return cls(model, frames, v_star, corr, d.get("config", {}))


def _frame_to_dict(f: FrameConstraint) -> dict:
    return {
        "frame_id": f.frame_id,
        "theta": f.state.theta.tolist(),
        "mask": f.mask.tolist(),
        "y_base": f.y_base.tolist(),
        "y_edit": None if f.y_edit is None else f.y_edit.tolist(),
        "supervised": f.supervised,
        "held_out": f.held_out,
    }


def _frame_from_dict(d: dict) -> FrameConstraint:
    y_base = np.asarray(d["y_base"], dtype=np.float64)
    state = FrameState(int(d["frame_id"]), np.asarray(d["theta"], dtype=np.float64), len(y_base))
    return FrameConstraint(state, d["mask"], y_base, d.get("y_edit"), bool(d["supervised"]), bool(d["held_out"]))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_scenario(scn: Scenario, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps(scn.to_dict()))


def load_scenario(path: str | os.PathLike) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))


def _theta(t: int, total: int, n_theta: int) -> NDArray:
    phase = 2.0 * np.pi * t / total
    return np.array([np.cos((k // 2 + 1) * phase) if k % 2 == 0 else np.sin((k // 2 + 1) * phase)
                     for k in range(n_theta)])


def _default_held_out(total: int, n_held: int) -> list[int]:
    if n_held == 0:
        return []
    return sorted({int(np.clip(round((i + 0.5) * total / n_held), 1, total)) for i in range(n_held)})


def generate_scenario(config: dict | None = None) -> Scenario:
    """Plant an edit code, render base and edited targets, optionally corrupt some.

    Frame ids run from 1 to ``n_candidates + n_held_out``.  ``corrupt`` maps
    frame ids to ``"wrong_edit"`` (target rendered from an unrelated code) or
    ``"inconsistent_edit"`` (target rendered from the planted code plus an
    independent per-frame perturbation).
    """
    cfg = {**DEFAULT_SCENARIO, **(config or {})}
    try:
        kind, r, m, seed = cfg["kind"], int(cfg["r"]), int(cfg["m"]), int(cfg["seed"])
        n_cand, n_held = int(cfg["n_candidates"]), int(cfg["n_held_out"])
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc
    if kind not in MODEL_KINDS:
        raise InvalidConfig(f"unknown model kind {kind!r}")
    if n_cand < 1 or n_held < 0:
        raise InvalidConfig("need at least one candidate frame and a nonnegative held-out count")
    corrupt = {int(k): v for k, v in (cfg["corrupt"] or {}).items()}
    bad = {v for v in corrupt.values() if v not in CORRUPTIONS}
    if bad:
        raise InvalidConfig(f"unknown corruption kinds {sorted(bad)}")

    params = dict(cfg["model_params"] or {})
    if kind != "decoder_composed":
        params.setdefault("n_theta", int(cfg["n_theta"]))
    if cfg.get("decoder") is not None:
        dec = cfg["decoder"]
        dec = dec if isinstance(dec, ResidualDecoder) else ResidualDecoder.from_dict(dec)
        params["decoder"] = dec
        r = dec.code_dim
    try:
        model = make_model(kind, (r, m), seed, params)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc

    total = n_cand + n_held
    held = cfg["held_out"]
    held = _default_held_out(total, n_held) if held is None else sorted(int(h) for h in held)
    if len(held) != n_held or any(not 1 <= h <= total for h in held):
        raise InvalidConfig(f"held_out must list {n_held} distinct ids in [1, {total}]")
    cand_ids = [t for t in range(1, total + 1) if t not in held]
    sup = cfg["supervised"]
    sup_ids = set(cand_ids) if sup is None else {int(s) for s in sup}
    if not sup_ids <= set(cand_ids):
        raise InvalidConfig("supervised ids must be candidate (non held-out) frames")
    if not set(corrupt) <= sup_ids:
        raise InvalidConfig("only supervised frames can be corrupted")

    rng = np.random.default_rng([seed, 7])
    v_star = float(cfg["v_star_scale"]) * rng.standard_normal(model.code_dim) if cfg["plant"] else None
    if v_star is None and sup_ids:
        raise InvalidConfig("unplanted scenarios need explicit targets; set plant=true")
    n_theta = int(params.get("n_theta", cfg["n_theta"]))
    zero = np.zeros(model.code_dim)
    frames = []
    for t in range(1, total + 1):
        state = FrameState(t, _theta(t, total, n_theta), m)
        y_base = model.eval(zero, state)
        mask = model.edit_region(state)
        y_edit = None
        if t in sup_ids:
            code = v_star
            if corrupt.get(t) == "wrong_edit":
                code = float(cfg["corruption_scale"]) * rng.standard_normal(model.code_dim)
            elif corrupt.get(t) == "inconsistent_edit":
                code = v_star + float(cfg["corruption_scale"]) * rng.standard_normal(model.code_dim)
            y_edit = model.eval(code, state)
        frames.append(FrameConstraint(state, mask, y_base, y_edit, t in sup_ids, t in held))

    echo = {k: v for k, v in cfg.items() if k != "decoder"}
    echo["corrupt"] = {str(k): v for k, v in sorted(corrupt.items())}
    echo["held_out"] = held
    echo["supervised"] = sorted(sup_ids)
    echo["r"] = model.code_dim
    return Scenario(model, frames, v_star, corrupt, echo)


# ---------------------------------------------------------------------------
# results and metrics
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: dict
    v_final: NDArray
    weights_final: NDArray
    frame_ids: list[int]
    keyframes: list[int]
    metrics: dict = field(default_factory=dict)
    traces: list[dict] = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    model: dict | None = None

    def to_dict(self) -> dict:
        return {
            "schema": RESULT_SCHEMA,
            "config": self.config,
            "v_final": np.asarray(self.v_final).tolist(),
            "weights_final": np.asarray(self.weights_final).tolist(),
            "frame_ids": list(self.frame_ids),
            "keyframes": list(self.keyframes),
            "metrics": self.metrics,
            "traces": self.traces,
            "checks": self.checks,
            "model": self.model,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        if d.get("schema") != RESULT_SCHEMA:
            raise SchemaError(f"expected schema {RESULT_SCHEMA!r}, found {d.get('schema')!r}")
        return cls(d["config"], np.asarray(d["v_final"], dtype=np.float64),
                   np.asarray(d["weights_final"], dtype=np.float64), d["frame_ids"], d["keyframes"],
                   d.get("metrics", {}), d.get("traces", []), d.get("checks", {}), d.get("model"))


def save_result(res: RunResult, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps(res.to_dict()))


def load_result(path: str | os.PathLike) -> RunResult:
    with open(path) as fh:
        return RunResult.from_dict(json.load(fh))


def _mean_sq(x: NDArray, count: float) -> float:
    return float(x @ x) / max(count, 1.0)


def ground_truth_target(scn: Scenario, frame: FrameConstraint) -> NDArray:
    if scn.v_star is not None:
        return scn.model.eval(scn.v_star, frame.state)
    if frame.y_edit is None:
        raise MissingGroundTruth(f"frame {frame.frame_id} has no edited target and no planted code")
    return frame.y_edit


def frame_metrics(model: ForwardModel, v: NDArray, frame: FrameConstraint, target: NDArray) -> dict[str, float]:
    y = model.eval(v, frame.state)
    return {
        "fidelity": _mean_sq(frame.mask * (y - target), float(frame.mask.sum())),
        "leakage": _mean_sq(frame.complement * (y - frame.y_base), float(frame.complement.sum())),
    }


def code_error(v_final: NDArray, scn: Scenario) -> float:
    if scn.v_star is None:
        raise MissingGroundTruth("code error needs a planted v_star")
    v_final = np.asarray(v_final, dtype=np.float64)
    if v_final.shape != scn.v_star.shape:
        raise MissingGroundTruth("the run used a different code space than the planted code")
    return float(np.linalg.norm(v_final - scn.v_star))


def evaluate(result: RunResult, scn: Scenario) -> dict[str, Any]:
    """Metrics per frame subset: fidelity (masked error against the true edit),
    leakage (complement error against base), drift between adjacent frames
    (a stand-in for warping error, not a reproduction of it) and code error.
    """
    model = model_from_spec(result.model) if result.model else scn.model
    v = np.asarray(result.v_final, dtype=np.float64)
    subsets = {
        "supervised": [f for f in scn.frames if f.supervised and not f.held_out],
        "held_out": [f for f in scn.frames if f.held_out],
        "all": list(scn.frames),
    }
    per_frame, residuals = {}, {}
    for f in scn.frames:
        try:
            target = ground_truth_target(scn, f)
        except MissingGroundTruth:
            continue
        per_frame[f.frame_id] = frame_metrics(model, v, f, target)
        residuals[f.frame_id] = f.mask * (model.eval(v, f.state) - target)

    table: dict[str, Any] = {}
    for name, frs in subsets.items():
        ids = [f.frame_id for f in frs if f.frame_id in per_frame]
        row = {"frames": ids}
        for metric in ("fidelity", "leakage"):
            row[metric] = float(np.mean([per_frame[i][metric] for i in ids])) if ids else None
        pairs = [(a, b) for a, b in zip(ids, ids[1:])]
        row["drift"] = (float(np.mean([_mean_sq(residuals[b] - residuals[a], len(residuals[a]))
                                       for a, b in pairs])) if pairs else None)
        table[name] = row
    table["code_error"] = None
    if scn.v_star is not None and v.shape == scn.v_star.shape:
        table["code_error"] = code_error(v, scn)
    table["drift_note"] = "adjacent-frame residual drift; substitute for optical-flow warping error"
    table["per_frame"] = {str(k): val for k, val in sorted(per_frame.items())}
    return table
