"""Training loop, periodic diagnostics, run outputs and parameter sweeps."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import optim
from .activations import Activation
from .bounds import compute_bounds, linear_block_constants, linear_block_slices
from .config import load_config
from .data import estimate_moments, generate, minibatch, source_from_dict, train_test_split
from .diagnostics import RECORD_COLUMNS, DiagnosticsRecord, estimator_variance, fit_rate, random_iterate_metric
from .estimators import ESTIMATORS, snr_measure
from .gradient import GradEstimate
from .mlp import project_norm
from .models import (
    Clamps,
    DegenerateWeightsError,
    Objective,
    _mlp_to_dict,
    elbo_deep,
    elbo_linear,
    grad_linear,
    grad_linear_moments,
    init_linear,
    iwae_objective,
    make_deep_vae,
    model_to_dict,
    target_from_dict,
)
from .numerics import RngKey, gauss_sample, spectral_norm
from .seqvae import linear_ssm, make_backward, make_ssm, seq_elbo, seq_pathwise_grad, simulate

log = logging.getLogger("vaeconv")


class RunAborted(RuntimeError):
    """Training hit a non-finite objective or gradient."""

    def __init__(self, msg: str, last_good: int):
        super().__init__(msg)
        self.last_good = last_good


def _scale_to(v: np.ndarray, a: float) -> np.ndarray:
    n = spectral_norm(v) if v.ndim == 2 else float(np.linalg.norm(v))
    return v * (a / n) if n > a else v


# ---------------------------------------------------------------------------
# problems: one per model family


class _LinearProblem:
    family = "linear"

    def __init__(self, cfg, key, train, test, source=None):
        mc = cfg["model"]
        self.population = None
        if cfg["diag"]["grad_eval"] == "population":
            if source is None or not hasattr(source, "first_two"):
                raise ValueError("population gradients need a synthetic source with exact moments")
            self.population = source.first_two()
        self.beta = cfg["objective"]["beta"] if cfg["objective"]["kind"] == "beta" else 1.0
        self.model = init_linear(mc["d_x"], mc["d_z"], key.child("init"), mc["c2"], mc["init_scale"])
        self.a = mc["a"]
        self.train, self.test = train, test

    def coords(self):
        return self.model.opt_flat()

    def set_coords(self, v):
        self.model = self.model.with_opt_flat(v)
        if self.a is not None and math.isfinite(self.a):
            self._project()

    def _project(self):
        m = self.model
        D = np.minimum(m.D, self.a)
        self.model = type(m)(
            _scale_to(m.W1, self.a), _scale_to(m.b1, self.a), _scale_to(m.W2, self.a), _scale_to(m.b2, self.a),
            np.maximum(D, m.c_D), m.c2, m.c_D,
        )

    def estimate(self, batch, K, key):
        return grad_linear(self.model, batch, self.beta)

    def opt_grad(self, est):
        return self.model.opt_grad(est.flat)

    def evaluate(self, diag, key):
        if self.population is not None:
            g = grad_linear_moments(self.model, *self.population, self.beta)
        else:
            X = self.train if diag["grad_eval"] == "train" or not self.test.shape[0] else self.test
            g = grad_linear(self.model, X, self.beta).flat
        return elbo_linear(self.model, self.train, self.beta), elbo_linear(self.model, self.test, self.beta), float(g @ g)

    def smoothness(self, moments_src):
        mean = self.train.mean(axis=0)
        second = self.train.T @ self.train / self.train.shape[0]
        consts = linear_block_constants(self.model, mean, second)
        sl = linear_block_slices(self.model)
        return {"kind": "linear_blocks", "constants": consts, "blocks": {k: [s.start, s.stop] for k, s in sl.items()}}

    def checkpoint(self):
        return model_to_dict(self.model)


class _DeepProblem:
    family = "deep"

    def __init__(self, cfg, key, train, test, source=None):
        mc, oc = cfg["model"], cfg["objective"]
        target = target_from_dict(oc["target"]) if oc.get("target") else None
        objective = Objective(oc["kind"], oc["beta"], oc["K"], target)
        cl = mc["clamps"]
        clamps = Clamps(cl["C_mu"], cl["C_G"], cl["c_Sigma"], cl["C_Sigma"], mc["s"])
        a = mc["a"] if mc["a"] is not None and math.isfinite(mc["a"]) else None
        self.model = make_deep_vae(
            mc["d_x"], mc["d_z"], key.child("init"), tuple(mc["enc_hidden"]), tuple(mc["dec_hidden"]),
            Activation.parse(mc["activation"]), mc["c2"], clamps, a, objective,
        )
        self.est_name = cfg["estimator"]
        self.estimator = ESTIMATORS[self.est_name]
        self.train, self.test = train, test
        self.K_obj = int(oc["K"])
        self.data_radius = float(np.sqrt(np.max(np.sum(train**2, axis=1))))

    def coords(self):
        return self.model.flat()

    def set_coords(self, v):
        m = self.model.with_flat(v)
        if m.decoder.bound is not None:
            m = replace(m, decoder=project_norm(m.decoder), encoder=project_norm(m.encoder))
        self.model = m

    def estimate(self, batch, K, key):
        return self.estimator(self.model, batch, K, key)

    def opt_grad(self, est):
        g = est.flat.copy()
        if self.model.objective.kind == "bbvi":
            g[: self.model.d_theta] = 0.0
        return g

    def _objective(self, X, eps):
        m = self.model
        if m.objective.kind == "iwae":
            return iwae_objective(m, X, eps)
        return elbo_deep(m, X, eps)

    def evaluate(self, diag, key):
        mc = diag["eval_mc"]
        nb = diag["eval_batch"]
        Xtr, Xte = self.train[:nb], self.test[:nb] if self.test.shape[0] else self.train[:nb]
        eps_tr = gauss_sample(key.child("eval_train"), (Xtr.shape[0], mc, self.model.d_z))
        eps_te = gauss_sample(key.child("eval_test"), (Xte.shape[0], mc, self.model.d_z))
        e_tr, e_te = self._objective(Xtr, eps_tr), self._objective(Xte, eps_te)
        g = self._eval_grad(Xtr if diag["grad_eval"] == "train" else Xte, mc, key.child("eval_grad"))
        return e_tr, e_te, float(g @ g)

    def _eval_grad(self, X, mc, key):
        """Low-variance gradient of the training objective on a fixed batch, in row chunks."""
        m = self.model
        if m.objective.kind == "iwae":
            reps = max(1, mc // self.K_obj)
            X = np.repeat(X, reps, axis=0)
            K, fn = self.K_obj, ESTIMATORS["iwae"]
        else:
            K, fn = mc, ESTIMATORS["pathwise"]
        total = np.zeros(m.size)
        chunk = max(1, 4096 // K)
        for start in range(0, X.shape[0], chunk):
            part = X[start:start + chunk]
            est = fn(m, part, K, key.child("chunk", start))
            total += est.flat * part.shape[0]
        g = total / X.shape[0]
        return self.opt_grad(GradEstimate(g[: m.d_theta], g[m.d_theta:], g[None, :]))

    def smoothness(self, moments_src):
        rep = compute_bounds(self.model, moments_src, self.K_obj, self.data_radius, None)
        return {"kind": "deep", **rep.to_dict()}

    def checkpoint(self):
        return model_to_dict(self.model)


class _SeqProblem:
    family = "seq"

    def __init__(self, cfg, key, train, test, source=None):
        mc = cfg["model"]
        act = Activation.parse(mc["activation"])
        self.ssm = make_ssm(
            mc["d_x"], mc["d_z"], key.child("init"), tuple(mc["dec_hidden"]), act, mc["tau_m2"], mc["tau_g2"],
            mc["state_clamp"], mc["s"], mc["a"],
        )
        cl = mc["clamps"]
        clamps = Clamps(cl["C_mu"], cl["C_G"], cl["c_Sigma"], cl["C_Sigma"], mc["s"])
        self.T = train.shape[1] - 1
        self.q = make_backward(
            mc["d_x"], mc["d_z"], key.child("init"), self.T, tuple(mc["enc_hidden"]), act, mc["shared"], clamps, mc["a"]
        )
        self.learn_theta = mc["learn_theta"]
        self.train, self.test = train, test

    def coords(self):
        return np.concatenate([self.ssm.flat(), self.q.flat()])

    def set_coords(self, v):
        n = self.ssm.size
        s, q = self.ssm.with_flat(v[:n]), self.q.with_flat(v[n:])
        if s.transition.bound is not None:
            s = replace(s, transition=project_norm(s.transition), emission=project_norm(s.emission))
            q = replace(q, terminal=project_norm(q.terminal), steps=tuple(project_norm(p) for p in q.steps))
        self.ssm, self.q = s, q

    def _grad(self, seqs, K, key):
        ests = [
            seq_pathwise_grad(self.ssm, self.q, x, K, key.child("seq", i), learn_theta=self.learn_theta)
            for i, x in enumerate(seqs)
        ]
        terms = np.concatenate([e.per_sample_terms for e in ests])
        return GradEstimate.from_terms(terms, self.ssm.size, B=len(seqs), K=K, estimator="seq-pathwise")

    def estimate(self, batch, K, key):
        return self._grad(batch, K, key)

    def opt_grad(self, est):
        return est.flat

    def evaluate(self, diag, key):
        mc, nb = diag["eval_mc"], diag["eval_batch"]
        tr, te = self.train[:nb], (self.test if self.test.shape[0] else self.train)[:nb]
        e_tr = float(np.mean([seq_elbo(self.ssm, self.q, x, key=key.child("eval_train", i), K=mc) for i, x in enumerate(tr)]))
        e_te = float(np.mean([seq_elbo(self.ssm, self.q, x, key=key.child("eval_test", i), K=mc) for i, x in enumerate(te)]))
        g = self._grad(tr if diag["grad_eval"] == "train" else te, mc, key.child("eval_grad")).flat
        return e_tr, e_te, float(g @ g)

    def smoothness(self, moments_src):
        return {"kind": "seq", "status": "unavailable(no closed-form constant for the sequential model)"}

    def checkpoint(self):
        return {
            "version": 1,
            "family": "seq",
            "transition": _mlp_to_dict(self.ssm.transition),
            "emission": _mlp_to_dict(self.ssm.emission),
            "tau_m2": self.ssm.tau_m2,
            "tau_g2": self.ssm.tau_g2,
            "terminal": _mlp_to_dict(self.q.terminal),
            "steps": [_mlp_to_dict(p) for p in self.q.steps],
            "mean_head": self.q.mean_head.spec() if self.q.mean_head else None,
            "logvar_head": self.q.logvar_head.spec() if self.q.logvar_head else None,
        }


PROBLEMS = {"linear": _LinearProblem, "deep": _DeepProblem, "seq": _SeqProblem}


# ---------------------------------------------------------------------------
# data


def _seq_source(src: dict, T: int, key: RngKey):
    T = int(src.get("T", T))
    tm, tg = float(src.get("tau_m2", 1.0)), float(src.get("tau_g2", 1.0))
    if "A" in src:
        return linear_ssm(src["A"], src["C"], tm, tg), T
    return (
        make_ssm(
            int(src["d_x"]), int(src["d_z"]), key.child("source"), tuple(src.get("hidden", ())),
            src.get("activation", "tanh"), tm, tg, src.get("state_clamp", 5.0),
        ),
        T,
    )


def make_data(cfg: dict):
    """(train, test, (E|x|^2, E|x|^4), source) for the configured source."""
    key = RngKey(cfg["data"]["seed"])
    src = cfg["data"]["source"]
    n = cfg["data"]["n"]
    if src["kind"] == "ssm":
        ssm, T = _seq_source(src, cfg["model"]["T"], key)
        data = np.stack([simulate(ssm, T, key.child("data", i))[1] for i in range(n)])
        if data.shape[2] != cfg["model"]["d_x"]:
            raise ValueError(f"data width {data.shape[2]} != model.d_x {cfg['model']['d_x']}")
        n_test = int(round(cfg["data"]["test_frac"] * n))
        perm = key.child("split").generator().permutation(n)
        tr, te = data[np.sort(perm[n_test:])], data[np.sort(perm[:n_test])]
        return tr, te, estimate_moments(tr.reshape(-1, data.shape[2])), ssm
    source = source_from_dict(src, key.child("source"))
    data = generate(source, n, key)
    if data.shape[1] != cfg["model"]["d_x"]:
        raise ValueError(f"data width {data.shape[1]} != model.d_x {cfg['model']['d_x']}")
    tr, te = train_test_split(data, cfg["data"]["test_frac"], key)
    moments = source.moments() if hasattr(source, "moments") else estimate_moments(tr)
    return tr, te, moments, source


# ---------------------------------------------------------------------------
# run


@dataclass
class RunResult:
    records: list
    summary: dict
    out_dir: Path | None = None
    status: str = "ok"
    extra: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for r in records:
            row = r.row()
            fh.write(",".join(_fmt(row[c]) for c in RECORD_COLUMNS) + "\n")


def read_records(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        cols = {c: [] for c in header}
        for line in fh:
            for c, v in zip(header, line.strip().split(",")):
                cols[c].append(float(v))
    return {c: np.array(v) for c, v in cols.items()}


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def run(config, out_dir=None, quiet: bool = True, data=None) -> RunResult:
    """Train one model and write ``records.csv``, ``summary.json`` and ``params.json``.

    ``config`` is a validated dict (or anything :func:`load_config` accepts).
    ``data`` = (train, test) arrays replaces the configured source; an empty
    test array means evaluation on the training rows.
    Raises :class:`RunAborted` after writing the outputs when training diverges.
    """
    cfg = config if isinstance(config, dict) and "model" in config and "diag" in config else load_config(config)
    cfg = copy.deepcopy(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    key = RngKey(cfg["data"]["seed"])
    if data is None:
        train, test, moments, source = make_data(cfg)
    else:
        train, test = (np.asarray(a, dtype=np.float64) for a in data)
        moments, source = estimate_moments(train.reshape(-1, train.shape[-1])), None
    if test.shape[0] == 0:
        test = train
    problem = PROBLEMS[cfg["model"]["family"]](cfg, key, train, test, source)

    oc, tc, dc = cfg["optim"], cfg["train"], cfg["diag"]
    state = (
        optim.adam(oc["C_gamma"], oc["beta1"], oc["beta2"], oc["delta"]) if oc["kind"] == "adam" else optim.sgd(oc["C_gamma"])
    )
    B, K, n_iter = tc["B"], tc["K_train"], tc["iterations"]
    if B > train.shape[0]:
        raise ValueError(f"train.B={B} exceeds the {train.shape[0]} training rows")
    timing = dc["timing"]
    train_key, eval_key = key.child("train"), key.child("eval")

    records: list[DiagnosticsRecord] = []
    status, abort_msg, last_good = "ok", None, 0

    def record(it: int, est: GradEstimate | None):
        t0 = time.perf_counter()
        e_tr, e_te, gn = problem.evaluate(dc, eval_key.child(it))
        if not (math.isfinite(e_tr) and math.isfinite(e_te) and math.isfinite(gn)):
            raise RunAborted(f"non-finite objective at iteration {it}", last_good)
        if est is None:
            est = problem.estimate(minibatch(train, B, it, train_key), K, train_key.child("noise", it))
        ev = estimator_variance(est.per_sample_terms) if est.per_sample_terms.shape[0] > 1 else float("nan")
        snr_t = snr_p = float("nan")
        if dc["snr_reps"]:
            sk = eval_key.child("snr", it)
            reps = [
                problem.estimate(minibatch(train, B, r, sk.child("batch")), K, sk.child("noise", r))
                for r in range(dc["snr_reps"])
            ]
            snr_t, snr_p = snr_measure(reps)
        wall = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
        records.append(DiagnosticsRecord(it, gn, e_tr, e_te, ev, snr_t, snr_p, state.lr, wall))

    try:
        theta = problem.coords()
        record(0, None)
        for it in range(n_iter):
            batch = minibatch(train, B, it, train_key)
            try:
                est = problem.estimate(batch, K, train_key.child("noise", it))
                g = problem.opt_grad(est)
                state, theta = optim.step(state, theta, g)
            except (FloatingPointError, DegenerateWeightsError) as exc:
                raise RunAborted(f"iteration {it + 1}: {exc}", last_good) from None
            problem.set_coords(theta)
            theta = problem.coords()
            if not np.all(np.isfinite(theta)):
                raise RunAborted(f"non-finite parameters at iteration {it + 1}", last_good)
            last_good = it + 1
            n = it + 1
            if n % dc["eval_every"] == 0 or n == n_iter:
                record(n, est)
                if not quiet:
                    r = records[-1]
                    log.info("iter %d elbo_test %.5g grad_norm_sq %.4g", n, r.elbo_test, r.grad_norm_sq)
    except RunAborted as exc:
        status, abort_msg = "aborted", str(exc)
        exc.last_good = last_good

    summary = _summarise(cfg, problem, records, moments, status, abort_msg, last_good, out, t_start)
    if out is not None:
        write_records(out / "records.csv", records)
        (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=1, sort_keys=True) + "\n")
    result = RunResult(records, summary, out, status, {"problem": problem})
    if status != "ok":
        raise RunAborted(abort_msg, last_good)
    return result


def _summarise(cfg, problem, records, moments, status, abort_msg, last_good, out, t_start) -> dict:
    summary = {"status": status, "config": cfg, "last_good_iteration": last_good, "n_records": len(records)}
    if abort_msg:
        summary["error"] = abort_msg
    fw = cfg["diag"]["fit_window"]
    try:
        fits = fit_rate(records, tuple(fw) if fw else None)
        summary["rate_fit"] = {"power": fits["power"].to_dict(), "log_sqrt": fits["log_sqrt"].to_dict(), "best": fits["best"]}
    except ValueError as exc:
        summary["rate_fit"] = {"status": f"unavailable({exc})"}
    summary["random_iterate_metric"] = random_iterate_metric(records) if records else None
    if cfg["diag"]["bounds"]:
        try:
            summary["smoothness"] = problem.smoothness(moments)
        except (ValueError, FloatingPointError) as exc:
            summary["smoothness"] = {"status": f"unavailable({exc})"}
    if records:
        summary["final"] = records[-1].row()
    if out is not None:
        (out / "params.json").write_text(json.dumps(_json_safe(problem.checkpoint()), indent=1) + "\n")
        summary["final_params"] = str((out / "params.json").resolve())
    summary["wall_time_s"] = time.perf_counter() - t_start if cfg["diag"]["timing"] else 0.0
    return summary


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("beta", "K", "activation", "BK")


def apply_axis(cfg: dict, axis: str, value) -> dict:
    """Copy of ``cfg`` with one sweep axis set."""
    raw = copy.deepcopy(cfg)
    if axis == "beta":
        b = float(value)
        raw["objective"]["kind"] = "elbo" if b == 1.0 and raw["objective"]["kind"] == "elbo" else "beta"
        raw["objective"]["beta"] = b
    elif axis == "K":
        k = int(value)
        raw["objective"]["K"] = k
        raw["train"]["K_train"] = k
    elif axis == "activation":
        raw["model"]["activation"] = str(value)
    elif axis == "BK":
        b, k = (int(v) for v in str(value).lower().split("x"))
        raw["train"]["B"], raw["train"]["K_train"] = b, k
        if raw["objective"]["kind"] == "iwae":
            raw["objective"]["K"] = k
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    return raw


def _sweep_one(args):
    cfg, out_dir = args
    try:
        res = run(load_config(cfg), out_dir)
        fin = res.records[-1]
        return {"status": "ok", "grad_norm_sq": fin.grad_norm_sq, "objective": fin.elbo_test, "error": ""}
    except RunAborted as exc:
        return {"status": "aborted", "grad_norm_sq": math.nan, "objective": math.nan, "error": str(exc)}
    except Exception as exc:  # noqa: BLE001 - a failed run is recorded and the sweep continues
        return {"status": "failed", "grad_norm_sq": math.nan, "objective": math.nan, "error": f"{type(exc).__name__}: {exc}"}


def sweep(base, axis: str, values, seeds, out_dir=None, jobs: int = 1) -> tuple[list[dict], list[dict]]:
    """One run per (value, seed); returns (per-value medians, per-run rows).

    With ``out_dir`` the runs land in ``AXIS=value/seed=s/`` and the tables in
    ``sweep.csv`` (medians) and ``sweep_runs.csv``.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep axis needs at least one value")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    base = base if isinstance(base, dict) and "diag" in base else load_config(base)
    out = Path(out_dir) if out_dir is not None else None
    tasks = []
    for v in values:
        for s in seeds:
            cfg = apply_axis(base, axis, v)
            cfg["data"]["seed"] = int(s)
            load_config(cfg)  # validate before launching
            tasks.append((cfg, out / f"{axis}={v}" / f"seed={s}" if out is not None else None))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    rows = []
    i = 0
    for v in values:
        for s in seeds:
            rows.append({"axis": axis, "value": str(v), "seed": int(s), **results[i]})
            i += 1
    table = []
    for v in values:
        sel = [r for r in rows if r["value"] == str(v) and r["status"] == "ok"]
        table.append(
            {
                "axis": axis,
                "value": str(v),
                "n_ok": len(sel),
                "n_failed": sum(1 for r in rows if r["value"] == str(v)) - len(sel),
                "median_grad_norm_sq": float(np.median([r["grad_norm_sq"] for r in sel])) if sel else math.nan,
                "median_objective": float(np.median([r["objective"] for r in sel])) if sel else math.nan,
            }
        )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_table(out / "sweep_runs.csv", rows, ("axis", "value", "seed", "status", "grad_norm_sq", "objective", "error"))
        _write_table(out / "sweep.csv", table, ("axis", "value", "n_ok", "n_failed", "median_grad_norm_sq", "median_objective"))
    return table, rows


def _write_table(path, rows, cols) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            cells = []
            for c in cols:
                v = r[c]
                if isinstance(v, float):
                    cells.append(_fmt(v))
                else:
                    cells.append(str(v).replace(",", ";").replace("\n", " "))
            fh.write(",".join(cells) + "\n")
