"""Run configuration: defaults, strict key checking and validation with field paths."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .activations import Activation
from .models import OBJECTIVE_KINDS


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


DEFAULTS = {
    "model": {
        "family": "linear",
        "d_x": 8,
        "d_z": 2,
        "enc_hidden": [16],
        "dec_hidden": [16],
        "activation": "tanh",
        "s": 5.0,
        "c2": 1.0,
        "clamps": {"C_mu": 10.0, "C_G": 10.0, "c_Sigma": 1e-3, "C_Sigma": 10.0},
        "a": None,
        "init_scale": 0.1,
        "T": 10,
        "tau_m2": 1.0,
        "tau_g2": 1.0,
        "state_clamp": 5.0,
        "shared": True,
        "learn_theta": True,
    },
    "objective": {"kind": "elbo", "beta": 1.0, "K": 1, "target": None},
    "estimator": "pathwise",
    "optim": {"kind": "adam", "C_gamma": 0.001, "beta1": 0.9, "beta2": 0.999, "delta": 1e-8},
    "data": {
        "source": {"kind": "linear_factor", "d_x": 8, "d_z": 2, "scale": 2.0, "noise": 1.0},
        "n": 10000,
        "seed": 0,
        "test_frac": 0.2,
    },
    "train": {"iterations": 1000, "epochs": None, "B": 32, "K_train": None},
    "diag": {
        "eval_every": 100,
        "eval_mc": 256,
        "eval_batch": 64,
        "grad_eval": "test",
        "snr_reps": 30,
        "fit_window": None,
        "timing": False,
        "bounds": True,
    },
}

# keys whose values are free-form dictionaries
_OPEN = {("data", "source"), ("objective", "target")}

FAMILIES = ("linear", "deep", "seq")
ESTIMATOR_NAMES = ("score", "pathwise", "pathwise-sampled", "iwae", "analytic")


def _merge(base: dict, over: dict, path: tuple) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = ".".join(path + (k,))
        if k not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[k], dict) and path + (k,) not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(where, "expected an object")
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(cfg, path: str, positive=False, nonneg=False, integer=False, allow_none=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node is None and allow_none:
        return None
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(path, f"expected a number, got {node!r}")
    if integer and (not float(node).is_integer()):
        raise ConfigError(path, "expected an integer")
    if not math.isfinite(node) and not (path == "model.a" and node == math.inf):
        raise ConfigError(path, "must be finite")
    if positive and not node > 0:
        raise ConfigError(path, "must be positive")
    if nonneg and node < 0:
        raise ConfigError(path, "must be nonnegative")
    return int(node) if integer else float(node)


def validate(cfg: dict) -> dict:
    m, o, t, d, g, opt = cfg["model"], cfg["objective"], cfg["train"], cfg["data"], cfg["diag"], cfg["optim"]
    if m["family"] not in FAMILIES:
        raise ConfigError("model.family", f"must be one of {FAMILIES}")
    for p in ("model.d_x", "model.d_z"):
        _num(cfg, p, positive=True, integer=True)
    for p in ("model.c2", "model.s", "model.tau_m2", "model.tau_g2", "model.init_scale"):
        _num(cfg, p, positive=True)
    _num(cfg, "model.a", positive=True, allow_none=True)
    _num(cfg, "model.state_clamp", positive=True, allow_none=True)
    _num(cfg, "model.T", nonneg=True, integer=True)
    for name in ("enc_hidden", "dec_hidden"):
        hid = m[name]
        if not isinstance(hid, list) or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hid):
            raise ConfigError(f"model.{name}", "expected a list of positive integers")
    try:
        Activation.parse(m["activation"])
    except (ValueError, TypeError, AttributeError) as exc:
        raise ConfigError("model.activation", str(exc)) from None
    cl = m["clamps"]
    for k in ("C_mu", "C_G", "c_Sigma", "C_Sigma"):
        _num(cfg, f"model.clamps.{k}", positive=True)
    if cl["c_Sigma"] > cl["C_Sigma"]:
        raise ConfigError("model.clamps.c_Sigma", "must not exceed C_Sigma")
    for k in ("shared", "learn_theta"):
        if not isinstance(m[k], bool):
            raise ConfigError(f"model.{k}", "expected true or false")

    if o["kind"] not in OBJECTIVE_KINDS:
        raise ConfigError("objective.kind", f"must be one of {OBJECTIVE_KINDS}")
    _num(cfg, "objective.beta", positive=True)
    _num(cfg, "objective.K", positive=True, integer=True)
    if o["kind"] != "beta" and o["beta"] != 1.0:
        raise ConfigError("objective.beta", "beta != 1 needs objective.kind = 'beta'")
    if o["kind"] == "bbvi" and not o.get("target"):
        raise ConfigError("objective.target", "bbvi needs a target")

    est = cfg["estimator"]
    if est not in ESTIMATOR_NAMES:
        raise ConfigError("estimator", f"must be one of {ESTIMATOR_NAMES}")
    fam = m["family"]
    if fam == "linear" and est != "analytic":
        cfg["estimator"] = "analytic"
    if fam == "linear" and o["kind"] not in ("elbo", "beta"):
        raise ConfigError("objective.kind", "the linear family supports elbo and beta objectives")
    if fam == "seq" and (o["kind"] != "elbo" or cfg["estimator"] != "pathwise"):
        raise ConfigError("estimator", "the seq family trains the ELBO with the pathwise estimator")
    if fam == "deep" and est == "analytic":
        raise ConfigError("estimator", "analytic gradients exist only for the linear family")
    if o["kind"] == "iwae" and est not in ("iwae",):
        raise ConfigError("estimator", "the iwae objective needs the iwae estimator")
    if est == "iwae" and o["kind"] != "iwae":
        raise ConfigError("objective.kind", "the iwae estimator needs the iwae objective")

    if opt["kind"] not in ("sgd", "adam"):
        raise ConfigError("optim.kind", "must be sgd or adam")
    _num(cfg, "optim.C_gamma", positive=True)
    b1 = _num(cfg, "optim.beta1", nonneg=True)
    b2 = _num(cfg, "optim.beta2", positive=True)
    _num(cfg, "optim.delta", nonneg=True)
    if opt["kind"] == "adam" and not (b1 < math.sqrt(b2) < 1):
        raise ConfigError("optim.beta1", "Adam needs beta1 < sqrt(beta2) < 1")

    if not isinstance(d["source"], dict) or "kind" not in d["source"]:
        raise ConfigError("data.source", "expected an object with a 'kind'")
    _num(cfg, "data.n", positive=True, integer=True)
    _num(cfg, "data.seed", nonneg=True, integer=True)
    tf = _num(cfg, "data.test_frac", nonneg=True)
    if not tf < 1:
        raise ConfigError("data.test_frac", "must be < 1")

    _num(cfg, "train.B", positive=True, integer=True)
    _num(cfg, "train.K_train", positive=True, integer=True, allow_none=True)
    if t["epochs"] is not None:
        ep = _num(cfg, "train.epochs", nonneg=True)
        n_train = d["n"] - int(round(tf * d["n"]))
        t["iterations"] = int(math.ceil(n_train * ep / t["B"]))
        t["epochs"] = None
    _num(cfg, "train.iterations", nonneg=True, integer=True)
    if o["kind"] == "iwae":
        if t["K_train"] is None:
            t["K_train"] = o["K"]
        elif t["K_train"] != o["K"]:
            raise ConfigError("train.K_train", "must equal objective.K for the iwae objective")
    if t["K_train"] is None:
        t["K_train"] = 1

    _num(cfg, "diag.eval_every", positive=True, integer=True)
    _num(cfg, "diag.eval_mc", positive=True, integer=True)
    _num(cfg, "diag.eval_batch", positive=True, integer=True)
    reps = _num(cfg, "diag.snr_reps", nonneg=True, integer=True)
    if 0 < reps < 30:
        raise ConfigError("diag.snr_reps", "SNR needs at least 30 repetitions (or 0 to disable)")
    fw = g["fit_window"]
    if fw is not None and (not isinstance(fw, list) or len(fw) != 2 or not fw[0] < fw[1]):
        raise ConfigError("diag.fit_window", "expected [n0, n1] with n0 < n1")
    if g["grad_eval"] not in ("test", "train", "population"):
        raise ConfigError("diag.grad_eval", "must be 'test', 'train' or 'population'")
    if g["grad_eval"] == "population" and (fam != "linear" or d["source"]["kind"] not in ("linear_factor", "mixture")):
        raise ConfigError("diag.grad_eval", "'population' needs the linear family and a synthetic Gaussian source")
    for k in ("timing", "bounds"):
        if not isinstance(g[k], bool):
            raise ConfigError(f"diag.{k}", "expected true or false")
    return cfg


def load_config(source=None, seed: int | None = None) -> dict:
    """Merge a JSON object (dict, path or None) over the defaults and validate it."""
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    cfg = _merge(DEFAULTS, raw, ())
    if seed is not None:
        cfg["data"]["seed"] = int(seed)
    return validate(cfg)
