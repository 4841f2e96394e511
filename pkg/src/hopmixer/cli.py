"""Command-line harness: ``hopmixer <command> --out DIR --seed N [--config FILE]``.

Commands: simulate, landscape, dataset, train, iterate, sweep.

Exit codes: 0 ok, 1 usage or configuration error, 2 non-convergence,
3 divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import lagrangians as lg
from . import symmetry as sy
from .dynamics import HierarchicalNet, HierState, TwoLayerNet, VisibleFlow, integrate
from .errors import DivergenceError, HopmixerError
from .numerics import make_rng
from .train import (
    MixerNet,
    TrainConfig,
    evaluate,
    glyph_denoising_data,
    load_dataset,
    load_net,
    save_dataset,
    save_net,
    token_classification_data,
    train,
    wtilde_norm,
    write_curve,
)

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_DIVERGED = 0, 1, 2, 3

# Every accepted key with its default. ``None`` means "command-specific default".
DEFAULTS = {
    "seed": None,
    "net": {
        "kind": "three_layer",  # or "two_layer"
        "n_v": 8,
        "n_h": 16,
        "n_tokens": 2,
        "n_channels": 1,
        "d_token": 8,
        "d_channel": 8,
        "scale": 0.7,
        "activation": None,  # relu for simulate, gelu for landscape
        "eps": 1e-3,
        "decay": 1.0,
        "break_scale": 0.0,
        "tau_v": 1.0,
        "tau_h": 1.0,
        "tau_s": 1.0,
        "tau_c": 1.0,
        "reduced": False,
    },
    "block": {
        "mode": "para",
        "n_layers": 2,
        "n_iter": 1,
        "n_channels": 8,
        "d_token": None,
        "d_channel": None,
        "scale": 0.5,
        "activation": "gelu",
        "norm": "joint",
        "step": 1.0,
        "decay": 0.0,
        "eps": 1e-6,
    },
    "train": {
        "task": "classification",  # or "denoising"
        "lr": 3e-3,
        "epochs": 20,
        "batch_size": 32,
        "lam": 0.0,
        "noise_sigma": None,  # 0 for classification, the data sigma for denoising
        "n_train": 1000,
        "n_test": 500,
        "n_tokens": 4,
        "d_in": 8,
        "n_classes": 2,
        "class_noise": 0.8,
        "n_patterns": 10,
        "size": 8,
        "sigma": 0.3,
    },
    "integrate": {
        "dt": 1e-2,
        "steps": 20000,
        "method": "rk4",
        "tol": 1e-7,
        "patience": 10,
        "init_scale": 1.0,
        "stop_when_converged": True,
    },
    "landscape": {
        "grid": True,
        "x_min": -3.0,
        "x_max": 3.0,
        "n_points": 201,
        "eps": 1e-3,
        "n_inits": 20,
        "init_scale": 3.0,
        "radius": 1e-3,
        "dt": 1e-2,
        "steps": 20000,
        "tol": 1e-10,
    },
    "sweep": {
        "lambdas": [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        "seeds": [0, 1, 2, 3, 4],
        "k_max": 16,
    },
}


class UsageError(HopmixerError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise UsageError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed: int | None) -> dict:
    """Defaults overlaid with the JSON file at ``path``; ``seed`` overrides the file."""
    user = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(user, dict):
            raise UsageError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise UsageError("a seed is required (--seed N or \"seed\" in the config)")
    return cfg


def _prepare_out(directory, cfg: dict, command: str) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "version": __version__, "config": cfg}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _threads() -> int:
    raw = os.environ.get("HOPMIXER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HOPMIXER_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# network builders
# ---------------------------------------------------------------------------

def _hier_net(cfg: dict, rng, activation_default: str) -> HierarchicalNet:
    c = cfg["net"]
    act = lg.from_name(c["activation"] or activation_default)
    net = HierarchicalNet.random(
        rng, c["n_tokens"], c["n_channels"], c["d_token"], c["d_channel"], scale=c["scale"],
        L_s=act, L_c=act, L_v=lg.CenteredNorm(c["eps"]), decay=c["decay"],
        tau_s=c["tau_s"], tau_v=c["tau_v"], tau_c=c["tau_c"],
    )
    if c["break_scale"]:
        net = sy.break_symmetry(net, rng, c["break_scale"])
    return net


def _two_layer_net(cfg: dict, rng) -> TwoLayerNet:
    c = cfg["net"]
    act = lg.from_name(c["activation"] or "relu")
    return TwoLayerNet.random(
        rng, c["n_v"], c["n_h"], scale=c["scale"], L_v=lg.CenteredNorm(c["eps"]), L_h=act,
        tau_v=c["tau_v"], tau_h=c["tau_h"], decay=c["decay"],
    )


def _mixer_net(cfg: dict, data: dict, meta: dict, seed: int) -> MixerNet:
    b = cfg["block"]
    X = data["X_train"]
    kw = dict(
        n_iter=b["n_iter"], activation_s=lg.from_name(b["activation"]), activation_c=lg.from_name(b["activation"]),
        norm=b["norm"], step=b["step"], decay=b["decay"], eps=b["eps"],
        d_token=b["d_token"], d_channel=b["d_channel"],
    )
    rng = make_rng(seed)
    if meta.get("task") == "denoising":
        return MixerNet.init(rng, X.shape[1], X.shape[2], n_layers=b["n_layers"], mode=b["mode"], scale=b["scale"], **kw)
    n_classes = int(meta.get("n_classes", int(data["Y_train"].max()) + 1))
    return MixerNet.init(
        rng, X.shape[1], b["n_channels"], d_in=X.shape[2], n_classes=n_classes,
        n_layers=b["n_layers"], mode=b["mode"], scale=b["scale"], **kw,
    )


def _train_config(cfg: dict, meta: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    denoise = meta.get("task") == "denoising"
    sigma = t["noise_sigma"]
    if sigma is None:
        sigma = float(meta.get("sigma", t["sigma"])) if denoise else 0.0
    return TrainConfig(
        lr=t["lr"], batch_size=t["batch_size"], epochs=t["epochs"], lam=t["lam"],
        loss="mse" if denoise else "ce", noise_sigma=sigma, seed=seed,
    )


def _load_data(path):
    if path is None:
        raise UsageError("--data DIR is required")
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load dataset from {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset(args, cfg) -> int:
    t = cfg["train"]
    task = args.task or t["task"]
    rng = make_rng(cfg["seed"])
    if task == "classification":
        data = token_classification_data(
            rng, t["n_train"], t["n_test"], t["n_tokens"], t["d_in"], t["n_classes"], t["class_noise"],
        )
        meta = {"task": task, "n_classes": t["n_classes"], "noise": t["class_noise"]}
    elif task == "denoising":
        raw = glyph_denoising_data(rng, t["n_train"], t["n_test"], t["n_patterns"], t["size"], t["sigma"])
        # each glyph becomes a column of size*size tokens with one channel
        flat = lambda a: a.reshape(a.shape[0], -1, 1)  # noqa: E731
        data = {k: flat(v) for k, v in raw.items()}
        meta = {"task": task, "sigma": t["sigma"], "size": t["size"]}
    else:
        raise UsageError(f"unknown task {task!r}")
    out = _prepare_out(args.out, cfg, "dataset")
    save_dataset(out, data, meta)
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    c, ic = cfg["net"], cfg["integrate"]
    rng = make_rng(cfg["seed"])
    if c["kind"] == "two_layer":
        system = _two_layer_net(cfg, rng)
        init = (ic["init_scale"] * rng.standard_normal(system.n_v), np.zeros(system.n_h))
        dims = {"n_v": system.n_v, "n_h": system.n_h}
    elif c["kind"] == "three_layer":
        net = _hier_net(cfg, rng, "relu")
        xv = ic["init_scale"] * rng.standard_normal((net.N_vs, net.N_vc))
        if c["reduced"]:
            system, init = VisibleFlow(net), xv
        else:
            z = net.zero_state()
            system, init = net, HierState(z.xs, xv, z.xc)
        dims = net.dims
    else:
        raise UsageError(f"unknown net.kind {c['kind']!r}")
    trace = integrate(
        system, init, dt=ic["dt"], steps=ic["steps"], method=ic["method"], tol=ic["tol"],
        patience=ic["patience"], stop_when_converged=ic["stop_when_converged"],
    )
    out = _prepare_out(args.out, cfg, "simulate")
    trace.write(out, {
        "dims": dims,
        "method": ic["method"],
        "dt": ic["dt"],
        "converged_step": trace.converged_step,
        "final_energy": float(trace.energies[-1]),
        "seed": cfg["seed"],
        "version": __version__,
    })
    return EXIT_OK if trace.converged else EXIT_NONCONVERGED


def cmd_landscape(args, cfg) -> int:
    if args.break_scale is not None:
        cfg["net"]["break_scale"] = args.break_scale
    lc = cfg["landscape"]
    rng = make_rng(cfg["seed"])
    net = _hier_net(cfg, rng, "gelu")
    out = _prepare_out(args.out, cfg, "landscape")
    summary = {"dims": net.dims, "break_scale": cfg["net"]["break_scale"], "version": __version__}
    if lc["grid"]:
        grid = sy.sample_landscape(net, (lc["x_min"], lc["x_max"], lc["n_points"]), eps=lc["eps"])
        grid.write_csv(out / "landscape.csv")
        summary["mirror_discrepancy"] = sy.mirror_discrepancy(net, grid)
    found = sy.find_attractors(
        net, lc["n_inits"], rng, init_scale=lc["init_scale"], dt=lc["dt"], steps=lc["steps"],
        tol=lc["tol"], radius=lc["radius"],
    )
    found.write_json(out / "attractors.json")
    summary.update(n_clusters=found.n_clusters, zero_mode_valley=found.zero_mode_valley)
    _write_json(out / "summary.json", summary)
    return EXIT_OK if found.converged else EXIT_NONCONVERGED


def _fit(cfg, data, meta, seed):
    net = _mixer_net(cfg, data, meta, seed)
    tcfg = _train_config(cfg, meta, seed)
    trained, curve = train(net, data["X_train"], data["Y_train"], tcfg)
    return net, trained, curve, tcfg


def _metrics(cfg, meta, trained, curve, data) -> dict:
    score = evaluate(trained, data["X_test"], data["Y_test"])
    name = "mse" if meta.get("task") == "denoising" else "accuracy"
    return {
        name: score,
        "metric": name,
        "final_loss": curve[-1].loss,
        "wtilde_norm": wtilde_norm(trained),
        "mode": cfg["block"]["mode"],
        "lambda": cfg["train"]["lam"],
        "epochs": cfg["train"]["epochs"],
        "seed": cfg["seed"],
        "version": __version__,
    }


def cmd_train(args, cfg) -> int:
    if args.mode is not None:
        cfg["block"]["mode"] = args.mode
    if args.lam is not None:
        cfg["train"]["lam"] = args.lam
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    data, meta = _load_data(args.data)
    _, trained, curve, _ = _fit(cfg, data, meta, cfg["seed"])
    out = _prepare_out(args.out, cfg, "train")
    save_net(trained, out / "checkpoint", {"task": meta.get("task", "classification")})
    write_curve(curve, out / "curve.csv")
    _write_json(out / "metrics.json", _metrics(cfg, meta, trained, curve, data))
    return EXIT_OK


def cmd_iterate(args, cfg) -> int:
    if args.checkpoint is None:
        raise UsageError("--checkpoint DIR is required")
    k_max = args.k_max if args.k_max is not None else cfg["sweep"]["k_max"]
    if k_max < 1:
        raise UsageError("--k-max must be positive")
    data, _ = _load_data(args.data)
    try:
        net = load_net(args.checkpoint)
        last = net.blocks[-1]
        base = last.n_iter
        rows = []
        for k in range(1, k_max + 1):
            last.n_iter = base * k
            rows.append((k, evaluate(net, data["X_test"], data["Y_test"])))
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {args.checkpoint} does not fit the data: {exc}") from None
    out = _prepare_out(args.out, cfg, "iterate")
    with open(out / "iterate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "accuracy"])
        for k, a in rows:
            w.writerow([k, repr(float(a))])
    accs = [a for _, a in rows]
    drop = accs[0] - accs[-1]
    _write_json(out / "iterate.json", {
        "k_max": k_max,
        "drop": drop,
        "flagged": bool(drop > 0.10),
        "monotone_nonincreasing": bool(all(b <= a for a, b in zip(accs, accs[1:]))),
        "version": __version__,
    })
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    data, meta = _load_data(args.data)
    sw = cfg["sweep"]
    cfg["block"]["mode"] = "asym"
    jobs = [(float(lam), int(seed)) for lam in sw["lambdas"] for seed in sw["seeds"]]

    def run(job):
        lam, seed = job
        local = copy.deepcopy(cfg)
        local["train"]["lam"] = lam
        _, trained, _, _ = _fit(local, data, meta, seed)
        return lam, seed, evaluate(trained, data["X_test"], data["Y_test"]), wtilde_norm(trained)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(run, jobs))  # map keeps job order
    out = _prepare_out(args.out, cfg, "sweep")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "seed", "accuracy", "wtilde_norm"])
        for lam, seed, acc, wn in rows:
            w.writerow([repr(lam), seed, repr(float(acc)), repr(float(wn))])
    by_lam = {}
    for lam, _, acc, wn in rows:
        by_lam.setdefault(lam, []).append((acc, wn))
    lams = sorted(by_lam)
    mean_acc = [float(np.mean([a for a, _ in by_lam[l]])) for l in lams]
    mean_w = [float(np.mean([w for _, w in by_lam[l]])) for l in lams]
    per_seed_monotone = all(
        all(rows_s[i + 1] <= rows_s[i] + 1e-9 for i in range(len(rows_s) - 1))
        for rows_s in (
            [wn for lam, s, _, wn in sorted(rows) if s == seed] for seed in sw["seeds"]
        )
    )
    _write_json(out / "summary.json", {
        "lambdas": lams,
        "mean_accuracy": mean_acc,
        "mean_wtilde_norm": mean_w,
        "wtilde_nonincreasing": bool(per_seed_monotone),
        "version": __version__,
    })
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "landscape": cmd_landscape,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "iterate": cmd_iterate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hopmixer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="output directory")
        if name in ("train", "iterate", "sweep"):
            s.add_argument("--data", help="dataset directory written by 'dataset'")
        if name == "dataset":
            s.add_argument("--task", choices=["classification", "denoising"])
        if name == "landscape":
            s.add_argument("--break-scale", dest="break_scale", type=float)
        if name == "train":
            s.add_argument("--mode", choices=["vanilla", "para", "sym", "asym"])
            s.add_argument("--lambda", dest="lam", type=float)
            s.add_argument("--epochs", type=int)
        if name == "iterate":
            s.add_argument("--checkpoint")
            s.add_argument("--k-max", dest="k_max", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except DivergenceError as exc:
        print(f"hopmixer: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (HopmixerError, ValueError, TypeError) as exc:
        print(f"hopmixer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
