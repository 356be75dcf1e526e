"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (empty certified set, hash
mismatch, unsatisfiable data generation), 2 usage error (bad flags,
missing files, inconsistent options).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .certify import (CertifiedLatent, ExpansionConfig, PivotSearchConfig, certify, digest,
                      expand_box)
from .evaluation import MethodRun, export_figure_data, loglik_of_run, loglik_summary, run_method
from .generators import Model, concat_condition
from .graph import Graph
from .latent import EmptyRegionError, std_normal_logpdf
from .pipeline import TASKS, get_task, identity_model, model_reward, train_model
from .stl import batch_boolean, batch_robustness, loads
from .stl import to_dict as formula_dict
from .tasks import TrajectoryDataset, make_dataset
from .training import TrainingConfig
from .verify import load_box, verify_box

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("certiplan")


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# provenance


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


_NOT_CONFIG = {"out", "out_dir", "threads", "verbose", "func", "command"}


def provenance(args, inputs=()) -> dict:
    """Tool version, seed, a hash of the run configuration, and input hashes."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}
    return {"tool": "certiplan", "version": __version__, "command": args.command,
            "seed": getattr(args, "seed", None), "config_hash": digest(cfg),
            "config": cfg, "inputs": {str(p): file_hash(p) for p in inputs}}


def _need(path):
    if path is None or not Path(path).exists():
        raise UsageError(f"file not found: {path}")
    return path


def _threads(args) -> int | None:
    t = getattr(args, "threads", None)
    if t is None and os.environ.get("CERTIPLAN_THREADS"):
        try:
            t = int(os.environ["CERTIPLAN_THREADS"])
        except ValueError:
            raise UsageError("CERTIPLAN_THREADS must be an integer") from None
    if t is not None and t < 1:
        raise UsageError("--threads must be >= 1")
    return t


def _load_model(path) -> Model:
    try:
        return Model.load(_need(path))
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read weights {path}: {exc}") from None


def _condition(args, task):
    if getattr(args, "condition", None):
        try:
            vals = [float(v) for v in args.condition.split(",")]
        except ValueError:
            raise UsageError("--condition expects comma-separated numbers") from None
        if len(vals) != task.cond_len * task.state_dim:
            raise UsageError(f"--condition needs {task.cond_len * task.state_dim} numbers")
        return np.asarray(vals).reshape(task.cond_len, task.state_dim)
    return task.default_condition()


def _formula(args):
    if not getattr(args, "formula", None):
        return None
    try:
        return loads(Path(_need(args.formula)).read_text())
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read formula {args.formula}: {exc}") from None


def _inputs(args, *paths):
    extra = [args.formula] if getattr(args, "formula", None) else []
    return [p for p in paths if p] + extra


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, default=float)
    sys.stdout.write("\n")


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=float)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    task = get_task(args.task)
    if task.env is None:
        raise UsageError("toy1d has no dataset")
    variant = args.variant
    try:
        ds = make_dataset(task.env, args.n, variant, seed=args.seed, n_nodes=args.nodes,
                          k_neighbors=args.k)
    except RuntimeError as exc:
        raise DomainError(str(exc)) from None
    ds.meta["provenance"] = provenance(args)
    ds.save(args.out)
    _emit({"out": str(args.out), "count": len(ds), "horizon": ds.meta["horizon"]})
    return EXIT_OK


def cmd_train(args) -> int:
    task = get_task(args.task)
    if args.model == "identity":
        if task.name != "toy1d":
            raise UsageError("the identity model only exists for toy1d")
        model = identity_model()
        model.meta["provenance"] = provenance(args)
    else:
        ds = TrajectoryDataset.load(_need(args.data))
        cfg = TrainingConfig(lr=args.lr, batch_size=args.batch, iterations=args.iters,
                             optimizer=args.optimizer, seed=args.seed)
        try:
            model = train_model(task, args.model, ds, cfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        model.meta["provenance"] = provenance(args, [args.data])
    model.save(args.out)
    _emit({"out": str(args.out), "model": model.kind, "digest": model.digest(),
           "final_loss": model.meta.get("final_loss")})
    return EXIT_OK


def cmd_certify(args) -> int:
    task = get_task(args.task)
    model = _load_model(args.weights)
    reward, phi = model_reward(model, task, _formula(args))
    y = _condition(args, task)
    pcfg = PivotSearchConfig(step_size=args.gamma, iterations=args.iters, restarts=args.L)
    ecfg = ExpansionConfig(eps0=args.eps0, delta=args.delta, mode=args.mode, alpha=args.alpha,
                           method=args.method)
    threads = _threads(args)
    if args.pivot is not None:
        try:
            pivot = np.array([float(v) for v in args.pivot.split(",")])
        except ValueError:
            raise UsageError("--pivot expects comma-separated numbers") from None
        if pivot.size != model.latent_dim:
            raise UsageError(f"--pivot needs {model.latent_dim} numbers")
        reg = expand_box(reward, pivot, [], ecfg, y)
        result = CertifiedLatent([reg] if reg is not None else [], y, attempts=1)
        result.fill_probabilities()
    else:
        result = certify(reward, y, pcfg, ecfg, seed=args.seed,
                         parallel=bool(threads and threads > 1), threads=threads)
    result.formula_id = digest(formula_dict(phi))
    result.generator_id = model.digest()
    result.meta["provenance"] = provenance(args, _inputs(args, args.weights))
    result.meta["task"] = task.name
    if result.empty:
        raise DomainError(str(EmptyRegionError()))
    _write_json(args.out, result.to_dict())
    _emit({"out": str(args.out), "regions": len(result.regions), "log_total": result.log_total,
           "eps": [r.eps.tolist() for r in result.regions]})
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.graph:
        try:
            reward = Graph.loads(Path(_need(args.graph)).read_text())
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read graph {args.graph}: {exc}") from None
        if "z" not in reward.inputs or reward.output_node().size != 1:
            raise UsageError("graph needs a latent input 'z' and a scalar output")
        k = reward.nodes[reward.inputs["z"]].size
        y = None
        if "y" in reward.inputs:
            if not args.condition:
                raise UsageError("graph has a condition input; pass --condition")
            y = np.array([float(v) for v in args.condition.split(",")])
        inputs = _inputs(args, args.graph, args.box)
    else:
        if not (args.weights and args.task):
            raise UsageError("verify needs --graph, or --weights with --task")
        task = get_task(args.task)
        model = _load_model(args.weights)
        reward, _ = model_reward(model, task, _formula(args))
        k = model.latent_dim
        y = _condition(args, task)
        inputs = _inputs(args, args.weights, args.box)
    box = load_box(_need(args.box))
    if box.dim != k:
        raise UsageError(f"box has {box.dim} dims, latent space has {k}")
    sb = verify_box(reward, box, y, method=args.method)
    _emit({**sb.to_dict(), "provenance": provenance(args, inputs)})
    return EXIT_OK


def cmd_export_graph(args) -> int:
    task = get_task(args.task)
    model = _load_model(args.weights)
    reward, _ = model_reward(model, task, _formula(args))
    Path(args.out).write_text(reward.dumps())
    _emit({"out": str(args.out), "nodes": len(reward.nodes)})
    return EXIT_OK


def _load_regions(path, model: Model) -> CertifiedLatent:
    with open(_need(path)) as fh:
        try:
            reg = CertifiedLatent.from_dict(json.load(fh))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"cannot read regions {path}: {exc}") from None
    if reg.generator_id != model.digest():
        raise DomainError(f"hash mismatch: regions were certified for generator {reg.generator_id[:16]}, "
                          f"weights file hashes to {model.digest()[:16]}")
    return reg


def cmd_sample(args) -> int:
    model = _load_model(args.weights)
    reg = _load_regions(args.regions, model)
    if reg.empty:
        raise DomainError(str(EmptyRegionError()))
    rng = np.random.default_rng(args.seed)
    z = reg.mixture().sample(rng, args.n)
    y = reg.condition
    x = model.generate(z, y)
    header = {"format": "certiplan.latents", "version": 1, "count": int(args.n),
              "generator_id": model.digest(), "regions_hash": file_hash(args.regions),
              "condition": None if y is None else y.tolist(),
              "provenance": provenance(args, [args.weights, args.regions])}
    with open(args.out, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for zi, xi in zip(z, x):
            fh.write(json.dumps({"z": zi.tolist(), "x": xi.tolist()}) + "\n")
    _emit({"out": str(args.out), "count": int(args.n)})
    return EXIT_OK


def read_latents(path):
    with open(_need(path)) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "certiplan.latents":
            raise UsageError(f"{path} is not a latents file")
        z = np.array([json.loads(line)["z"] for line in fh if line.strip()], dtype=float)
    return header, z


def cmd_loglik(args) -> int:
    header, z = read_latents(args.latents)
    if z.shape[0] < args.count:
        raise UsageError(f"need {args.count} latents, file has {z.shape[0]}")
    out = {"loglik": loglik_summary(z, args.count), "count": args.count,
           "per_sample": std_normal_logpdf(z[: args.count]).tolist(),
           "provenance": header.get("provenance")}
    if args.regions:
        with open(_need(args.regions)) as fh:
            reg = CertifiedLatent.from_dict(json.load(fh))
        if header.get("regions_hash") not in (None, file_hash(args.regions)):
            raise DomainError("hash mismatch: latents were drawn from a different region file")
        out["log_p_B"] = reg.log_total
    _emit(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in ("original", "guidance", "certified", "original_sat")]
    if bad:
        raise UsageError(f"unknown methods: {bad}")
    if "certified" in methods and args.regions is None:
        raise UsageError("the certified method needs --regions")
    task = get_task(args.task)
    model = _load_model(args.weights)
    reward, phi = model_reward(model, task, _formula(args))
    reg = _load_regions(args.regions, model) if args.regions else None
    y = reg.condition if reg is not None else _condition(args, task)
    inputs = _inputs(args, args.weights, args.regions)
    report = {"task": task.name, "model": model.kind, "n": args.n,
              "condition": None if y is None else np.asarray(y).tolist(), "acceptance": {},
              "loglik": {}, "runs": {}}
    if args.latents:
        header, z = read_latents(args.latents)
        if header.get("generator_id") != model.digest():
            raise DomainError("hash mismatch: latents were drawn for a different generator")
        traj = concat_condition(y, model.generate(z, y)) if y is not None else model.generate(z)
        ok = batch_boolean(phi, traj)
        report["latents"] = {"count": int(z.shape[0]), "violations": int((~ok).sum()),
                             "provenance": header.get("provenance")}
        inputs.append(args.latents)
    for i, m in enumerate(methods):
        rng = np.random.default_rng([args.seed, i])
        run = run_method(m, model, phi, y if y is not None else np.zeros((0, task.state_dim)),
                         args.n, rng, reward=reward, regions=reg,
                         pivot_cfg=PivotSearchConfig(iterations=args.iters), cap=args.cap)
        report["acceptance"][m] = {"ratio": run.ratio, "drawn": run.drawn,
                                   "accepted": run.accepted, "truncated": run.truncated}
        report["loglik"][m] = loglik_of_run(run, args.n)
        report["runs"][m] = {"z": run.z.tolist(), "boolean": run.boolean.astype(int).tolist(),
                             "robustness": run.robustness.tolist()}
    report["provenance"] = provenance(args, inputs)
    _write_json(args.out, report)
    _emit({k: report[k] for k in ("acceptance", "loglik")})
    return EXIT_OK


def cmd_plot(args) -> int:
    task = get_task(args.task)
    if task.env is None:
        raise UsageError("toy1d has no workspace to draw")
    runs = []
    if args.data:
        ds = TrajectoryDataset.load(_need(args.data))
        full = ds.full()
        runs.append(MethodRun("data", np.zeros((len(full), 0)), full, np.zeros(len(full)),
                              np.ones(len(full), dtype=bool), len(full), len(full)))
    if args.report:
        if not args.weights:
            raise UsageError("--report needs --weights to regenerate trajectories")
        model = _load_model(args.weights)
        with open(_need(args.report)) as fh:
            rep = json.load(fh)
        y = np.asarray(rep["condition"]) if rep.get("condition") is not None else _condition(args, task)
        for m, r in rep["runs"].items():
            z = np.asarray(r["z"], dtype=float)
            if z.size == 0:
                continue
            z = z[: args.max]
            traj = concat_condition(y, model.generate(z, y))
            runs.append(MethodRun(m, z, traj, batch_robustness(model_reward(model, task)[1], traj),
                                  np.asarray(r["boolean"][: len(z)], dtype=bool), len(z), 0))
    if not runs:
        raise UsageError("plot needs --data or --report")
    csv_path, svg_path = export_figure_data(runs, task.env, args.out_dir, args.stem)
    _emit({"csv": str(csv_path), "svg": str(svg_path)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="certiplan", description="Certified sampling of STL-satisfying trajectories.")
    p.add_argument("--version", action="version", version=f"certiplan {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--task", required=True, choices=TASKS)
        if seed:
            sp.add_argument("--seed", type=int, required=True)

    s = sub.add_parser("gen-data", help="PRM training trajectories")
    common(s)
    s.add_argument("--variant", choices=("gan", "diff"), default="gan")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--nodes", type=int, default=300)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a generator")
    common(s)
    s.add_argument("--model", choices=("gan", "ddim", "identity"), required=True)
    s.add_argument("--data")
    s.add_argument("--iters", type=int, default=3000)
    s.add_argument("--lr", type=float, default=0.0005)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--optimizer", choices=("adam", "radam"), default="radam")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("certify", help="search certified latent boxes")
    common(s)
    s.add_argument("--weights", required=True)
    s.add_argument("--condition")
    s.add_argument("--L", type=int, default=20)
    s.add_argument("--gamma", type=float, default=0.05)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--eps0", type=float, default=0.01)
    s.add_argument("--delta", "--deps", dest="delta", type=float, default=0.005)
    s.add_argument("--mode", choices=("homogeneous", "heterogeneous"), default="homogeneous")
    s.add_argument("--alpha", type=float, default=0.005)
    s.add_argument("--method", choices=("crown", "ibp"), default="crown")
    s.add_argument("--formula", help="STL formula JSON replacing the task requirement")
    s.add_argument("--pivot", help="expand around this latent point instead of searching")
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("verify", help="bound robustness over one latent box")
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--weights")
    s.add_argument("--graph", help="reward graph JSON with latent input 'z'")
    s.add_argument("--box", required=True)
    s.add_argument("--condition")
    s.add_argument("--method", choices=("crown", "ibp"), default="crown")
    s.add_argument("--formula")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("export-graph", help="write the reward graph of a model as JSON")
    common(s, seed=False)
    s.add_argument("--weights", required=True)
    s.add_argument("--formula")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_graph)

    s = sub.add_parser("sample", help="draw latents from the certified distribution")
    s.add_argument("--weights", required=True)
    s.add_argument("--regions", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("loglik", help="summed standard-normal log-likelihood of latents")
    s.add_argument("--latents", required=True)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--regions")
    s.set_defaults(func=cmd_loglik)

    s = sub.add_parser("eval", help="acceptance ratios and log-likelihoods")
    common(s)
    s.add_argument("--weights", required=True)
    s.add_argument("--regions")
    s.add_argument("--latents")
    s.add_argument("--condition")
    s.add_argument("--formula")
    s.add_argument("--methods", default="original,guidance,certified")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--iters", type=int, default=100, help="guidance ascent steps")
    s.add_argument("--cap", type=int, default=10 ** 6)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="CSV and SVG of trajectories")
    common(s, seed=False)
    s.add_argument("--data")
    s.add_argument("--report")
    s.add_argument("--weights")
    s.add_argument("--condition")
    s.add_argument("--max", type=int, default=50)
    s.add_argument("--stem", default="trajectories")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"certiplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, EmptyRegionError) as exc:
        print(f"certiplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
